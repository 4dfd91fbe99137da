"""Parameter counts of the full model and its ablations at the default scale.

    python scripts/param_count.py --channels 96 --frames 243
"""
from __future__ import annotations

import argparse
import json

from glagcn.network import ModelConfig, build_model, param_breakdown

VARIANT_FLAGS = {"full": {}, "no_adaptive": {"no_adaptive": True}, "no_strided": {"no_strided": True},
                 "fc_head": {"fc_head": True}, "swap_limbs": {"swap_limbs": True}}


def counts(channels: int = 96, frames: int = 243) -> dict[str, dict[str, int]]:
    return {name: param_breakdown(build_model(ModelConfig(frames=frames, channels=channels, **flags), seed=0))
            for name, flags in VARIANT_FLAGS.items()}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=96)
    ap.add_argument("--frames", type=int, default=243)
    ap.add_argument("--json", action="store_true", help="print the full breakdown as JSON")
    args = ap.parse_args(argv)
    table = counts(args.channels, args.frames)
    if args.json:
        print(json.dumps(table, indent=1))
        return
    for name, parts in table.items():
        print(f"{name:<12s} {parts['total']:>10,d}")


if __name__ == "__main__":
    main()
