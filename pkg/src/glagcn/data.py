"""Pose-sequence files, windowing, synthetic motion and checkpoint persistence.

Pose files (``*.pseq``) are JSON manifests whose arrays are little-endian
float32, row-major with frames outermost (frame -> joint -> coordinate),
stored either base64-inline or in a sidecar ``.bin`` file next to the
manifest.  Checkpoints are a JSON manifest plus one flat float32 binary.
"""
from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataError, ValidationError
from .skeleton import PRESETS, SkeletonGraph, build_skeleton

POSE_FORMAT = "pseq/1"
CHECKPOINT_FORMAT = "glagcn-ckpt/1"

# fixed orthographic camera of the synthetic generator
SYNTH_IMAGE_SIZE = (1000, 1000)
SYNTH_PIXELS_PER_MM = 0.4
SYNTH_FPS = 50.0


@dataclass
class PoseSequenceFile:
    skeleton: SkeletonGraph
    subject: str
    action: str
    pose2d: np.ndarray  # (T, N, 2)
    pose3d: np.ndarray | None = None  # (T, N, 3)
    units: str = "mm"
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        n = self.skeleton.joint_count
        self.pose2d = np.asarray(self.pose2d)
        if self.pose2d.ndim != 3 or self.pose2d.shape[1:] != (n, 2):
            raise DataError(f"pose2d: expected (frames, {n}, 2) for the skeleton's {n} joints, "
                            f"got {self.pose2d.shape}")
        if self.pose3d is not None:
            self.pose3d = np.asarray(self.pose3d)
            if self.pose3d.shape != (self.pose2d.shape[0], n, 3):
                raise DataError(f"pose3d: expected ({self.pose2d.shape[0]}, {n}, 3), got {self.pose3d.shape}")

    @property
    def frames(self) -> int:
        return self.pose2d.shape[0]


@dataclass
class PoseWindow:
    input2d: np.ndarray  # (T, N, 2)
    target3d: np.ndarray | None  # (N, 3) root-centred centre frame
    seq3d: np.ndarray | None  # (T, N, 3) root-centred
    source: tuple[str, int]  # (sequence label, centre frame)
    action: str = ""
    subject: str = ""


# --------------------------------------------------------------------------
# pose files


def _skeleton_block(sk: SkeletonGraph) -> str | dict:
    if sk.name in PRESETS:
        preset = build_skeleton(sk.name)
        if (preset.edges == sk.edges and preset.root == sk.root
                and np.array_equal(preset.reference_pose, sk.reference_pose)):
            return sk.name
    return sk.to_dict()


def _encode(arr: np.ndarray, encoding: str, manifest_path: Path, name: str) -> dict:
    payload = np.ascontiguousarray(arr, dtype="<f4")
    entry: dict[str, Any] = {"shape": list(payload.shape), "dtype": "f32", "encoding": encoding}
    if encoding == "base64":
        entry["data"] = base64.b64encode(payload.tobytes()).decode("ascii")
    elif encoding == "sidecar":
        fname = f"{manifest_path.name}.{name}.bin"
        _atomic_write_bytes(manifest_path.with_name(fname), payload.tobytes())
        entry["file"] = fname
    else:
        raise ValidationError(f"unknown array encoding {encoding!r}")
    return entry


def _decode(entry: Any, manifest_path: Path, name: str) -> np.ndarray:
    where = f"arrays.{name}"
    if not isinstance(entry, dict):
        raise DataError(f"{where}: expected an object")
    for key in ("shape", "dtype", "encoding"):
        if key not in entry:
            raise DataError(f"{where}: missing '{key}'")
    if entry["dtype"] != "f32":
        raise DataError(f"{where}.dtype: only 'f32' is supported, got {entry['dtype']!r}")
    shape = tuple(int(s) for s in entry["shape"])
    if entry["encoding"] == "base64":
        try:
            raw = base64.b64decode(entry["data"], validate=True)
        except (KeyError, ValueError) as exc:
            raise DataError(f"{where}.data: bad base64 payload ({exc})") from None
    elif entry["encoding"] == "sidecar":
        try:
            raw = manifest_path.with_name(entry["file"]).read_bytes()
        except (KeyError, OSError) as exc:
            raise DataError(f"{where}.file: cannot read sidecar ({exc})") from None
    else:
        raise DataError(f"{where}.encoding: unknown encoding {entry['encoding']!r}")
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DataError(f"{where}: payload has {len(raw)} bytes, shape {shape} needs {expected}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{where}: non-finite values")
    return arr


def save_pose_file(file: PoseSequenceFile, path: str | os.PathLike, encoding: str = "base64") -> None:
    path = Path(path)
    arrays = {"pose2d": _encode(file.pose2d, encoding, path, "pose2d")}
    if file.pose3d is not None:
        arrays["pose3d"] = _encode(file.pose3d, encoding, path, "pose3d")
    doc: dict[str, Any] = {
        "format_version": POSE_FORMAT,
        "skeleton": _skeleton_block(file.skeleton),
        "subject": file.subject,
        "action": file.action,
        "frames": file.frames,
        "joints": file.skeleton.joint_count,
        "units": file.units,
    }
    if file.image_size is not None:
        doc["image_size"] = list(file.image_size)
    doc["arrays"] = arrays
    _atomic_write_bytes(path, json.dumps(doc, indent=1).encode())


def load_pose_file(path: str | os.PathLike) -> PoseSequenceFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: top level must be an object")
    if doc.get("format_version") != POSE_FORMAT:
        raise DataError(f"{path}: format_version must be {POSE_FORMAT!r}, got {doc.get('format_version')!r}")
    for key in ("skeleton", "frames", "joints", "arrays"):
        if key not in doc:
            raise DataError(f"{path}: missing field '{key}'")
    try:
        sk = build_skeleton(doc["skeleton"])
    except ValidationError as exc:
        raise DataError(f"{path}: skeleton: {exc}") from None
    if int(doc["joints"]) != sk.joint_count:
        raise DataError(f"{path}: joints={doc['joints']} but skeleton has {sk.joint_count} joints")
    arrays = doc["arrays"]
    if "pose2d" not in arrays:
        raise DataError(f"{path}: arrays.pose2d is required")
    pose2d = _decode(arrays["pose2d"], path, "pose2d")
    pose3d = _decode(arrays["pose3d"], path, "pose3d") if "pose3d" in arrays else None
    frames = int(doc["frames"])
    if pose2d.ndim != 3 or pose2d.shape[1] != sk.joint_count:
        got = pose2d.shape[1] if pose2d.ndim == 3 else pose2d.shape
        raise DataError(f"{path}: arrays.pose2d has {got} joints but skeleton has {sk.joint_count}")
    if pose2d.shape != (frames, sk.joint_count, 2):
        raise DataError(f"{path}: arrays.pose2d shape {pose2d.shape} does not match frames={frames}")
    if pose3d is not None and pose3d.shape != (frames, sk.joint_count, 3):
        raise DataError(f"{path}: arrays.pose3d shape {pose3d.shape}, expected ({frames}, {sk.joint_count}, 3)")
    image_size = doc.get("image_size")
    if image_size is not None:
        image_size = (int(image_size[0]), int(image_size[1]))
    return PoseSequenceFile(sk, str(doc.get("subject", "")), str(doc.get("action", "")),
                            pose2d, pose3d, str(doc.get("units", "mm")), image_size)


def load_dataset(directory: str | os.PathLike) -> list[PoseSequenceFile]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(directory.glob("*.pseq"))
    if not files:
        raise DataError(f"{directory}: no .pseq files found")
    return [load_pose_file(p) for p in files]


# --------------------------------------------------------------------------
# windows


def normalize_2d(seq: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Pixels -> [-1, 1] horizontally, same scale vertically (aspect kept)."""
    w, h = image_size
    out = np.array(seq, dtype=float, copy=True)
    out[..., 0] = 2.0 * out[..., 0] / w - 1.0
    out[..., 1] = 2.0 * out[..., 1] / w - h / w
    return out


def make_windows(file: PoseSequenceFile, frames: int, normalize: bool = True, label: str | None = None) -> list[PoseWindow]:
    """One window per frame, edge-replicating the sequence so every frame can be a centre."""
    if frames < 1 or frames % 2 == 0:
        raise ValidationError(f"window length must be a positive odd number, got {frames}")
    seq2d = file.pose2d
    if normalize and file.image_size is not None:
        seq2d = normalize_2d(seq2d, file.image_size)
    seq2d = np.asarray(seq2d, dtype=np.float64)
    root = file.skeleton.root
    p3 = None
    if file.pose3d is not None:
        p3 = np.asarray(file.pose3d, dtype=np.float64)
        p3 = p3 - p3[:, root:root + 1]
    half = (frames - 1) // 2
    total = file.frames
    label = label if label is not None else f"{file.subject}/{file.action}"
    out = []
    for f in range(total):
        idx = np.clip(np.arange(f - half, f + half + 1), 0, total - 1)
        out.append(PoseWindow(
            input2d=seq2d[idx],
            target3d=None if p3 is None else p3[f],
            seq3d=None if p3 is None else p3[idx],
            source=(label, f), action=file.action, subject=file.subject,
        ))
    return out


@dataclass
class Batch:
    x: np.ndarray  # (B, 2, T, N)
    target: np.ndarray | None  # (B, N, 3)
    seq: np.ndarray | None  # (B, 3, T, N)

    def __len__(self) -> int:
        return self.x.shape[0]


def collate(windows: Sequence[PoseWindow], dtype=np.float64) -> Batch:
    x = np.stack([w.input2d for w in windows]).transpose(0, 3, 1, 2).astype(dtype)
    if any(w.target3d is None for w in windows):
        return Batch(np.ascontiguousarray(x), None, None)
    target = np.stack([w.target3d for w in windows]).astype(dtype)
    seq = np.stack([w.seq3d for w in windows]).transpose(0, 3, 1, 2).astype(dtype)
    return Batch(np.ascontiguousarray(x), target, np.ascontiguousarray(seq))


# --------------------------------------------------------------------------
# synthetic motion


def project_synthetic(pose3d: np.ndarray, image_size=SYNTH_IMAGE_SIZE, pixels_per_mm=SYNTH_PIXELS_PER_MM) -> np.ndarray:
    """The generator's orthographic camera: drop depth, flip y to image rows."""
    w, h = image_size
    uv = np.empty(pose3d.shape[:-1] + (2,))
    uv[..., 0] = w / 2 + pixels_per_mm * pose3d[..., 0]
    uv[..., 1] = h / 2 - pixels_per_mm * pose3d[..., 1]
    return uv


def _band_limited(rng, frames, dims, amplitude, harmonics=3, max_hz=1.2):
    t = np.arange(frames)[:, None] / SYNTH_FPS
    out = np.zeros((frames, dims))
    for _ in range(harmonics):
        freq = rng.uniform(0.1, max_hz, size=dims)
        phase = rng.uniform(0, 2 * np.pi, size=dims)
        amp = rng.uniform(0.3, 1.0, size=dims) * amplitude / harmonics
        out += amp * np.sin(2 * np.pi * freq * t + phase)
    return out


_ACTIONS = ("sway", "reach", "stride")


def synth_generate(sequences: int = 4, frames: int = 64, skeleton: str | SkeletonGraph = "h36m17",
                   seed: int = 0, noise: float = 0.0, subject: str = "S0") -> list[PoseSequenceFile]:
    """Forward-kinematics random motion with rigid bones and an orthographic 2D view.

    Every bone keeps its rest-pose length; joint rotations are smooth sums of
    low-frequency sinusoids.  ``noise`` is the pixel standard deviation added
    to the 2D projection.
    """
    sk = build_skeleton(skeleton) if not isinstance(skeleton, SkeletonGraph) else skeleton
    if sk.rest_pose is None:
        raise ValidationError("synthetic generation needs a skeleton with a 3D rest pose")
    rng = np.random.default_rng(seed)
    rest = np.asarray(sk.rest_pose, dtype=float)
    parents = sk.parents()
    order = sk.topological_order()
    offsets = np.array([rest[j] - rest[parents[j]] if parents[j] >= 0 else rest[j] for j in range(sk.joint_count)])
    limb = {j for j, name in enumerate(sk.joint_names) if any(s in name for s in ("knee", "ankle", "elbow", "wrist", "shoulder", "hip"))}

    out = []
    for s in range(sequences):
        action = _ACTIONS[s % len(_ACTIONS)]
        gain = {"sway": 0.6, "reach": 0.9, "stride": 1.2}[action]
        yaw = _band_limited(rng, frames, 1, 0.8, max_hz=0.3)[:, 0]
        tilt = _band_limited(rng, frames, 2, 0.1)
        root_rot = Rotation.from_euler("yxz", np.column_stack([yaw, tilt]))
        trans = _band_limited(rng, frames, 3, 150.0, max_hz=0.3)
        glob: list[Rotation | None] = [None] * sk.joint_count
        pos = np.zeros((frames, sk.joint_count, 3))
        for j in order:
            p = parents[j]
            if p < 0:
                glob[j] = root_rot
                pos[:, j] = trans
                continue
            amp = gain * (0.6 if j in limb else 0.15)
            local = Rotation.from_rotvec(_band_limited(rng, frames, 3, amp))
            glob[j] = glob[p] * local
            pos[:, j] = pos[:, p] + glob[j].apply(offsets[j])
        pose2d = project_synthetic(pos)
        if noise > 0:
            pose2d = pose2d + rng.normal(0.0, noise, size=pose2d.shape)
        out.append(PoseSequenceFile(sk, subject, action, pose2d, pos, "mm", SYNTH_IMAGE_SIZE))
    return out


# --------------------------------------------------------------------------
# checkpoints


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_binary_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".bin")


def save_checkpoint(model, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write ``path`` (JSON manifest) and ``path.bin`` (float32 payload in manifest order)."""
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, arr in model.state_dict().items():
        flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(flat.size)})
        chunks.append(flat)
        offset += flat.size
    payload = np.concatenate(chunks).tobytes() if chunks else b""
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "skeleton": model.skeleton.to_dict(),
        "seed": model.seed,
        "binary": checkpoint_binary_path(path).name,
        "total_count": offset,
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    _atomic_write_bytes(checkpoint_binary_path(path), payload)
    _atomic_write_bytes(path, json.dumps(manifest, indent=1).encode())


def load_checkpoint(path: str | os.PathLike):
    from .network import ModelConfig, build_model

    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint manifest (format_version={manifest.get('format_version')!r})")
    config = ModelConfig.from_dict(manifest["config"])
    model = build_model(config, build_skeleton(manifest["skeleton"]), manifest.get("seed"))
    bin_path = path.with_name(manifest.get("binary", checkpoint_binary_path(path).name))
    try:
        raw = bin_path.read_bytes()
    except OSError as exc:
        raise DataError(f"{bin_path}: {exc}") from None
    total = int(manifest["total_count"])
    if len(raw) != 4 * total:
        raise DataError(f"{bin_path}: length mismatch, manifest needs {4 * total} bytes, binary has {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4")
    own = model.state_dict()
    state = {}
    for t in manifest["tensors"]:
        name = t["name"]
        if name not in own:
            raise DataError(f"{path}: unknown tensor name {name!r}")
        shape = tuple(t["shape"])
        if shape != own[name].shape:
            raise DataError(f"{path}: tensor {name!r} has shape {shape}, model expects {own[name].shape}")
        start, count = int(t["offset"]), int(t["count"])
        if count != int(np.prod(shape)) or start + count > total:
            raise DataError(f"{path}: tensor {name!r} has inconsistent offset/count")
        state[name] = flat[start:start + count].reshape(shape)
    missing = set(own) - set(state)
    if missing:
        raise DataError(f"{path}: checkpoint lacks tensors {sorted(missing)[:5]}")
    model.load_state(state)
    return model


def iter_windows(files: Iterable[PoseSequenceFile], frames: int, normalize: bool = True) -> list[PoseWindow]:
    out = []
    for i, f in enumerate(files):
        out.extend(make_windows(f, frames, normalize, label=f"{i}:{f.subject}/{f.action}"))
    return out
