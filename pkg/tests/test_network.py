import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glagcn.errors import ConfigError, ShapeError, UsageError
from glagcn.network import (FcHeadParams, HeadParams, ModelConfig, backward, build_model, flip_window, forward,
                            head_forward, infer_with_flip, param_breakdown, param_count, unflip_pose)
from glagcn.skeleton import build_skeleton, flip_permutation
from glagcn.training import TINY_SKELETON, tiny_config


def tiny_model(seed=0, **overrides):
    return build_model(tiny_config(**overrides), build_skeleton(TINY_SKELETON), seed)


def random_input(cfg, batch=2, seed=0):
    return np.random.default_rng(seed).normal(size=(batch, 2, cfg.frames, cfg.joints))


def random_head(rng, n=4, c=5, lam=0.5):
    return HeadParams(rng.normal(size=(n, c, 3)), rng.normal(size=(n, 3)), rng.normal(size=(c, 3)),
                      rng.normal(size=3), lam)


# --------------------------------------------------------------------------
# config and assembly


@pytest.mark.parametrize("frames, modules", [(243, 5), (27, 3), (9, 2), (3, 1)])
def test_strided_module_count(frames, modules):
    assert ModelConfig(frames=frames, channels=8).strided_modules == modules
    assert len(build_model(ModelConfig(frames=frames, channels=8)).strided_modules) == modules


@pytest.mark.parametrize("bad", [dict(frames=100), dict(frames=1), dict(lambda_mix=1.5), dict(temporal_kernel=4),
                                 dict(kernel_size=2), dict(channels=0)])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_config_dict_round_trip_and_unknown_keys():
    cfg = ModelConfig(frames=27, channels=16, fc_head=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({"frame": 27})


def test_joint_count_must_match_skeleton():
    with pytest.raises(ConfigError, match="joints"):
        build_model(ModelConfig(joints=15, frames=27, channels=8), build_skeleton("h36m17"))


def test_same_seed_same_parameters():
    a, b = tiny_model(3), tiny_model(3)
    for name, arr in a.named_params().items():
        np.testing.assert_array_equal(arr, b.named_params()[name])
    c = tiny_model(4)
    assert not np.array_equal(a.named_params()["input.W"], c.named_params()["input.W"])


def test_block_names_and_structure():
    m = tiny_model()
    names = list(m.blocks())
    assert names[:4] == ["input", "middle.0", "middle.1", "recon_head"]
    assert names[4:] == ["strided.0.block1", "strided.0.block2", "strided.1.block1", "strided.1.block2"]
    assert m.recon_head.c_out == 3 and not m.recon_head.activate
    assert all(b2.stride == 3 and b1.stride == 1 for b1, b2 in m.strided_modules)


# --------------------------------------------------------------------------
# forward


def test_default_schedule_and_reconstruction_shape():
    m = build_model(ModelConfig(), seed=0)
    res = forward(m, np.zeros((1, 2, 243, 17), dtype=np.float32))
    assert res.temporal_sizes == [243, 81, 27, 9, 3, 1]
    assert m.shrink_schedule() == [243, 81, 27, 9, 3, 1]
    assert res.recon_seq.shape == (1, 3, 243, 17)
    assert res.center_pose.shape == (1, 17, 3)


def test_short_window_schedule():
    m = build_model(ModelConfig(frames=27, channels=8), seed=0)
    assert forward(m, np.zeros((2, 2, 27, 17))).temporal_sizes == [27, 9, 3, 1]


def test_no_strided_pools_before_head():
    m = tiny_model(no_strided=True)
    assert all(b2.stride == 1 for _, b2 in m.strided_modules)
    res = forward(m, random_input(m.config))
    assert res.temporal_sizes == [9, 9, 9, 1]
    assert res.caches["head_input"].shape[2] == 1


def test_eval_forward_repeatable():
    m = tiny_model()
    x = random_input(m.config)
    a, b = forward(m, x), forward(m, x)
    np.testing.assert_array_equal(a.center_pose, b.center_pose)
    np.testing.assert_array_equal(a.recon_seq, b.recon_seq)


def test_input_shape_checked():
    m = tiny_model()
    with pytest.raises(ShapeError):
        forward(m, np.zeros((1, 2, 27, 5)))
    with pytest.raises(ShapeError):
        forward(m, np.zeros((1, 3, 9, 5)))


def test_swap_limbs_permutes_the_input_only():
    plain, swapped = tiny_model(5), tiny_model(5, swap_limbs=True)
    x = random_input(plain.config)
    perm = flip_permutation(plain.skeleton)
    np.testing.assert_allclose(forward(swapped, x).center_pose, forward(plain, x[..., perm]).center_pose,
                               rtol=1e-12, atol=1e-12)


def test_no_adaptive_drops_learned_terms():
    m = tiny_model(no_adaptive=True)
    names = m.named_params()
    assert not any(k.endswith((".B", ".theta", ".phi")) for k in names)


# --------------------------------------------------------------------------
# head


def test_head_endpoints():
    rng = np.random.default_rng(0)
    h = random_head(rng)
    v = rng.normal(size=(3, 5, 1, 4))
    feats = v[:, :, 0, :].transpose(0, 2, 1)
    shared = feats @ h.W_shared + h.b_shared
    unshared = np.einsum("bnc,nck->bnk", feats, h.W_unshared) + h.b_unshared
    h.lambda_mix = 0.0
    np.testing.assert_allclose(head_forward(v, h), shared, rtol=1e-14)
    h.lambda_mix = 1.0
    np.testing.assert_allclose(head_forward(v, h), unshared, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10_000))
def test_head_is_linear_in_lambda(lam, seed):
    rng = np.random.default_rng(seed)
    h = random_head(rng)
    v = rng.normal(size=(2, 5, 1, 4))
    h.lambda_mix = 1.0
    one = head_forward(v, h)
    h.lambda_mix = 0.0
    zero = head_forward(v, h)
    h.lambda_mix = lam
    np.testing.assert_allclose(head_forward(v, h), lam * one + (1 - lam) * zero, atol=1e-12, rtol=0)


def test_head_unit_vector_example():
    n, c = 3, 4
    h = HeadParams(np.zeros((n, c, 3)), np.zeros((n, 3)), np.zeros((c, 3)), np.zeros(3), 0.0)
    h.W_shared[0] = [1, 2, 3]
    v = np.zeros((1, c, 1, n))
    v[0, 0, 0, :] = 1.0
    np.testing.assert_array_equal(head_forward(v, h), np.tile([1.0, 2.0, 3.0], (1, n, 1)))


def test_head_rejects_temporal_axis():
    h = random_head(np.random.default_rng(0))
    with pytest.raises(UsageError, match="1"):
        head_forward(np.zeros((1, 5, 3, 4)), h)


def test_zeroing_one_joint_only_moves_that_joint_with_unshared_head():
    rng = np.random.default_rng(1)
    h = random_head(rng, lam=1.0)
    v = rng.normal(size=(2, 5, 1, 4))
    before = head_forward(v, h)
    v[:, :, :, 2] = 0
    after = head_forward(v, h)
    changed = np.any(before != after, axis=(0, 2))
    assert changed.tolist() == [False, False, True, False]


def test_fc_head_mixes_joints():
    rng = np.random.default_rng(2)
    n, c = 4, 5
    h = FcHeadParams(rng.normal(size=(n * c, 3 * n)), rng.normal(size=3 * n))
    v = rng.normal(size=(2, c, 1, n))
    before = head_forward(v, h)
    v[:, :, :, 2] = 0
    assert np.all(np.any(before != head_forward(v, h), axis=(0, 2)))


# --------------------------------------------------------------------------
# flip inference


def test_flip_window_is_involution():
    m = tiny_model()
    x = random_input(m.config)
    perm = flip_permutation(m.skeleton)
    np.testing.assert_array_equal(flip_window(flip_window(x, perm), perm), x)
    pose = np.random.default_rng(0).normal(size=(2, 5, 3))
    np.testing.assert_array_equal(unflip_pose(unflip_pose(pose, perm), perm), pose)


def test_infer_with_flip_equals_two_call_composition():
    m = tiny_model(7)
    x = random_input(m.config, seed=3)
    perm = flip_permutation(m.skeleton)
    plain = forward(m, x).center_pose
    mirrored = forward(m, flip_window(x, perm)).center_pose
    mirrored_back = mirrored[:, perm] * np.array([-1.0, 1.0, 1.0])
    np.testing.assert_allclose(infer_with_flip(m, x, perm), 0.5 * (plain + mirrored_back), rtol=1e-13, atol=1e-13)


def test_flip_average_is_a_no_op_for_symmetric_model_and_input():
    # head ignores features and emits a mirror-symmetric pose; input is its own mirror image
    m = tiny_model(8)
    perm = flip_permutation(m.skeleton)
    for arr in m.head.named_params().values():
        arr[...] = 0
    pose = np.random.default_rng(0).normal(size=(5, 3))
    pose = 0.5 * (pose + pose[perm] * np.array([-1.0, 1.0, 1.0]))
    m.head.b_unshared[...] = pose / m.config.output_scale / m.head.lambda_mix
    x = random_input(m.config)
    x = 0.5 * (x + flip_window(x, perm))
    np.testing.assert_allclose(infer_with_flip(m, x, perm), forward(m, x).center_pose, rtol=1e-12, atol=1e-9)


# --------------------------------------------------------------------------
# parameter counts and backward plumbing


def test_fc_head_parameter_count_closed_form():
    c, n = 8, 5
    ind, fc = tiny_model(), tiny_model(fc_head=True)
    assert param_breakdown(ind)["head"] == n * (c * 3 + 3) + (c * 3 + 3)
    assert param_breakdown(fc)["head"] == c * n * 3 * n + 3 * n
    assert param_count(fc) - param_count(ind) == (c * n * 3 * n + 3 * n) - (n * (c * 3 + 3) + (c * 3 + 3))


def test_parameter_count_is_stable_and_about_a_million_at_default_scale():
    a = build_model(ModelConfig(), seed=0)
    b = build_model(ModelConfig(), seed=1)
    assert param_count(a) == param_count(b)
    assert 5e5 < param_count(a) < 5e6
    parts = param_breakdown(a)
    assert parts["total"] == sum(v for k, v in parts.items() if k != "total")


def test_recon_head_gets_zero_gradient_without_reconstruction_loss():
    m = tiny_model()
    x = random_input(m.config)
    res = forward(m, x)
    grads = backward(m, res, np.ones_like(res.center_pose))
    assert all(not grads[f"recon_head.{k}"].any() for k in m.recon_head.named_params())
    assert set(grads) == set(m.named_params())


def test_backward_rejects_stale_caches():
    m = tiny_model()
    res = forward(m, random_input(m.config))
    m.touch()
    with pytest.raises(UsageError, match="stale"):
        backward(m, res, np.ones_like(res.center_pose))


def test_load_state_copies_in_place():
    a, b = tiny_model(1), tiny_model(2)
    b.load_state(a.state_dict())
    x = random_input(a.config)
    np.testing.assert_array_equal(forward(a, x).center_pose, forward(b, x).center_pose)
    with pytest.raises(KeyError):
        b.load_state({"nope": np.zeros(1)})
