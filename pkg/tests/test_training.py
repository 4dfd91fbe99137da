import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import numeric_grad, rel_err

from glagcn.data import Batch, collate, iter_windows, synth_generate
from glagcn.errors import ConfigError, NumericError, ShapeError
from glagcn.network import build_model, forward
from glagcn.skeleton import build_skeleton, flip_permutation
from glagcn.training import (SGD, TINY_SKELETON, AdamW, TrainConfig, augment_flip, compute_gradients, fit,
                             grad_check, loss_global, loss_global_grad, loss_local, loss_local_grad, tiny_config,
                             train_step)

TINY = build_skeleton(TINY_SKELETON)


def tiny_model(seed=0, **kw):
    return build_model(tiny_config(**kw), TINY, seed)


def tiny_batch(seed=0, batch=2, frames=9, n=5):
    rng = np.random.default_rng(seed)
    target = rng.normal(0, 100, size=(batch, n, 3))
    seq = rng.normal(0, 100, size=(batch, 3, frames, n))
    target[:, 0] = 0
    seq[:, :, :, 0] = 0
    return Batch(rng.normal(size=(batch, 2, frames, n)), target, seq)


def synthetic_windows(frames=9, seed=0, sequences=2, length=12):
    files = synth_generate(sequences, length, seed=seed)
    return iter_windows(files, frames)


# --------------------------------------------------------------------------
# losses


def test_global_loss_hand_example():
    gt = np.zeros((1, 3, 2, 2))
    recon = gt.copy()
    recon[0, 0, 1, 1] = 2.0
    assert loss_global(recon, gt) == pytest.approx(0.5, abs=1e-15)
    recon[0, 0, 1, 1] = 4.0
    assert loss_global(recon, gt) == pytest.approx(1.0, abs=1e-15)
    assert loss_global(gt, gt) == 0.0


def test_local_loss_hand_example():
    gt = np.zeros((1, 5, 3))
    pred = gt.copy()
    pred[0, 2] = (3, 4, 0)
    assert loss_local(pred, gt) == pytest.approx(1.0, abs=1e-15)
    assert loss_local(gt, gt) == 0.0


def test_losses_reject_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_local(np.zeros((1, 5, 3)), np.zeros((1, 4, 3)))
    with pytest.raises(ShapeError):
        loss_global(np.zeros((1, 3, 2, 2)), np.zeros((1, 2, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_properties(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5, 3))
    val = loss_local(pred, gt)
    assert val > 0
    order = rng.permutation(4)
    assert loss_local(pred[order], gt[order]) == pytest.approx(val, rel=1e-12)
    perm = flip_permutation(TINY)
    mirror = np.array([-1.0, 1.0, 1.0])
    assert loss_local(pred[:, perm] * mirror, gt[:, perm] * mirror) == pytest.approx(val, rel=1e-12)
    seq_p, seq_g = rng.normal(size=(2, 3, 3, 5)), rng.normal(size=(2, 3, 3, 5))
    g = loss_global(seq_p, seq_g)
    assert g > 0 and loss_global(seq_g, seq_g) == 0
    assert loss_global(seq_g + 2 * (seq_p - seq_g), seq_g) == pytest.approx(2 * g, rel=1e-12)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    pred, gt = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
    _, g = loss_local_grad(pred, gt)
    assert rel_err(g, numeric_grad(lambda: loss_local(pred, gt), pred)) < 1e-7
    seq, gseq = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 4, 5))
    _, g = loss_global_grad(seq, gseq)
    assert rel_err(g, numeric_grad(lambda: loss_global(seq, gseq), seq)) < 1e-7


def test_loss_gradient_is_zero_at_exact_match():
    x = np.ones((1, 5, 3))
    assert not loss_local_grad(x, x)[1].any()


# --------------------------------------------------------------------------
# augmentation


def test_flip_augmentation_properties():
    w = synthetic_windows()[3]
    perm = flip_permutation(build_skeleton("h36m17"))
    twice = augment_flip(augment_flip(w, perm), perm)
    for a, b in ((w.input2d, twice.input2d), (w.target3d, twice.target3d), (w.seq3d, twice.seq3d)):
        np.testing.assert_array_equal(a, b)
    once = augment_flip(w, perm)
    assert not once.target3d[0].any()
    assert not once.seq3d[:, 0].any()
    rng = np.random.default_rng(0)
    pred = w.target3d + rng.normal(size=w.target3d.shape)
    pred_flip = pred[perm] * np.array([-1.0, 1.0, 1.0])
    assert loss_local(pred_flip, once.target3d) == pytest.approx(loss_local(pred, w.target3d), rel=1e-12)


# --------------------------------------------------------------------------
# optimizers


def test_adamw_first_step_matches_hand_formula():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    opt = AdamW(lr=0.1, weight_decay=0.01)
    opt.step(p, g)
    # bias-corrected first step is lr * g / (|g| + eps) after the decoupled decay
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, -0.1]) * (
        np.abs([0.5, -0.1]) / (np.abs([0.5, -0.1]) + 1e-8))
    np.testing.assert_allclose(p["w"], expect, rtol=1e-12)


def test_sgd_momentum():
    p = {"w": np.array([1.0])}
    opt = SGD(lr=0.1, momentum=0.5)
    opt.step(p, {"w": np.array([1.0])})
    opt.step(p, {"w": np.array([1.0])})
    np.testing.assert_allclose(p["w"], [1.0 - 0.1 - 0.15])


# --------------------------------------------------------------------------
# train_step


def test_zero_learning_rate_keeps_parameters():
    m = tiny_model()
    before = {k: v.copy() for k, v in m.named_params().items()}
    metrics, _ = train_step(m, tiny_batch(), 1, AdamW(lr=0.0), np.random.default_rng(0))
    assert metrics["loss_total"] == pytest.approx(metrics["loss_global"] + metrics["loss_local"])
    for k, v in m.named_params().items():
        np.testing.assert_array_equal(v, before[k])


def test_stage_two_never_moves_reconstruction_head():
    m = tiny_model()
    opt = AdamW(lr=0.01, weight_decay=0.1)
    rng = np.random.default_rng(0)
    train_step(m, tiny_batch(0), 1, opt, rng)  # leaves momentum behind
    frozen = {k: v.copy() for k, v in m.recon_head.named_params().items()}
    _, grads = compute_gradients(m, tiny_batch(1), 2, rng=rng)
    assert all(not grads[f"recon_head.{k}"].any() for k in frozen)
    for seed in range(3):
        metrics, _ = train_step(m, tiny_batch(seed), 2, opt, rng)
        assert metrics["loss_total"] == metrics["loss_local"]
    for k, v in m.recon_head.named_params().items():
        np.testing.assert_array_equal(v, frozen[k])


def test_small_step_decreases_single_sample_objective():
    m = tiny_model(2)
    batch = tiny_batch(3, batch=1)

    def objective():
        res = forward(m, batch.x, "train", np.random.default_rng(0), update_stats=False)
        return loss_global(res.recon_seq, batch.seq) + loss_local(res.center_pose, batch.target)

    before = objective()
    train_step(m, batch, 1, SGD(lr=1e-4, momentum=0.0), np.random.default_rng(0))
    assert objective() < before


def test_non_finite_input_aborts_with_diagnostic():
    m = tiny_model()
    batch = tiny_batch()
    batch.x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="loss_global"):
        train_step(m, batch, 1, AdamW(), np.random.default_rng(0))


def test_stage_must_be_one_or_two():
    with pytest.raises(ConfigError):
        compute_gradients(tiny_model(), tiny_batch(), 3)


# --------------------------------------------------------------------------
# fit


def test_train_config_validation():
    assert TrainConfig(epochs=10).stage_boundary_epoch == 5
    with pytest.raises(ConfigError):
        TrainConfig(epochs=4, stage_boundary_epoch=5)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"epoch": 3})


def test_zero_epochs_returns_untouched_model():
    m = tiny_model()
    before = {k: v.copy() for k, v in m.state_dict().items()}
    model, hist = fit(m, synthetic_windows(), None, TrainConfig(epochs=0))
    assert model is m and hist.epochs == [] and hist.step_losses == []
    assert all(np.array_equal(v, before[k]) for k, v in m.state_dict().items())


def test_empty_training_set_rejected():
    with pytest.raises(ConfigError, match="empty"):
        fit(tiny_model(), [], None, TrainConfig(epochs=1))


def small_h36m_model(seed=0):
    from glagcn.network import ModelConfig
    return build_model(ModelConfig(frames=9, channels=8), seed=seed)


def test_fit_is_bitwise_reproducible():
    cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=0.005, seed=3)
    train = synthetic_windows()
    _, h1 = fit(small_h36m_model(), train, None, cfg)
    _, h2 = fit(small_h36m_model(), train, None, cfg)
    assert h1.step_losses == h2.step_losses
    assert len(h1.step_losses) == 2 * 3


def test_fit_switches_stage_and_keeps_best_state(tmp_path):
    cfg = TrainConfig(epochs=4, stage_boundary_epoch=1, batch_size=12, learning_rate=0.005)
    train, val = synthetic_windows(), synthetic_windows(seed=9)
    seen = []
    model, hist = fit(small_h36m_model(), train, val, cfg, on_epoch=seen.append)
    assert [r.stage for r in hist.epochs] == [1, 2, 2, 2]
    assert seen == hist.epochs
    assert [r.epoch for r in hist.epochs] == [0, 1, 2, 3]
    assert all(np.isfinite(r.val_mpjpe) for r in hist.epochs)
    best = min(range(4), key=lambda i: hist.epochs[i].val_mpjpe)
    assert hist.best_epoch == best
    assert set(hist.best_state) == set(model.state_dict())
    # stage 2 reports L_local only
    assert hist.epochs[-1].loss_total == pytest.approx(hist.epochs[-1].loss_local)
    path = tmp_path / "hist.csv"
    hist.to_csv(path)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 4 and {"epoch", "loss_global", "loss_local", "val_mpjpe"} <= set(rows[0])


def test_max_steps_caps_training():
    cfg = TrainConfig(epochs=5, batch_size=4, max_steps=3)
    _, hist = fit(small_h36m_model(), synthetic_windows(), None, cfg)
    assert len(hist.step_losses) == 3 and hist.epochs[-1].steps == 3


def test_training_reduces_loss_on_tiny_set():
    train = synthetic_windows(length=8)
    model = small_h36m_model()
    batch = collate(train, model.dtype)
    start = loss_local(forward(model, batch.x).center_pose, batch.target)
    cfg = TrainConfig(epochs=30, batch_size=16, learning_rate=0.003, dropout=0.0, flip_augment=False)
    fit(model, train, None, cfg)
    assert loss_local(forward(model, batch.x).center_pose, batch.target) < 0.5 * start


# --------------------------------------------------------------------------
# gradient check harness


def test_grad_check_passes_and_is_repeatable():
    a = grad_check(variant="no-adaptive", max_entries=20)
    b = grad_check(variant="no-adaptive", max_entries=20)
    assert a.passed, a.format()
    assert [(e.name, e.max_rel_error) for e in a.entries] == [(e.name, e.max_rel_error) for e in b.entries]


def test_grad_check_full_model_sampled():
    report = grad_check(max_entries=12)
    assert report.passed, report.format()
    names = {e.name for e in report.entries}
    assert {"input.B", "input.theta", "input.phi", "head.W_unshared"} <= names


def test_grad_check_flags_corrupted_tensor():
    report = grad_check(variant="no-adaptive", max_entries=20, corrupt={"middle.0.W": 1.01})
    assert report.failed == ["middle.0.W"]
    assert "FAIL" in report.format()


def test_grad_check_in_train_mode():
    # with batch statistics, a temporal-conv bias is cancelled by the following batch norm: its true
    # gradient is exactly zero and central differences only see round-off, so those are the only misses
    report = grad_check(variant="no-adaptive", max_entries=10, mode="train")
    assert report.failed
    assert all(name.endswith("tconv.bias") for name in report.failed), report.format()
    m = build_model(tiny_config(no_adaptive=True, dtype="float64", dropout=0.0), TINY, 0)
    _, grads = compute_gradients(m, tiny_batch(), 1, "train", update_stats=False)
    for name in report.failed:
        assert np.abs(grads[name]).max() < 1e-10


def test_grad_check_rejects_unknown_variant():
    with pytest.raises(ConfigError):
        grad_check(variant="tiny")
