import numpy as np
import pytest
from hypothesis import given, strategies as st

from fodkit import regressor as rg
from fodkit.errors import (AbortedTrainingError, EmptyDatasetError, InvalidArgumentError,
                           VolumeFormatError)


def make_dataset(seed=0, dims=(6, 6, 4), order=4, W=None, b=None, mask=None, noise=0.0):
    rng = np.random.default_rng(seed)
    n_in = (order + 1) * (order + 2) // 2
    x = rng.normal(size=dims + (n_in,))
    if W is None:
        W = rng.normal(size=(45, n_in)) * 0.3
        b = rng.normal(size=45) * 0.1
    y = x @ W.T + b + noise * rng.normal(size=dims + (45,))
    mask = np.ones(dims, bool) if mask is None else mask
    return rg.RegressionDataset(x, y, mask, patch_size=4)


def numerical_grads(model, x, y, h=1e-6):
    out = []
    for p in model.params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = rg.l2_loss(rg.forward(model, x), y)
            p[idx] = old - h
            lm = rg.l2_loss(rg.forward(model, x), y)
            p[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out.append(g)
    return out


# ---------------------------------------------------------------- forward

def test_zero_weights_zero_output():
    m = rg.init_model(rg.ModelSpec(), 2)
    for p in m.params:
        p[...] = 0
    assert np.all(rg.forward(m, np.ones((3, 6))) == 0)


def test_linear_forward_unit_vector():
    m = rg.init_model(rg.ModelSpec(), 2)
    x = np.zeros(6)
    x[0] = 1
    assert np.allclose(rg.forward(m, x), m.params[0][:, 0] + m.params[1])


def test_eval_mode_ignores_dropout():
    m = rg.init_model(rg.ModelSpec("mlp", (16,), dropout=0.5), 2)
    x = np.random.default_rng(0).normal(size=(5, 6))
    a = rg.forward(m, x)
    b = rg.forward(m, x, train=False, rng=np.random.default_rng(99))
    assert np.array_equal(a, b)
    c = rg.forward(m, x, train=True, rng=np.random.default_rng(1))
    assert not np.array_equal(a, c)


def test_forward_shape_mismatch():
    m = rg.init_model(rg.ModelSpec(), 2)
    with pytest.raises(InvalidArgumentError):
        rg.forward(m, np.ones(15))


def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        rg.ModelSpec("linear", (4,))
    with pytest.raises(InvalidArgumentError):
        rg.ModelSpec("mlp", ())
    with pytest.raises(InvalidArgumentError):
        rg.ModelSpec("mlp", (4,), dropout=1.0)
    with pytest.raises(InvalidArgumentError):
        rg.ModelSpec("unet")
    with pytest.raises(InvalidArgumentError):
        rg.TrainConfig(lr=0)
    with pytest.raises(InvalidArgumentError):
        rg.TrainConfig(patience=0)


# ------------------------------------------------------------------- loss

def test_l2_loss_examples():
    t = np.random.default_rng(0).normal(size=(4, 45))
    assert rg.l2_loss(t, t) == 0
    assert rg.l2_loss(t + 1, t) == pytest.approx(1.0)
    d = np.random.default_rng(1).normal(size=(4, 45))
    assert rg.l2_loss(t + 2 * d, t) == pytest.approx(4 * rg.l2_loss(t + d, t))
    with pytest.raises(InvalidArgumentError):
        rg.l2_loss(t, t[:2])


@pytest.mark.parametrize("spec", [rg.ModelSpec(), rg.ModelSpec("mlp", (7, 5))])
def test_gradients_match_finite_differences(spec):
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(10):
        m = rg.init_model(rg.ModelSpec(spec.kind, spec.hidden, seed=trial), 2)
        for p in m.params:
            p += 0.1 * rng.normal(size=p.shape)
        x = rng.normal(size=(6, 6))
        y = rng.normal(size=(6, 45))
        _, g = rg.loss_and_grads(m, x, y)
        for ga, gn in zip(g, numerical_grads(m, x, y)):
            worst = max(worst, np.abs(ga - gn).max() / max(np.abs(gn).max(), 1e-8))
    assert worst < 1e-4


def test_dropout_gradient_uses_same_mask():
    m = rg.init_model(rg.ModelSpec("mlp", (8,), dropout=0.3), 2)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(4, 6)), rng.normal(size=(4, 45))
    l1, g1 = rg.loss_and_grads(m, x, y, train=True, rng=np.random.default_rng(5))
    _, cache = rg._forward_cache(m, x.reshape(-1, 6), True, np.random.default_rng(5))
    keep = cache[0][1][1]
    # with the mask frozen the network is a fixed piecewise-linear map: check one weight
    W0 = m.params[0]
    h = 1e-6
    W0[0, 0] += h
    out_p, _ = rg._forward_cache(m, x, True, np.random.default_rng(5))
    W0[0, 0] -= 2 * h
    out_m, _ = rg._forward_cache(m, x, True, np.random.default_rng(5))
    W0[0, 0] += h
    num = (rg.l2_loss(out_p, y) - rg.l2_loss(out_m, y)) / (2 * h)
    assert keep is not None
    assert g1[0][0, 0] == pytest.approx(num, rel=1e-5, abs=1e-9)


# ------------------------------------------------------------------- Adam

def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    st_ = rg.AdamState([np.array([0.5, 0.5])], [np.array([1.0, 1.0])], t=3)
    before = p[0].copy()
    rg.adam_step(p, st_, [np.zeros(2)], 0.1)
    assert st_.t == 4
    assert np.allclose(st_.m[0], 0.45) and np.allclose(st_.v[0], 0.999)
    # moments are non-zero so parameters still move, but a fresh state stays put
    q = [before.copy()]
    fresh = rg.AdamState.zeros_like(q)
    rg.adam_step(q, fresh, [np.zeros(2)], 0.1)
    assert np.array_equal(q[0], before)


def test_adam_first_step_closed_form():
    p = [np.array([0.0, 0.0, 0.0])]
    g = np.array([3.0, -0.01, 2e-3])
    rg.adam_step(p, rg.AdamState.zeros_like(p), [g], 1e-3)
    expect = -1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p[0], expect, rtol=1e-12, atol=0)


def test_adam_two_steps_match_recurrence():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 4))
    g1, g2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    p = [p0.copy()]
    s = rg.AdamState.zeros_like(p)
    rg.adam_step(p, s, [g1], 0.01)
    rg.adam_step(p, s, [g1], 0.01)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    m = v = 0.0
    q = p0.copy()
    for t, g in ((1, g1), (2, g1)):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        q = q - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert np.allclose(p[0], q, atol=1e-12, rtol=0)
    with pytest.raises(InvalidArgumentError):
        rg.adam_step(p, s, [g2[:2]], 0.01)


# ---------------------------------------------------------------- patches

def test_patches_single_voxel_mask():
    mask = np.zeros((10, 10, 10), bool)
    mask[7, 2, 5] = True
    ds = make_dataset(dims=(10, 10, 10), mask=mask)
    for o in rg.sample_patches(ds, 50, size=4, seed=1):
        assert all(o[i] <= c < o[i] + 4 for i, c in enumerate((7, 2, 5)))


def test_patches_deterministic_and_empty():
    ds = make_dataset()
    assert rg.sample_patches(ds, 20, seed=3) == rg.sample_patches(ds, 20, seed=3)
    assert rg.sample_patches(ds, 20, seed=3) != rg.sample_patches(ds, 20, seed=4)
    empty = make_dataset(mask=np.zeros((6, 6, 4), bool))
    with pytest.raises(EmptyDatasetError):
        rg.sample_patches(empty, 5)


def test_patches_uniform_frequency():
    ds = make_dataset(dims=(5, 5, 4))
    origins = rg.sample_patches(ds, 1000, size=4, seed=0)
    n_pos = 2 * 2 * 1
    counts = np.zeros(n_pos)
    for o in origins:
        counts[o[0] * 2 + o[1]] += 1
    p = 1 / n_pos
    sigma = np.sqrt(1000 * p * (1 - p))
    assert np.all(np.abs(counts - 1000 * p) < 3 * sigma)


def test_patch_clamped_when_volume_small():
    ds = make_dataset(dims=(3, 3, 2))
    assert rg.sample_patches(ds, 5, size=16) == [(0, 0, 0)] * 5


def test_box_sums_brute_force():
    rng = np.random.default_rng(0)
    mask = rng.random((6, 5, 4)) < 0.2
    got = rg._box_sums(mask, (3, 2, 2))
    for o in np.ndindex(got.shape):
        assert got[o] == mask[o[0]:o[0] + 3, o[1]:o[1] + 2, o[2]:o[2] + 2].sum()


# ------------------------------------------------------------------ train

def test_realizable_linear_target_converges():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(45, 15)) * 0.3
    b = rng.normal(size=45) * 0.1
    tr = [make_dataset(s, W=W, b=b) for s in (1, 2)]
    va = [make_dataset(3, W=W, b=b)]
    cfg = rg.TrainConfig(lr=1e-2, patches_per_subject=16, patch_size=4, max_epochs=200,
                         patience=10)
    model, hist = rg.train(tr, va, rg.ModelSpec(), cfg)
    assert min(hist.val_loss) < 1e-6
    assert rg.evaluate(model, va) == pytest.approx(min(hist.val_loss))


def test_patience_one_stops_after_one_bad_epoch():
    tr, va = [make_dataset(1)], [make_dataset(2)]
    cfg = rg.TrainConfig(patches_per_subject=2, patch_size=4, max_epochs=50, patience=1)
    model, hist = rg.train(tr, va, rg.ModelSpec(), cfg, val_loss_fn=lambda m, e: float(e))
    assert len(hist.val_loss) == 2 and hist.stopped_early and hist.best_epoch == 0
    assert model.epoch == 1


def test_training_deterministic():
    tr, va = [make_dataset(1, noise=0.1)], [make_dataset(2, noise=0.1)]
    cfg = rg.TrainConfig(lr=1e-3, patches_per_subject=4, patch_size=4, max_epochs=5)
    spec = rg.ModelSpec("mlp", (8,), dropout=0.1, seed=3)
    m1, h1 = rg.train(tr, va, spec, cfg)
    m2, h2 = rg.train(tr, va, spec, cfg)
    assert h1.to_dict() == h2.to_dict()
    assert rg.model_to_bytes(m1) == rg.model_to_bytes(m2)


def test_epoch_batch_mode_runs():
    tr, va = [make_dataset(1)], [make_dataset(2)]
    cfg = rg.TrainConfig(lr=1e-2, patches_per_subject=8, patch_size=4, max_epochs=3,
                         batch_mode="epoch")
    _, hist = rg.train(tr, va, rg.ModelSpec(), cfg)
    assert len(hist.train_loss) == 3


def test_divergence_aborts_with_history():
    tr, va = [make_dataset(1)], [make_dataset(2)]
    tr[0].inputs[0, 0, 0, 0] = np.inf
    cfg = rg.TrainConfig(patches_per_subject=64, patch_size=4, max_epochs=3)
    with pytest.raises(AbortedTrainingError) as err:
        rg.train(tr, va, rg.ModelSpec(), cfg)
    assert "train_loss" in err.value.history


def test_train_needs_data():
    with pytest.raises(EmptyDatasetError):
        rg.train([], [make_dataset()], rg.ModelSpec(), rg.TrainConfig())


# ---------------------------------------------------------------- predict

def test_predict_small_volume_single_window():
    ds = make_dataset(dims=(3, 3, 2))
    m = rg.init_model(rg.ModelSpec(), 4)
    assert rg._tile_origins(3, 16) == [0]
    out = rg.predict_volume(m, ds.inputs)
    assert np.allclose(out, rg.forward(m, ds.inputs))


def test_predict_voxelwise_equals_direct_with_overlap():
    ds = make_dataset(dims=(7, 5, 3))
    m = rg.init_model(rg.ModelSpec("mlp", (6,)), 4)
    mask = np.random.default_rng(0).random((7, 5, 3)) < 0.6
    out = rg.predict_volume(m, ds.inputs, mask, window=4)
    assert np.allclose(out[mask], rg.forward(m, ds.inputs[mask]), atol=1e-14)
    assert np.all(out[~mask] == 0)


def test_predict_constant_model_exact():
    m = rg.init_model(rg.ModelSpec(), 4)
    m.params[0][:] = 0
    m.params[1][:] = 0.25
    out = rg.predict_volume(m, np.ones((9, 9, 9, 15)), window=4)
    assert np.all(out == 0.25)


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    m = rg.init_model(rg.ModelSpec("mlp", (5, 3), dropout=0.1, seed=4), 6)
    m.epoch = 7
    path = tmp_path / "m.bin"
    rg.save_model(path, m)
    back = rg.load_model(path)
    assert back.spec == m.spec and back.in_order == 6 and back.epoch == 7
    for a, b in zip(m.params, back.params):
        assert np.array_equal(a, b)


@given(st.integers(0, 2**32 - 1))
def test_checkpoint_corruption_is_typed(seed):
    rng = np.random.default_rng(seed)
    buf = bytearray(rg.model_to_bytes(rg.init_model(rg.ModelSpec("mlp", (4,)), 2)))
    op = rng.integers(0, 3)
    if op == 0:
        buf = buf[: int(rng.integers(0, len(buf)))]
    elif op == 1:
        for _ in range(int(rng.integers(1, 8))):
            buf[int(rng.integers(0, min(len(buf), 200)))] = int(rng.integers(0, 256))
    else:
        buf[8:16] = int(rng.integers(0, 2**40)).to_bytes(8, "little")
    try:
        rg.model_from_bytes(bytes(buf))
    except (VolumeFormatError, InvalidArgumentError):
        pass
