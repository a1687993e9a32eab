import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronoformer import blocks as B
from chronoformer import data as D
from chronoformer import tensor as T
from chronoformer import training as TR
from chronoformer.errors import ConfigError, ContractError, DivergenceError


def small_model(norm="post_ln", decoding="autoregressive", seed=0, d=16, **kw):
    cfg = B.ModelConfig(
        window=16, horizon=4, n_encoders=1, n_decoders=1,
        block=B.BlockConfig(d_model=d, heads=2, norm_placement=norm), decoding=decoding, **kw,
    )
    return B.Transformer(cfg, seed=seed)


def one_window():
    ts = D.gen_synthetic("sine", 64, period=16, sigma=0.1, seed=0)
    return D.make_windows(ts, 16, 4).batch([5])


# -- initialisation -------------------------------------------------------------


def test_xavier_support_and_variance():
    fan_in, fan_out = 30, 70
    a = math.sqrt(6 / (fan_in + fan_out))
    w = TR.xavier_init((100_000,), fan_in, fan_out, seed=1).values
    assert np.abs(w).max() <= a
    assert w.var() == pytest.approx(2 / (fan_in + fan_out), rel=0.05)


def test_xavier_deterministic():
    a = TR.xavier_init((3, 4), 4, 3, seed=5).values
    b = TR.xavier_init((3, 4), 4, 3, seed=5).values
    assert a.tobytes() == b.tobytes()


def test_xavier_rejects_zero_fan():
    with pytest.raises(ConfigError):
        TR.xavier_init((2,), 0, 3)


# -- schedule -------------------------------------------------------------------


def test_warmup_landmarks():
    s = TR.Schedule(0.01, 400)
    assert TR.warmup_lr(400, s) == 0.01
    assert TR.warmup_lr(200, s) == 0.005
    assert TR.warmup_lr(1600, s) == 0.005


def test_warmup_shape():
    s = TR.Schedule(1.0, 50)
    lrs = np.array([TR.warmup_lr(n, s) for n in range(1, 300)])
    assert (np.diff(lrs[:50]) > 0).all()
    assert (np.diff(lrs[49:]) < 0).all()


def test_warmup_step_zero_rejected():
    with pytest.raises(ContractError):
        TR.warmup_lr(0, TR.Schedule())


def test_no_warmup_is_constant():
    s = TR.Schedule(0.3, 0)
    assert {TR.warmup_lr(n, s) for n in (1, 10, 1000)} == {0.3}


# -- clipping -------------------------------------------------------------------


def test_clip_under_threshold_untouched():
    g = [np.array([0.3, 0.4])]
    assert TR.clip_grad_norm(g, 1.0) == 1.0
    np.testing.assert_array_equal(g[0], [0.3, 0.4])


def test_clip_three_four_five():
    g = [np.array([3.0, 4.0])]
    assert TR.clip_grad_norm(g, 1.0) == pytest.approx(0.2)
    np.testing.assert_allclose(g[0], [0.6, 0.8], rtol=0, atol=1e-15)
    assert TR.global_norm(g) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(1, 6), min_size=1, max_size=4),
    st.floats(1e-3, 10.0),
    st.integers(0, 2**31 - 1),
)
def test_clip_bounds_global_norm(shapes, max_norm, seed):
    rng = np.random.default_rng(seed)
    grads = [rng.standard_normal(n) * 10 for n in shapes]
    TR.clip_grad_norm(grads, max_norm)
    assert TR.global_norm(grads) <= max_norm + 1e-12


# -- Adam -----------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = TR.OptimState()
    for _ in range(3):
        p.grad = np.zeros(2)
        TR.adam_step({"p": p}, opt, 0.1)
    np.testing.assert_array_equal(p.values, [1.0, -2.0])
    assert opt.step == 3


def test_adam_moments_decay_under_zero_gradient():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = TR.OptimState()
    p.grad = np.array([1.0, 1.0])
    TR.adam_step({"p": p}, opt, 0.1)
    m, v = opt.m["p"].copy(), opt.v["p"].copy()
    for _ in range(5):
        p.grad = np.zeros(2)
        TR.adam_step({"p": p}, opt, 0.1)
    np.testing.assert_allclose(opt.m["p"], m * 0.9**5)
    np.testing.assert_allclose(opt.v["p"], v * 0.999**5)


def test_adam_constant_gradient_step_size():
    p = T.Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = TR.OptimState()
    lr = 1e-3
    for _ in range(200):
        before = p.values.copy()
        p.grad = np.array([2.5, -0.7])
        TR.adam_step({"p": p}, opt, lr)
    step = p.values - before
    np.testing.assert_allclose(step, [-lr, lr], rtol=1e-6)


def test_adam_missing_gradient():
    p = T.Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ContractError):
        TR.adam_step({"p": p}, TR.OptimState(), 0.1)


# -- train step -----------------------------------------------------------------


def test_zero_learning_rate_changes_nothing():
    model = small_model()
    before = model.state_dict()
    state = TR.TrainState(model, TR.Schedule(0.0, 0))
    batch = one_window()
    losses = [TR.train_step(state, batch) for _ in range(3)]
    assert losses[0] == losses[1] == losses[2]
    after = model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_train_log_rows():
    state = TR.TrainState(small_model(), TR.Schedule(1e-3, 10), clip=0.5)
    batch = one_window()
    for _ in range(3):
        TR.train_step(state, batch)
    assert [r.step for r in state.log] == [1, 2, 3]
    assert state.log[0].lr == pytest.approx(1e-4)
    for row in state.log:
        assert row.clip_scale <= 1.0
        assert row.grad_norm * row.clip_scale <= 0.5 + 1e-12 or row.clip_scale == 1.0
    import io

    buf = io.StringIO()
    TR.write_log(buf, state.log)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,lr,loss,grad_norm,clip_scale"
    assert len(lines) == 4 and lines[1].startswith("1,")


def test_nan_loss_is_divergence():
    model = small_model()
    state = TR.TrainState(model)
    bad = B.Batch(np.full((1, 16, 1), np.nan), np.zeros((1, 4, 1)))
    with pytest.raises(DivergenceError) as exc:
        TR.train_step(state, bad)
    assert exc.value.step == 1


@pytest.mark.parametrize("flip", [False, True])
def test_classification_training_fits_labels(flip):
    cfg = B.ModelConfig(
        window=8, horizon=1, n_encoders=1, n_decoders=0, head="classification", n_classes=2,
        pooling="dense_interp", block=B.BlockConfig(d_model=8, heads=2),
    )
    model = B.Transformer(cfg, seed=1)
    rng = np.random.default_rng(0)
    labels = np.array([0, 1] * 4)
    sign = np.where(labels == 1, 1.0, -1.0) * (-1 if flip else 1)
    inputs = rng.standard_normal((8, 8, 1)) * 0.1 + sign[:, None, None]
    batch = B.Batch(inputs, labels=labels)
    state = TR.TrainState(model, TR.Schedule(1e-2, 0))
    for _ in range(100):
        TR.train_step(state, batch)
    assert state.history[-1] < 0.01
    probs = model.forward(batch).values
    np.testing.assert_array_equal(probs.argmax(axis=1), labels)


def test_training_is_reproducible():
    def run():
        ts = D.gen_synthetic("sine", 200, period=16, sigma=0.1, seed=3)
        ds = D.make_windows(ts, 16, 4)
        state = TR.TrainState(small_model(d=8), TR.Schedule(1e-3, 5), seed=4)
        TR.train(state, ds, 6, batch_size=4)
        return state.history, state.model.state_dict()

    h1, p1 = run()
    h2, p2 = run()
    assert h1 == h2
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)


def test_batch_sampler_covers_epoch():
    s = TR.BatchSampler(10, 4, seed=0)
    seen = np.concatenate([s.next(), s.next()])
    assert len(set(seen.tolist())) == 8
    assert TR.BatchSampler(3, 16).batch_size == 3


# -- convergence smoke runs ---------------------------------------------------------


@pytest.mark.parametrize("norm,warmup,lr", [("post_ln", 50, 3e-3), ("pre_ln", 0, 1e-3)])
def test_single_window_memorization(norm, warmup, lr):
    state = TR.TrainState(small_model(norm), TR.Schedule(lr, warmup), seed=0)
    batch = one_window()
    for _ in range(500):
        if TR.train_step(state, batch) < 1e-3:
            break
    assert state.history[-1] < 1e-3


@pytest.mark.slow
def test_pre_ln_without_warmup_stays_finite():
    state = TR.TrainState(small_model("pre_ln", d=8), TR.Schedule(1e-2, 0), seed=0)
    batch = one_window()
    for _ in range(2000):
        TR.train_step(state, batch)
    assert np.isfinite(state.history).all()


# -- forecasting ----------------------------------------------------------------------


def test_one_step_autoregressive_matches_one_shot():
    ar = small_model(decoding="autoregressive", seed=3)
    os_ = small_model(decoding="one_shot", seed=3)
    batch = one_window()
    np.testing.assert_array_equal(
        TR.autoregressive_forecast(ar, batch, 1), TR.autoregressive_forecast(os_, batch, 1)
    )


@pytest.mark.parametrize("H", [1, 16, 100])
def test_forecast_length(H):
    for decoding in ("autoregressive", "one_shot"):
        model = small_model(decoding=decoding, d=8)
        out = TR.autoregressive_forecast(model, one_window(), H)
        assert out.shape == (1, H, 1)


def test_autoregressive_feeds_back_predictions():
    model = small_model(decoding="autoregressive", seed=4)
    batch = one_window()
    out = TR.autoregressive_forecast(model, batch, 3)
    assert model.forward_passes == 3
    tokens = np.concatenate([batch.inputs[:, -1:], out[:, :2]], axis=1)
    # sequence lengths differ between the two routes, so summation order may too
    np.testing.assert_allclose(model.forward(batch, tokens=tokens).values, out, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(TR.autoregressive_forecast(model, batch, 3), out)


def test_one_shot_forecast_single_pass():
    model = small_model(decoding="one_shot")
    TR.autoregressive_forecast(model, one_window(), 7)
    assert model.forward_passes == 1


def test_forecast_horizon_must_be_positive():
    with pytest.raises(ContractError):
        TR.autoregressive_forecast(small_model(), one_window(), 0)
