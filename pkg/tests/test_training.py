import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ficots.data import (
    ConfigError,
    SplitSpec,
    TimeSeriesFrame,
    fit_scaler,
    make_windows,
    prepare,
    synthetic_sinusoids,
)
from ficots.model import FiCoTSModel, ModelConfig
from ficots.numerics import Parameter, Tensor
from ficots.textgen import StubEncoder, TextSource
from ficots.training import History, TrainConfig, adam_step, evaluate, mae, mse, mse_loss, train


def toy_setup(n_vars=1, length=500, T_in=32, M=8, **model_kw):
    frame = synthetic_sinusoids(length, n_vars, seed=7)
    splits = prepare(frame, SplitSpec(), T_in, M)
    cfg = ModelConfig(T_in=T_in, M=M, N=n_vars, patch_len=8, stride=4, d_model=8, n_heads=2, **model_kw)
    source = TextSource("synthetic", T_in, M, StubEncoder(8))
    return splits, cfg, source


def test_mse_and_mae_examples():
    p, t = np.array([[1.0], [2.0]]), np.array([[1.0], [3.0]])
    assert mse(p, t) == 0.5 and mae(p, t) == 0.5
    assert mse(t, t) == 0.0 and mae(t, t) == 0.0
    assert mae(np.array([[-1.0]]), np.array([[1.0]])) == 2.0
    with pytest.raises(ValueError):
        mse(np.zeros((2, 1)), np.zeros((1, 2)))


def test_mse_loss_gradient():
    pred = Tensor(np.array([[2.0]]), requires_grad=True)
    loss = mse_loss(pred, np.array([[0.0]]))
    loss.backward()
    assert loss.item() == 4.0
    np.testing.assert_allclose(pred.grad, [[4.0]])


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_metrics_match_two_pass(data):
    shape = data.draw(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4)))
    el = st.floats(-1e3, 1e3)
    p = data.draw(arrays(np.float64, shape, elements=el))
    t = data.draw(arrays(np.float64, shape, elements=el))
    ref_mse, ref_mae = oracles.two_pass_metrics(p.tolist(), t.tolist())
    assert abs(mse(p, t) - ref_mse) <= 1e-12 * max(1.0, ref_mse)
    assert abs(mae(p, t) - ref_mae) <= 1e-12 * max(1.0, ref_mae)
    assert mse(p, t) >= 0 and mae(p, t) >= 0


def test_adam_first_step_is_about_lr():
    p = Parameter("w", np.array([0.3, -2.0]))
    p.grad = np.array([5.0, -0.01])
    adam_step([p], TrainConfig(), 1)
    np.testing.assert_allclose(np.abs(p.values - [0.3, -2.0]), 1e-3, rtol=1e-6)


def test_adam_zero_gradient_is_a_no_op():
    p = Parameter("w", np.array([1.0, 2.0]))
    for t in range(1, 4):
        p.grad = np.zeros(2)
        adam_step([p], TrainConfig(), t)
    np.testing.assert_array_equal(p.values, [1.0, 2.0])


def test_adam_two_steps_on_square():
    p = Parameter("theta", np.array([1.0]))
    for t in (1, 2):
        p.grad = 2.0 * p.values
        adam_step([p], TrainConfig(), t)
    assert abs(p.values[0] - oracles.adam_scalar(1.0, lambda th: 2.0 * th, 2)) < 1e-12


def test_adam_step_counter_starts_at_one():
    with pytest.raises(ValueError):
        adam_step([], TrainConfig(), 0)


def test_train_config_validation():
    for bad in (dict(batch_size=0), dict(patience=0), dict(learning_rate=float("nan"))):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_training_reduces_loss():
    splits, cfg, source = toy_setup()
    _, hist = train(FiCoTSModel(cfg), splits.train, splits.val, TrainConfig(max_epochs=20, patience=20), source.embeddings)
    assert hist.epochs[-1].train_loss < hist.epochs[0].train_loss


def test_patience_one_with_frozen_model_stops_after_two_epochs():
    splits, cfg, source = toy_setup()
    _, hist = train(
        FiCoTSModel(cfg), splits.train, splits.val, TrainConfig(learning_rate=0.0, patience=1), source.embeddings
    )
    assert len(hist.epochs) == 2 and hist.stopped_early and hist.best_epoch == 1


def test_best_epoch_parameters_are_restored():
    splits, cfg, source = toy_setup()
    model, hist = train(FiCoTSModel(cfg), splits.train, splits.val, TrainConfig(max_epochs=4), source.embeddings)
    best = next(r for r in hist.epochs if r.epoch == hist.best_epoch)
    assert evaluate(model, splits.val, source.embeddings).mse == best.val_mse


def test_training_is_deterministic(tmp_path):
    splits, cfg, source = toy_setup()
    runs = []
    for k in range(2):
        model, hist = train(FiCoTSModel(cfg), splits.train, splits.val, TrainConfig(max_epochs=3), source.embeddings)
        hist.write(tmp_path / f"h{k}.txt")
        runs.append(model.state_dict())
    assert (tmp_path / "h0.txt").read_bytes() == (tmp_path / "h1.txt").read_bytes()
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])
    back = History.read(tmp_path / "h0.txt")
    assert back.lines() == (tmp_path / "h0.txt").read_text().splitlines()


def test_empty_split_rejected():
    splits, cfg, source = toy_setup()
    with pytest.raises(ConfigError):
        train(FiCoTSModel(cfg), [], splits.val, TrainConfig(), source.embeddings)


def test_zero_predictor_on_unit_variance_targets():
    rng = np.random.default_rng(21)
    values = rng.normal(4.0, 3.0, size=(4000, 2))
    frame = TimeSeriesFrame(tuple(str(i) for i in range(4000)), values, ("a", "b"))
    scaler = fit_scaler(frame, range(0, 4000))
    windows = make_windows(frame, 16, 4, (0, 4000), scaler)[::5]
    cfg = ModelConfig(T_in=16, M=4, N=2, patch_len=8, stride=4, d_model=4, n_heads=2)
    model = FiCoTSModel(cfg)
    for p in model.parameters():
        p.values = np.zeros_like(p.values)
    source = TextSource("synthetic", 16, 4, StubEncoder(4))
    m = evaluate(model, windows, source.embeddings)
    assert m.mse == pytest.approx(1.0, abs=0.1)
    assert m.n_windows == len(windows)


def test_raw_space_metrics_use_inverse_transform():
    splits, cfg, source = toy_setup()
    model = FiCoTSModel(cfg)
    norm, pred, truth = evaluate(model, splits.test, source.embeddings, return_predictions=True)
    raw = evaluate(model, splits.test, source.embeddings, splits.scaler, raw_space=True)
    expect = mse(splits.scaler.inverse_transform(pred), splits.scaler.inverse_transform(truth))
    assert raw.space == "raw" and norm.space == "normalized"
    assert raw.mse == pytest.approx(expect, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_metric_bounds(data):
    shape = data.draw(st.tuples(st.integers(1, 5), st.integers(1, 5)))
    p = data.draw(arrays(np.float64, shape, elements=st.floats(-1e3, 1e3)))
    t = data.draw(arrays(np.float64, shape, elements=st.floats(-1e3, 1e3)))
    worst = np.max(np.abs(p - t))
    assert mae(p, t) <= worst * (1 + 1e-12)
    assert mse(p, t) <= worst**2 * (1 + 1e-12)
