"""Loss, Adam, early-stopped training and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import ConfigError, ScalerStats, WindowSample
from .model import FiCoTSModel
from .numerics import Parameter, Tensor

log = logging.getLogger(__name__)

TextFn = Callable[[WindowSample], list[np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    few_shot_fraction: float = 1.0

    def validate(self) -> None:
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not (0 < self.few_shot_fraction <= 1):
            raise ConfigError(f"few_shot_fraction must lie in (0, 1], got {self.few_shot_fraction}")


@dataclass(frozen=True)
class Metrics:
    mse: float
    mae: float
    n_windows: int
    space: str = "normalized"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_shapes(pred, truth) -> None:
    if tuple(pred.shape) != tuple(truth.shape):
        raise ValueError(f"prediction shape {tuple(pred.shape)} does not match target shape {tuple(truth.shape)}")


def mse_loss(pred: Tensor, truth) -> Tensor:
    """Mean of squared errors over every element."""
    truth = truth.values if isinstance(truth, Tensor) else np.asarray(truth, dtype=np.float64)
    _check_shapes(pred, truth)
    diff = pred - truth
    return nx.mean(diff * diff)


def mse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_shapes(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_shapes(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(params: Sequence[Parameter], config: TrainConfig, t: int) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``.

    Parameters without a gradient are left alone, moments included.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        if g is None:
            continue
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * g * g
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.values = p.values - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def stack_batch(windows: Sequence[WindowSample], text_fn: TextFn) -> tuple[np.ndarray, np.ndarray, list]:
    x = np.stack([w.x for w in windows])
    y = np.stack([w.y for w in windows])
    texts = [text_fn(w) for w in windows]
    return x, y, texts


def predict(model: FiCoTSModel, windows: Sequence[WindowSample], text_fn: TextFn, batch_size: int = 64) -> np.ndarray:
    """Stacked (n_windows, M, N) predictions."""
    outs = []
    for i in range(0, len(windows), batch_size):
        x, _, texts = stack_batch(windows[i : i + batch_size], text_fn)
        outs.append(model.forward(x, texts).values)
    return np.concatenate(outs) if outs else np.zeros((0, model.config.M, model.config.N))


def evaluate(
    model: FiCoTSModel,
    windows: Sequence[WindowSample],
    text_fn: TextFn,
    scaler: ScalerStats | None = None,
    raw_space: bool = False,
    batch_size: int = 64,
    return_predictions: bool = False,
):
    """MSE/MAE averaged uniformly over windows, horizon steps and variables.

    With ``raw_space`` both predictions and targets go through
    ``scaler.inverse_transform`` first.
    """
    if not windows:
        raise ConfigError("cannot evaluate on an empty window list")
    pred = predict(model, windows, text_fn, batch_size)
    truth = np.stack([w.y for w in windows])
    space = "normalized"
    if raw_space:
        if scaler is None:
            raise ConfigError("raw-space metrics need the fitted scaler")
        pred, truth = scaler.inverse_transform(pred), scaler.inverse_transform(truth)
        space = "raw"
    metrics = Metrics(mse(pred, truth), mae(pred, truth), len(windows), space)
    if return_predictions:
        return metrics, pred, truth
    return metrics


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    val_mae: float

    def line(self) -> str:
        return f"epoch={self.epoch} train_loss={self.train_loss!r} val_mse={self.val_mse!r} val_mae={self.val_mae!r}"


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_val_mse(self) -> float:
        return min(r.val_mse for r in self.epochs)

    def lines(self) -> list[str]:
        return [r.line() for r in self.epochs]

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(l + "\n" for l in self.lines()), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> History:
        hist = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            kv = dict(item.split("=", 1) for item in line.split())
            hist.epochs.append(
                EpochRecord(int(kv["epoch"]), float(kv["train_loss"]), float(kv["val_mse"]), float(kv["val_mae"]))
            )
        if hist.epochs:
            hist.best_epoch = min(hist.epochs, key=lambda r: r.val_mse).epoch
        return hist


def train(
    model: FiCoTSModel,
    train_windows: Sequence[WindowSample],
    val_windows: Sequence[WindowSample],
    config: TrainConfig,
    text_fn: TextFn,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[FiCoTSModel, History]:
    """Mini-batch Adam with early stopping on validation MSE.

    The model is left holding the parameters of the best validation epoch.
    Improvement means strictly lower validation MSE.
    """
    config.validate()
    if not train_windows or not val_windows:
        raise ConfigError(
            f"training needs non-empty splits (train={len(train_windows)}, val={len(val_windows)})"
        )
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    history = History()
    best_state = model.state_dict()
    best_val = math.inf
    stale = 0
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            batch = [train_windows[k] for k in order[i : i + config.batch_size]]
            x, y, texts = stack_batch(batch, text_fn)
            for p in params:
                p.zero_grad()
            loss = mse_loss(model.forward(x, texts), y)
            if not math.isfinite(loss.item()):
                raise nx.NumericError(f"training loss became non-finite at epoch {epoch}")
            loss.backward()
            step += 1
            adam_step(params, config, step)
            total += loss.item() * len(batch)
            count += len(batch)
        val = evaluate(model, val_windows, text_fn)
        rec = EpochRecord(epoch, total / count, val.mse, val.mae)
        history.epochs.append(rec)
        log.info(rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if val.mse < best_val:
            best_val = val.mse
            best_state = model.state_dict()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                break
    model.load_state_dict(best_state)
    for p in params:
        p.zero_grad()
    return model, history
