"""End-to-end runs: data -> prompts -> training, plus checkpoint I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CheckpointBlob, FormatError, decode_checkpoint, encode_checkpoint, read_bytes
from .config import ExperimentConfig, config_from_text
from .data import ConfigError, DatasetSplits, ScalerStats, load_csv, prepare
from .model import FiCoTSModel
from .textgen import ImportedEncoder, StubEncoder, TextSource, import_embeddings
from .training import History, Metrics, evaluate, train

CHECKPOINT_NAME = "checkpoint.fcck"
HISTORY_NAME = "history.txt"
MANIFEST_NAME = "manifest.toml"
SCALER_PREFIX = "scaler."


@dataclass
class Checkpoint:
    config: ExperimentConfig
    model: FiCoTSModel
    scaler: ScalerStats
    best_epoch: int


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    arrays = dict(ckpt.model.state_dict())
    arrays[SCALER_PREFIX + "mean"] = ckpt.scaler.mean
    arrays[SCALER_PREFIX + "std"] = ckpt.scaler.std
    blob = CheckpointBlob(ckpt.config.to_toml(), ckpt.best_epoch, ckpt.config.seed, arrays)
    Path(path).write_bytes(encode_checkpoint(blob))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = decode_checkpoint(read_bytes(path), what=str(path))
    cfg = config_from_text(blob.config_text)
    try:
        mean = blob.arrays.pop(SCALER_PREFIX + "mean")
        std = blob.arrays.pop(SCALER_PREFIX + "std")
    except KeyError:
        raise FormatError(f"{path}: checkpoint lacks scaler statistics") from None
    model = FiCoTSModel(cfg.model_config(mean.shape[0]))
    model.load_state_dict(blob.arrays)
    return Checkpoint(cfg, model, ScalerStats(mean, std), blob.best_epoch)


def text_source(cfg: ExperimentConfig) -> TextSource:
    encoder = StubEncoder(cfg.d_model, cfg.seed)
    if cfg.text_mode == "import":
        table = {k: v.tokens for k, v in import_embeddings(cfg.embeddings_path, cfg.d_model).items()}
        encoder = ImportedEncoder(table, encoder)
    return TextSource(cfg.dataset_key, cfg.input_len, cfg.horizon, encoder, static=cfg.static_prompt)


def load_splits(cfg: ExperimentConfig, data_path: str | None = None, scaler: ScalerStats | None = None) -> DatasetSplits:
    frame = load_csv(data_path or cfg.data_path, cfg.has_date_column)
    if scaler is not None and frame.n_channels != scaler.mean.shape[0]:
        raise ConfigError(f"dataset has {frame.n_channels} variables, checkpoint expects {scaler.mean.shape[0]}")
    return prepare(frame, cfg.split_spec(), cfg.input_len, cfg.horizon, scaler)


def run_training(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[Checkpoint, History]:
    """Train and write checkpoint, history and manifest into ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    splits = load_splits(cfg)
    model = FiCoTSModel(cfg.model_config(splits.frame.n_channels))
    source = text_source(cfg)
    model, history = train(model, splits.train, splits.val, cfg.train_config(), source.embeddings)
    ckpt = Checkpoint(cfg, model, splits.scaler, history.best_epoch)
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST_NAME).write_text(cfg.to_toml(), encoding="utf-8")
    history.write(out / HISTORY_NAME)
    save_checkpoint(out / CHECKPOINT_NAME, ckpt)
    return ckpt, history


def run_evaluation(
    ckpt: Checkpoint, data_path: str | None = None, raw_space: bool | None = None
) -> tuple[Metrics, np.ndarray, np.ndarray, DatasetSplits]:
    cfg = ckpt.config
    splits = load_splits(cfg, data_path, ckpt.scaler)
    raw = cfg.raw_space if raw_space is None else raw_space
    metrics, pred, truth = evaluate(
        ckpt.model, splits.test, text_source(cfg).embeddings, splits.scaler, raw, return_predictions=True
    )
    return metrics, pred, truth, splits


def write_predictions(path: str | Path, windows, pred: np.ndarray, truth: np.ndarray, names) -> int:
    rows = 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start", "step", "variable", "pred", "truth"])
        for win, p, t in zip(windows, pred, truth):
            for step in range(p.shape[0]):
                for n, name in enumerate(names):
                    w.writerow([win.window_start, step, name, repr(float(p[step, n])), repr(float(t[step, n]))])
                    rows += 1
    return rows


def write_embeddings(path: str | Path, ckpt: Checkpoint, splits: DatasetSplits) -> None:
    """Patch embeddings before and after graph alignment for the first test window."""
    window = splits.test[0]
    trace: dict = {}
    ckpt.model.forward(window.x[None], [text_source(ckpt.config).embeddings(window)], trace=trace)
    d = ckpt.model.config.d_model
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "patch", "stage", *(f"dim_{k}" for k in range(d))])
        for stage in ("pre_align", "post_align"):
            block = trace[stage][0]  # N, P, d
            for n, name in enumerate(splits.frame.channel_names):
                for i in range(block.shape[1]):
                    w.writerow([name, i, stage, *(repr(float(v)) for v in block[n, i])])


def write_prompts(path: str | Path, ckpt: Checkpoint, splits: DatasetSplits) -> int:
    source = text_source(ckpt.config)
    lines = []
    for win in splits.test:
        for name, prompt in zip(splits.frame.channel_names, source.prompts(win)):
            lines.append(f"{win.window_start}\t{name}\t{prompt.full_text}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")
    return len(lines)
