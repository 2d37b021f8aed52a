"""``ficots`` command line: train, eval, gradcheck, dump.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Failures print one JSON line on stderr: {"error": kind, "code": n, "reason": text}.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from .codec import FormatError
from .config import ExperimentConfig, load_config, with_overrides
from .data import ConfigError, DataError, make_windows, synthetic_sinusoids
from .experiment import (
    load_checkpoint,
    run_evaluation,
    run_training,
    write_embeddings,
    write_predictions,
    write_prompts,
)
from .model import FiCoTSModel
from .numerics import NumericError, finite_diff_check
from .textgen import EncodingError
from .training import mse_loss

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TOY = ExperimentConfig(
    dataset_key="synthetic", has_date_column=False, input_len=32, horizon=4, patch_len=8, stride=4,
    d_model=8, n_heads=2, seed=0,
)
TOY_VARS = 2
GRADCHECK_TOL = 1e-4


class _Fail(Exception):
    def __init__(self, code: int, kind: str, reason: str):
        super().__init__(reason)
        self.code, self.kind, self.reason = code, kind, reason


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_dir(args) -> Path:
    # eval and dump write next to the checkpoint unless told otherwise
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    cfg = with_overrides(
        cfg,
        seed=args.seed,
        few_shot_fraction=args.few_shot,
        raw_space=True if getattr(args, "raw_space", False) else None,
    )
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    cfg.validate()
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    ckpt, history = run_training(cfg, out)
    if not args.no_plots:
        from .report import plot_history

        plot_history(history, out / "learning_curve.png")
    _emit(
        {
            "best_epoch": history.best_epoch,
            "best_val_mse": history.best_val_mse,
            "epochs": len(history.epochs),
            "output_dir": str(out),
            "seconds": round(time.perf_counter() - t0, 3),
        }
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = _checkpoint_dir(args)
    metrics, pred, truth, splits = run_evaluation(ckpt, args.data, True if args.raw_space else None)
    write_predictions(out / "predictions.csv", splits.test, pred, truth, splits.frame.channel_names)
    if not args.no_plots:
        from .report import plot_horizon_error

        plot_horizon_error(pred, truth, splits.frame.channel_names, out / "horizon_error.png")
    _emit(metrics.to_dict())
    return EXIT_OK


def gradcheck_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else TOY
    return with_overrides(cfg, seed=args.seed)


def cmd_gradcheck(args, corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None) -> int:
    """Finite-difference check of the full training loss on a two-window toy batch.

    ``corrupt`` rewrites analytic gradients before comparison (negative control).
    """
    cfg = gradcheck_config(args)
    n_vars = TOY_VARS
    mcfg = cfg.model_config(n_vars)
    mcfg.validate()
    from .experiment import text_source

    frame = synthetic_sinusoids(cfg.input_len + cfg.horizon + 1, n_vars, seed=cfg.seed)
    windows = make_windows(frame, cfg.input_len, cfg.horizon, (0, frame.length))
    source = text_source(replace(cfg, text_mode="stub"))
    x = np.stack([w.x for w in windows])
    y = np.stack([w.y for w in windows])
    texts = [source.embeddings(w) for w in windows]
    model = FiCoTSModel(mcfg)
    t0 = time.perf_counter()
    report = finite_diff_check(
        lambda: mse_loss(model.forward(x, texts), y), model.parameters(), h=1e-5, tol=GRADCHECK_TOL, corrupt=corrupt
    )
    elapsed = time.perf_counter() - t0
    for name, err in report.per_parameter.items():
        print(f"param {name} max_rel_error={err:.3e}")
    _emit(
        {
            "max_rel_error": report.max_rel_error,
            "worst_parameter": report.worst_parameter,
            "worst_index": list(report.worst_index),
            "n_checked": report.n_checked,
            "tol": report.tol,
            "passed": report.passed,
            "seconds": round(elapsed, 3),
        }
    )
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_dump(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = _checkpoint_dir(args)
    from .experiment import load_splits

    splits = load_splits(ckpt.config, args.data, ckpt.scaler)
    if args.what == "prompts":
        n = write_prompts(out / "prompts.txt", ckpt, splits)
        _emit({"what": "prompts", "lines": n, "path": str(out / "prompts.txt")})
    else:
        write_embeddings(out / "embeddings.csv", ckpt, splits)
        _emit({"what": "embeddings", "path": str(out / "embeddings.csv")})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ficots", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False, checkpoint=False):
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
            p.add_argument("--data", help="dataset CSV (defaults to the path recorded in the checkpoint)")
        else:
            p.add_argument("--config", required=config_required, help="flat TOML experiment config")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--few-shot", type=float, dest="few_shot", help="train on this chronological fraction")

    p = sub.add_parser("train", help="train a model and write checkpoint, history and manifest")
    common(p, config_required=True)
    p.add_argument("--raw-space", action="store_true", help="record raw-space metrics in the manifest")
    p.add_argument("--no-plots", action="store_true", help="skip the learning-curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, checkpoint=True)
    p.add_argument("--raw-space", action="store_true", help="report metrics in original units")
    p.add_argument("--no-plots", action="store_true", help="skip the horizon-error figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare reverse-mode gradients with finite differences")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump", help="write rendered prompts or pre/post-alignment embeddings")
    p.add_argument("what", choices=("prompts", "embeddings"))
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        failure = _Fail(EXIT_CONFIG, "config", str(exc))
    except (DataError, FormatError, EncodingError) as exc:
        failure = _Fail(EXIT_DATA, "data", str(exc))
    except NumericError as exc:
        failure = _Fail(EXIT_NUMERIC, "numeric", str(exc))
    print(json.dumps({"error": failure.kind, "code": failure.code, "reason": failure.reason}), file=sys.stderr)
    return failure.code


if __name__ == "__main__":
    sys.exit(main())
