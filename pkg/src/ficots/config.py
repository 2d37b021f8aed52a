"""Experiment configuration files.

Grammar: flat TOML. One ``key = value`` per line, ``#`` comments, values
are strings, integers, floats or booleans. Tables are not allowed and
unknown keys are rejected. ``preset = "<name>"`` first applies one of the
shipped fragments under ``presets/`` (keys given explicitly in the file win).
Relative paths resolve against the directory holding the config file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import ConfigError, SplitSpec
from .model import ModelConfig
from .training import TrainConfig

PATH_KEYS = ("data_path", "embeddings_path", "output_dir")
TEXT_MODES = ("stub", "import")


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    data_path: str = ""
    dataset_key: str = "ETTh1"
    has_date_column: bool = True
    split_preset: str = ""
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    few_shot_fraction: float = 1.0
    # model
    input_len: int = 512
    horizon: int = 96
    patch_len: int = 16
    stride: int = 8
    d_model: int = 64
    n_heads: int = 4
    alpha: float = 0.5
    token_level: bool = True
    feature_level: bool = True
    decision_level: bool = True
    branch1: bool = True
    branch2: bool = True
    use_text: bool = True
    graph_kind: str = "sage"
    intra_modality_edges: bool = False
    homogeneous: bool = False
    instance_norm: bool = False
    # training
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # text
    text_mode: str = "stub"
    embeddings_path: str = ""
    static_prompt: bool = False
    # output
    output_dir: str = "runs/default"
    raw_space: bool = False
    preset: str = ""

    # -- derived views ---------------------------------------------------

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            self.train_fraction, self.val_fraction, self.test_fraction, self.few_shot_fraction, self.split_preset
        )

    def model_config(self, n_vars: int) -> ModelConfig:
        return ModelConfig(
            T_in=self.input_len, M=self.horizon, N=n_vars, patch_len=self.patch_len, stride=self.stride,
            d_model=self.d_model, n_heads=self.n_heads, alpha=self.alpha, token_level=self.token_level,
            feature_level=self.feature_level, decision_level=self.decision_level, branch1=self.branch1,
            branch2=self.branch2, use_text=self.use_text, graph_kind=self.graph_kind,
            intra_modality_edges=self.intra_modality_edges, homogeneous=self.homogeneous,
            instance_norm=self.instance_norm, seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps, seed=self.seed,
            few_shot_fraction=self.few_shot_fraction,
        )

    def validate(self, check_paths: bool = True) -> None:
        self.split_spec().validate()
        self.model_config(1).validate()
        self.train_config().validate()
        if self.text_mode not in TEXT_MODES:
            raise ConfigError(f"text_mode must be one of {TEXT_MODES}, got {self.text_mode!r}")
        if self.text_mode == "import" and not self.embeddings_path:
            raise ConfigError("text_mode 'import' needs embeddings_path")
        if check_paths:
            if not self.data_path or not Path(self.data_path).is_file():
                raise ConfigError(f"data_path does not exist: {self.data_path!r}")
            if self.text_mode == "import" and not Path(self.embeddings_path).is_file():
                raise ConfigError(f"embeddings_path does not exist: {self.embeddings_path!r}")

    # -- serialization ---------------------------------------------------

    def to_toml(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_toml_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    # JSON string escapes are valid TOML basic-string escapes, except DEL is left raw
    return json.dumps(v, ensure_ascii=False).replace("\x7f", "\\u007f")


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    if isinstance(value, dict) or isinstance(value, list):
        raise ConfigError(f"key {key!r}: nested values are not allowed")
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"key {key!r}: expected true/false, got {value!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {key!r}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"key {key!r}: expected a string, got {value!r}")
    return value


def parse_flat(text: str, source: str = "<config>") -> dict:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out = {}
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def preset_names() -> list[str]:
    root = resources.files("ficots") / "presets"
    return sorted(p.name[: -len(".toml")] for p in root.iterdir() if p.name.endswith(".toml"))


def normalize_preset(name: str) -> str:
    """'w/o token-level' -> 'wo-token-level'."""
    return name.strip().lower().replace("w/o", "wo").replace(" ", "-").replace("_", "-").replace("--", "-")


def load_preset(name: str) -> dict:
    key = normalize_preset(name)
    if key not in preset_names():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    text = (resources.files("ficots") / "presets" / f"{key}.toml").read_text(encoding="utf-8")
    values = parse_flat(text, f"preset {key}")
    if "preset" in values:
        raise ConfigError(f"preset {key} may not name another preset")
    return values


def config_from_mapping(values: dict, base_dir: Path | None = None) -> ExperimentConfig:
    merged = {}
    if values.get("preset"):
        merged.update(load_preset(values["preset"]))
    merged.update(values)
    if base_dir is not None:
        # the default output directory is relative too
        merged.setdefault("output_dir", ExperimentConfig.output_dir)
        for key in PATH_KEYS:
            if merged.get(key):
                p = Path(merged[key])
                if not p.is_absolute():
                    merged[key] = str((base_dir / p).resolve())
    return ExperimentConfig(**merged)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_mapping(parse_flat(text, str(path)), path.resolve().parent)


def config_from_text(text: str) -> ExperimentConfig:
    """Inverse of ``ExperimentConfig.to_toml`` (paths are taken as written)."""
    return config_from_mapping(parse_flat(text, "<embedded config>"))


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
