"""Per-variable prompts and the text encoders that turn them into token matrices."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .codec import FormatError, decode_embeddings, encode_embeddings, read_bytes, write_bytes
from .data import ConfigError, WindowSample

INSTRUCTION = "Forecast the next {M} steps using the past {T_in} steps."
STATISTICS = (
    "Input statistics: min value = {min}, max value = {max}, "
    "median value = {median}, the overall trend is {trend}."
)


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class WindowStats:
    min: float
    max: float
    median: float
    trend: str


@dataclass(frozen=True)
class Prompt:
    dataset_description: str
    task_instruction: str
    input_statistics: str

    @property
    def full_text(self) -> str:
        return " ".join(p for p in (self.dataset_description, self.task_instruction, self.input_statistics) if p)


@dataclass(frozen=True)
class TextEmbedding:
    tokens: np.ndarray  # N_p x d_m
    source: str  # "stub" or "imported"

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@lru_cache(maxsize=1)
def _description_table() -> dict:
    path = resources.files("ficots") / "descriptions" / "datasets.json"
    return json.loads(path.read_text(encoding="utf-8"))


def dataset_description(key: str) -> str:
    table = _description_table()
    key = table["aliases"].get(key, key)
    try:
        return table["descriptions"][key]
    except KeyError:
        known = sorted(set(table["descriptions"]) | set(table["aliases"]))
        raise ConfigError(f"unknown dataset key {key!r}; known: {', '.join(known)}") from None


def compute_stats(x: np.ndarray) -> WindowStats:
    """min/max/median and least-squares trend sign of one raw channel."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("trend needs at least two points")
    t = np.arange(x.size, dtype=np.float64)
    slope = np.sum((t - t.mean()) * (x - x.mean()))
    trend = "upward" if slope > 0 else "downward" if slope < 0 else "flat"
    return WindowStats(float(x.min()), float(x.max()), float(np.median(x)), trend)


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def build_prompt(dataset_key: str, T_in: int, M: int, stats: WindowStats | None) -> Prompt:
    """Render the three prompt parts; ``stats=None`` gives the static prompt."""
    desc = dataset_description(dataset_key)
    instruction = INSTRUCTION.format(M=M, T_in=T_in)
    statistics = ""
    if stats is not None:
        statistics = STATISTICS.format(
            min=_fmt(stats.min), max=_fmt(stats.max), median=_fmt(stats.median), trend=stats.trend
        )
    return Prompt(desc, instruction, statistics)


def prompt_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class Encoder(Protocol):
    d_m: int

    def encode(self, text: str) -> TextEmbedding: ...


def token_vector(token: str, d_m: int, seed: int) -> np.ndarray:
    """Unit-norm vector keyed on (seed, token) through a Philox stream."""
    key = int.from_bytes(
        hashlib.blake2b(f"{seed}\x00{token}".encode("utf-8"), digest_size=16).digest(), "little"
    )
    v = np.random.Generator(np.random.Philox(key=key)).standard_normal(d_m)
    return v / np.linalg.norm(v)


def stub_encode(text: str, d_m: int, seed: int = 0, _lookup: Callable[[str], np.ndarray] | None = None) -> TextEmbedding:
    """Whitespace tokens, each a random unit vector; row j is the mean of rows 1..j.

    The running mean makes the last row a summary of the whole prompt, the way
    a causal language model's final hidden state is.
    """
    if d_m < 1:
        raise EncodingError("d_m must be >= 1")
    tokens = text.split()
    if not tokens:
        raise EncodingError("cannot encode text with no tokens")
    lookup = _lookup or (lambda tok: token_vector(tok, d_m, seed))
    out = np.empty((len(tokens), d_m))
    acc = np.zeros(d_m)
    for j, tok in enumerate(tokens):
        # incremental form keeps the mean of repeated vectors exact
        acc = acc + (lookup(tok) - acc) / (j + 1)
        out[j] = acc
    return TextEmbedding(out, "stub")


class StubEncoder:
    def __init__(self, d_m: int, seed: int = 0):
        self.d_m = d_m
        self.seed = seed
        self._vectors: dict[str, np.ndarray] = {}

    def _vector(self, token: str) -> np.ndarray:
        v = self._vectors.get(token)
        if v is None:
            v = self._vectors[token] = token_vector(token, self.d_m, self.seed)
        return v

    def encode(self, text: str) -> TextEmbedding:
        return stub_encode(text, self.d_m, self.seed, _lookup=self._vector)


class ImportedEncoder:
    """Looks prompts up in an imported table, falling back to ``fallback``."""

    def __init__(self, table: dict[int, np.ndarray], fallback: Encoder):
        self.table = table
        self.fallback = fallback
        self.d_m = fallback.d_m

    def encode(self, text: str) -> TextEmbedding:
        hit = self.table.get(prompt_hash(text))
        if hit is not None:
            return TextEmbedding(hit, "imported")
        return self.fallback.encode(text)


def export_embeddings(path: str | Path, records: dict[int, np.ndarray]) -> None:
    write_bytes(path, encode_embeddings(records))


def import_embeddings(path: str | Path, d_m: int | None = None) -> dict[int, TextEmbedding]:
    """Read an ``FCTE`` file into {prompt hash: embedding}."""
    try:
        table = decode_embeddings(read_bytes(path), expected_dim=d_m, what=str(path))
    except FormatError as exc:
        raise EncodingError(str(exc)) from exc
    return {k: TextEmbedding(v, "imported") for k, v in table.items()}


# ---------------------------------------------------------------------------
# per-window text
# ---------------------------------------------------------------------------


StatsFn = Callable[[WindowSample, int], WindowStats]


def input_stats(window: WindowSample, channel: int) -> WindowStats:
    raw = window.raw_x if window.raw_x is not None else window.x
    return compute_stats(raw[:, channel])


class TextSource:
    """Produces one token matrix per variable for each window.

    ``static=True`` drops the statistics sentence so every window of a
    variable shares one prompt.
    """

    def __init__(
        self,
        dataset_key: str,
        T_in: int,
        M: int,
        encoder: Encoder,
        static: bool = False,
        stats_fn: StatsFn = input_stats,
        cache_size: int = 65536,
    ):
        dataset_description(dataset_key)
        self.dataset_key = dataset_key
        self.T_in = T_in
        self.M = M
        self.encoder = encoder
        self.static = static
        self.stats_fn = stats_fn
        self._encode = lru_cache(maxsize=cache_size)(self._encode_text)

    def _encode_text(self, text: str) -> np.ndarray:
        emb = self.encoder.encode(text)
        if emb.tokens.shape[1] != self.encoder.d_m:
            raise EncodingError(f"encoder returned width {emb.tokens.shape[1]}, expected {self.encoder.d_m}")
        tokens = emb.tokens
        tokens.setflags(write=False)
        return tokens

    def prompts(self, window: WindowSample) -> list[Prompt]:
        n = window.x.shape[1]
        return [
            build_prompt(self.dataset_key, self.T_in, self.M, None if self.static else self.stats_fn(window, c))
            for c in range(n)
        ]

    def embeddings(self, window: WindowSample) -> list[np.ndarray]:
        return [self._encode(p.full_text) for p in self.prompts(window)]
