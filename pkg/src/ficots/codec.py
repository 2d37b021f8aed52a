"""Little-endian binary containers shared by embedding files and checkpoints.

Embedding file (``FCTE``)::

    magic "FCTE" | version u16 | count u32
    per record: prompt_hash u64 | n_tokens u32 | d_model u32 | n_tokens*d_model f32

Checkpoint (``FCCK``)::

    magic "FCCK" | version u16 | config_len u32 | config utf-8 | best_epoch i32 | seed u64 | count u32
    per record: name_len u16 | name utf-8 | ndim u8 | dims u32*ndim | prod(dims) f64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMBEDDING_MAGIC = b"FCTE"
CHECKPOINT_MAGIC = b"FCCK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A container file is malformed, truncated or of the wrong version."""


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, context: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated payload in {context}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, context: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, context))

    def header(self, magic: bytes) -> int:
        got = self.take(4, "header")
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        (version,) = self.unpack("<H", "header")
        if version != FORMAT_VERSION:
            raise FormatError(f"{self.what}: unsupported version {version}, expected {FORMAT_VERSION}")
        return version


def encode_embeddings(records: dict[int, np.ndarray]) -> bytes:
    parts = [EMBEDDING_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(records))]
    for key, mat in records.items():
        mat = np.asarray(mat)
        if mat.ndim != 2:
            raise FormatError(f"embedding for hash {key:#x} must be 2-D, got {mat.shape}")
        parts.append(struct.pack("<QII", key, mat.shape[0], mat.shape[1]))
        parts.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_embeddings(buf: bytes, expected_dim: int | None = None, what: str = "embedding file") -> dict[int, np.ndarray]:
    r = _Reader(buf, what)
    r.header(EMBEDDING_MAGIC)
    (count,) = r.unpack("<I", "header")
    out: dict[int, np.ndarray] = {}
    for i in range(count):
        key, n_tok, dim = r.unpack("<QII", f"record {i}")
        if n_tok < 1:
            raise FormatError(f"{what}: record {i} (hash {key:#018x}) has no tokens")
        if expected_dim is not None and dim != expected_dim:
            raise FormatError(
                f"{what}: record {i} (hash {key:#018x}) has d_m={dim}, model expects {expected_dim}"
            )
        raw = r.take(4 * n_tok * dim, f"record {i} (hash {key:#018x})")
        mat = np.frombuffer(raw, dtype="<f4").reshape(n_tok, dim).astype(np.float64)
        if not np.all(np.isfinite(mat)):
            raise FormatError(f"{what}: record {i} (hash {key:#018x}) has non-finite values")
        out[key] = mat
    if r.pos != len(buf):
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes after {count} records")
    return out


@dataclass
class CheckpointBlob:
    config_text: str
    best_epoch: int
    seed: int
    arrays: dict[str, np.ndarray]


def encode_checkpoint(blob: CheckpointBlob, version: int = FORMAT_VERSION) -> bytes:
    cfg = blob.config_text.encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<HI", version, len(cfg)),
        cfg,
        struct.pack("<iQI", blob.best_epoch, blob.seed, len(blob.arrays)),
    ]
    for name, arr in blob.arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, what: str = "checkpoint") -> CheckpointBlob:
    r = _Reader(buf, what)
    r.header(CHECKPOINT_MAGIC)
    (cfg_len,) = r.unpack("<I", "header")
    config_text = r.take(cfg_len, "config").decode("utf-8")
    best_epoch, seed, count = r.unpack("<iQI", "header")
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"record {i}")
        name = r.take(nlen, f"record {i}").decode("utf-8")
        (ndim,) = r.unpack("<B", f"record {name!r}")
        dims = r.unpack(f"<{ndim}I", f"record {name!r}")
        n = int(np.prod(dims)) if ndim else 1
        raw = r.take(8 * n, f"record {name!r}")
        if name in arrays:
            raise FormatError(f"{what}: duplicate record {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes")
    return CheckpointBlob(config_text, best_epoch, seed, arrays)


def write_bytes(path: str | Path, data: bytes) -> None:
    Path(path).write_bytes(data)


def read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
