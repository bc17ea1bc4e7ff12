"""Bit-exact file formats for embedding shards, model checkpoints, anomaly
maps and binary masks.

All integers are little-endian. Embedding and map payloads are stored as
32-bit floats (widened to 64-bit on read); checkpoints store 64-bit floats so
fit state round-trips exactly. Masks and renderings use binary PGM, readable
anywhere without dependencies.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from typing import BinaryIO, NamedTuple, Sequence

import numpy as np

from .core import DpmmModel, EmbeddingBatch, SufficientStats
from .scoring import AnomalyMap

SHARD_MAGIC = b"ADNE"
CHECKPOINT_MAGIC = b"DPMM"
MAP_MAGIC = b"AMAP"
FORMAT_VERSION = 1
SHARD_FLAG_NORMALIZED = 1


class FormatError(ValueError):
    """Raised for malformed, truncated or unsupported files."""


@dataclass(frozen=True)
class ShardRecord:
    """One image worth of patch embeddings plus optional mask reference.

    ``data`` is row-major over the patch grid: patch (i, j) sits at row
    i * grid_w + j. ``mask_path`` is stored relative to the shard file.
    """

    image_id: str
    grid_h: int
    grid_w: int
    data: np.ndarray
    mask_path: str | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("record data must be 2-D")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid dimensions must be positive")
        if data.shape[0] != self.grid_h * self.grid_w:
            raise ValueError(
                f"record has {data.shape[0]} rows but grid {self.grid_h}x{self.grid_w}"
            )
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def to_batch(self, normalized: bool = False) -> EmbeddingBatch:
        return EmbeddingBatch(self.data, normalized=normalized)


class ShardFile(NamedTuple):
    records: list[ShardRecord]
    normalized: bool


@dataclass(frozen=True)
class Checkpoint:
    """A fitted model, optionally with the statistics needed to resume."""

    model: DpmmModel
    stats: SufficientStats | None = None
    version: int = FORMAT_VERSION

    def require_stats(self) -> SufficientStats:
        if self.stats is None:
            raise ValueError("checkpoint has no sufficient statistics; cannot resume fitting")
        return self.stats


def _atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def _read_header(fh: BinaryIO, magic: bytes, kind: str) -> None:
    got = _read_exact(fh, 4, f"{kind} magic")
    if got != magic:
        raise FormatError(f"bad magic for {kind} file: {got!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, f"{kind} version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported {kind} version {version}")


def write_shard(
    path: str | os.PathLike, records: Sequence[ShardRecord], normalized: bool = False
) -> None:
    """Write embedding records to a shard file (payload as 32-bit floats)."""
    dims = {r.dim for r in records}
    if len(dims) > 1:
        raise ValueError(f"records disagree on dimensionality: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    flags = SHARD_FLAG_NORMALIZED if normalized else 0
    parts = [struct.pack("<4sIIIQ", SHARD_MAGIC, FORMAT_VERSION, dim, flags, len(records))]
    for rec in records:
        id_bytes = rec.image_id.encode("utf-8")
        parts.append(struct.pack("<I", len(id_bytes)))
        parts.append(id_bytes)
        parts.append(struct.pack("<II", rec.grid_h, rec.grid_w))
        if rec.mask_path is None:
            parts.append(struct.pack("<B", 0))
        else:
            mask_bytes = rec.mask_path.encode("utf-8")
            parts.append(struct.pack("<BI", 1, len(mask_bytes)))
            parts.append(mask_bytes)
        parts.append(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(parts))


def read_shard(path: str | os.PathLike) -> ShardFile:
    """Read a shard; embedding payload is widened to float64."""
    with open(path, "rb") as fh:
        _read_header(fh, SHARD_MAGIC, "shard")
        dim, flags, count = struct.unpack("<IIQ", _read_exact(fh, 16, "shard header"))
        records = []
        for _ in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4, "record id length"))
            image_id = _read_exact(fh, id_len, "record id").decode("utf-8")
            grid_h, grid_w = struct.unpack("<II", _read_exact(fh, 8, "record grid"))
            (has_mask,) = struct.unpack("<B", _read_exact(fh, 1, "mask flag"))
            mask_path = None
            if has_mask:
                (mask_len,) = struct.unpack("<I", _read_exact(fh, 4, "mask path length"))
                mask_path = _read_exact(fh, mask_len, "mask path").decode("utf-8")
            n_vals = grid_h * grid_w * dim
            raw = _read_exact(fh, 4 * n_vals, "record data")
            data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(grid_h * grid_w, dim)
            records.append(ShardRecord(image_id, grid_h, grid_w, data, mask_path))
        if fh.read(1):
            raise FormatError("trailing bytes after final shard record")
    return ShardFile(records, bool(flags & SHARD_FLAG_NORMALIZED))


def write_checkpoint(path: str | os.PathLike, checkpoint: Checkpoint) -> None:
    """Write a model checkpoint; all floats are stored as 64-bit."""
    model = checkpoint.model
    parts = [
        struct.pack(
            "<4sIIIB",
            CHECKPOINT_MAGIC,
            FORMAT_VERSION,
            model.k,
            model.dim,
            int(model.normalized_input),
        ),
        struct.pack("<d", model.alpha),
        np.ascontiguousarray(model.sticks, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.means, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.vars, dtype="<f8").tobytes(),
    ]
    stats = checkpoint.stats
    if stats is None:
        parts.append(struct.pack("<B", 0))
    else:
        if stats.k != model.k or stats.dim != model.dim:
            raise ValueError("statistics shape does not match the model")
        parts.append(struct.pack("<B", 1))
        parts.append(np.ascontiguousarray(stats.p_bar, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(stats.m_bar, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(stats.c_bar, dtype="<f8").tobytes())
        parts.append(struct.pack("<I", stats.batch_size))
    _atomic_write(path, b"".join(parts))


def _read_f64(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    raw = _read_exact(fh, 8 * count, what)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64, copy=True)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        _read_header(fh, CHECKPOINT_MAGIC, "checkpoint")
        k, dim, normalized = struct.unpack("<IIB", _read_exact(fh, 9, "checkpoint header"))
        (alpha,) = struct.unpack("<d", _read_exact(fh, 8, "alpha"))
        sticks = _read_f64(fh, k, "sticks")
        means = _read_f64(fh, k * dim, "means").reshape(k, dim)
        vars_ = _read_f64(fh, k * dim, "vars").reshape(k, dim)
        (has_stats,) = struct.unpack("<B", _read_exact(fh, 1, "stats flag"))
        stats = None
        if has_stats:
            p_bar = _read_f64(fh, k, "p_bar")
            m_bar = _read_f64(fh, k * dim, "m_bar").reshape(k, dim)
            c_bar = _read_f64(fh, k * dim, "c_bar").reshape(k, dim)
            (batch_size,) = struct.unpack("<I", _read_exact(fh, 4, "batch size"))
            stats = SufficientStats(p_bar, m_bar, c_bar, batch_size)
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    try:
        model = DpmmModel(means, vars_, sticks, alpha, bool(normalized))
    except ValueError as exc:
        raise FormatError(f"checkpoint holds an invalid model: {exc}") from exc
    return Checkpoint(model, stats)


def write_map(path: str | os.PathLike, amap: AnomalyMap) -> None:
    """Write an anomaly map (payload as 32-bit floats)."""
    h, w = amap.shape
    payload = struct.pack("<4sIII", MAP_MAGIC, FORMAT_VERSION, h, w)
    payload += np.ascontiguousarray(amap.scores, dtype="<f4").tobytes()
    _atomic_write(path, payload)


def read_map(path: str | os.PathLike, image_id: str = "") -> AnomalyMap:
    with open(path, "rb") as fh:
        _read_header(fh, MAP_MAGIC, "map")
        h, w = struct.unpack("<II", _read_exact(fh, 8, "map header"))
        raw = _read_exact(fh, 4 * h * w, "map data")
        if fh.read(1):
            raise FormatError("trailing bytes after map payload")
    scores = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(h, w)
    return AnomalyMap(scores, image_id=image_id)


def write_mask_pgm(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Write a boolean mask as binary PGM: 255 = anomalous, 0 = normal."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    h, w = mask.shape
    body = np.where(mask.astype(bool), 255, 0).astype(np.uint8).tobytes()
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + body)


def _read_pgm_tokens(fh: BinaryIO, count: int) -> list[bytes]:
    tokens: list[bytes] = []
    current = b""
    while len(tokens) < count:
        ch = fh.read(1)
        if not ch:
            raise FormatError("truncated PGM header")
        if ch == b"#":  # comment runs to end of line
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if current:
                tokens.append(current)
                current = b""
            continue
        current += ch
    return tokens


def read_mask_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM as a boolean mask; values above 127 are anomalous."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P5":
            raise FormatError(f"bad magic for PGM file: {magic!r}")
        try:
            w, h, maxval = (int(t) for t in _read_pgm_tokens(fh, 3))
        except ValueError as exc:
            raise FormatError(f"malformed PGM header: {exc}") from exc
        if w < 1 or h < 1 or not (0 < maxval < 256):
            raise FormatError(f"unsupported PGM geometry {w}x{h} maxval {maxval}")
        body = _read_exact(fh, w * h, "PGM pixels")
    values = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return values > 127


def write_pgm_gray(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write an 8-bit grayscale image as binary PGM."""
    values = np.asarray(values, dtype=np.uint8)
    if values.ndim != 2:
        raise ValueError("grayscale image must be 2-D")
    h, w = values.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + values.tobytes())


def render_map_pgm(amap: AnomalyMap, path: str | os.PathLike) -> None:
    """Render a map to 8-bit grayscale PGM by min-max normalization.

    A constant map has no contrast to show and renders as all zeros.
    """
    scores = amap.scores
    lo, hi = float(scores.min()), float(scores.max())
    if hi > lo:
        gray = np.round((scores - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        gray = np.zeros_like(scores, dtype=np.uint8)
    write_pgm_gray(path, gray)
