"""Writers for the embedding-shard wire format and PGM masks.

The shard layout (all integers little-endian) is the interchange contract
with the downstream fitting/scoring tooling:

    magic "ADNE" | u32 version=1 | u32 D | u32 flags (bit0 = rows normalized)
    | u64 record_count | per record: u32 id_len, id bytes, u32 grid_h,
    u32 grid_w, u8 has_mask, [u32 mask_len, mask bytes], grid_h*grid_w*D f32
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

SHARD_MAGIC = b"ADNE"
SHARD_VERSION = 1
FLAG_NORMALIZED = 1


@dataclass
class PatchRecord:
    image_id: str
    grid_h: int
    grid_w: int
    data: np.ndarray  # (grid_h * grid_w, D) float32
    mask_path: str | None = None


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


def write_shard(path: str | os.PathLike, records: list[PatchRecord], normalized: bool) -> None:
    dims = {rec.data.shape[1] for rec in records}
    if len(dims) > 1:
        raise ValueError(f"records disagree on dimensionality: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    flags = FLAG_NORMALIZED if normalized else 0
    parts = [struct.pack("<4sIIIQ", SHARD_MAGIC, SHARD_VERSION, dim, flags, len(records))]
    for rec in records:
        if rec.data.shape[0] != rec.grid_h * rec.grid_w:
            raise ValueError(f"record {rec.image_id}: row count does not match grid")
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


def write_mask_pgm(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Binary PGM, 255 = anomalous, 0 = normal."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    h, w = mask.shape
    body = np.where(mask.astype(bool), 255, 0).astype(np.uint8).tobytes()
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + body)
