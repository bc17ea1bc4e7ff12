"""Convert an image directory into an embedding shard.

Images are resized to a square resolution divisible by the backbone patch
size, pushed through the backbone in batches, and written as one record per
image with the patch-token grid in row-major order. Ground-truth masks, when
given, are converted to binary PGM at the same resolution and referenced
from the records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import DinoV2Backbone
from .shardio import PatchRecord, write_mask_pgm, write_shard

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm", ".ppm"}

# standard ImageNet statistics used by the backbone's training pipeline
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class ExtractJob:
    """What to convert and how.

    ``resize`` must be divisible by the backbone patch size (14 for DINOv2);
    a 448 input yields a 32x32 token grid.
    """

    images_dir: str
    out_path: str
    masks_dir: str | None = None
    resize: int = 448
    device: str = "cpu"
    normalize: bool = False
    batch_size: int = 8


@dataclass
class ExtractReport:
    records: int = 0
    skipped: int = 0
    log_lines: list[str] = field(default_factory=list)

    @property
    def log_text(self) -> str:
        return "\n".join(self.log_lines) + "\n"


def _list_images(root: Path) -> list[Path]:
    return sorted(
        p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _load_image_tensor(path: Path, resize: int) -> torch.Tensor:
    with Image.open(path) as img:
        rgb = img.convert("RGB")  # grayscale inputs replicate to 3 channels
        resized = rgb.resize((resize, resize), Image.BICUBIC)
    array = np.asarray(resized, dtype=np.float32) / 255.0
    array = (array - CHANNEL_MEAN) / CHANNEL_STD
    return torch.from_numpy(array.transpose(2, 0, 1))


def _find_mask(masks_dir: Path, relative: Path) -> Path | None:
    stem = masks_dir / relative.parent / relative.stem
    for ext in sorted(IMAGE_EXTENSIONS):
        candidate = stem.with_suffix(ext)
        if candidate.exists():
            return candidate
    return None


def _convert_mask(path: Path, resize: int) -> np.ndarray:
    with Image.open(path) as img:
        gray = img.convert("L").resize((resize, resize), Image.NEAREST)
    return np.asarray(gray) > 127


def extract(job: ExtractJob, backbone=None) -> ExtractReport:
    """Run the conversion and write the shard plus a conversion log.

    Unreadable images are skipped with a log line; a missing backbone is
    fatal. Returns the report; the log is also written next to the shard as
    ``<out>.log.txt``.
    """
    if backbone is None:
        backbone = DinoV2Backbone(job.device)
    if job.resize % backbone.patch_size != 0:
        raise ValueError(
            f"resize {job.resize} is not divisible by the backbone patch size "
            f"{backbone.patch_size}"
        )
    grid = job.resize // backbone.patch_size

    images_dir = Path(job.images_dir)
    if not images_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {job.images_dir}")
    masks_dir = Path(job.masks_dir) if job.masks_dir else None
    if masks_dir is not None and not masks_dir.is_dir():
        raise FileNotFoundError(f"mask directory not found: {job.masks_dir}")

    out_path = Path(job.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    mask_out = out_path.parent / (out_path.stem + "_masks")

    report = ExtractReport()
    records: list[PatchRecord] = []
    pending: list[tuple[str, Path, torch.Tensor]] = []

    def flush() -> None:
        if not pending:
            return
        batch = torch.stack([tensor for _, _, tensor in pending])
        tokens = backbone(batch)
        expected = grid * grid
        if tokens.shape[1] != expected or tokens.shape[2] != backbone.dim:
            raise RuntimeError(
                f"backbone returned {tuple(tokens.shape[1:])} tokens, "
                f"expected ({expected}, {backbone.dim})"
            )
        for (image_id, image_path, _), image_tokens in zip(pending, tokens):
            data = image_tokens.numpy().astype(np.float32)
            if job.normalize:
                norms = np.linalg.norm(data, axis=1, keepdims=True)
                data = data / np.where(norms > 0, norms, 1.0)
            mask_ref = None
            if masks_dir is not None:
                found = _find_mask(masks_dir, image_path.relative_to(images_dir))
                if found is not None:
                    mask_out.mkdir(parents=True, exist_ok=True)
                    safe = image_id.replace("/", "_")
                    mask_ref = f"{mask_out.name}/{safe}.pgm"
                    write_mask_pgm(out_path.parent / mask_ref, _convert_mask(found, job.resize))
            records.append(PatchRecord(image_id, grid, grid, data, mask_ref))
            report.records += 1
            report.log_lines.append(
                f"ok {image_id} grid {grid}x{grid}"
                + (f" mask {mask_ref}" if mask_ref else "")
            )
        pending.clear()

    for image_path in _list_images(images_dir):
        image_id = image_path.relative_to(images_dir).as_posix()
        try:
            tensor = _load_image_tensor(image_path, job.resize)
        except Exception as exc:  # noqa: BLE001 - any decode failure just skips
            report.skipped += 1
            report.log_lines.append(f"skip {image_id}: {exc}")
            continue
        pending.append((image_id, image_path, tensor))
        if len(pending) >= job.batch_size:
            flush()
    flush()

    write_shard(out_path, records, normalized=job.normalize)
    report.log_lines.append(
        f"done: {report.records} records, {report.skipped} skipped, "
        f"dim {backbone.dim}, grid {grid}x{grid}"
    )
    log_path = Path(str(out_path) + ".log.txt")
    log_path.write_text(report.log_text, encoding="utf-8")
    return report
