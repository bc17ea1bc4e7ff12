"""Patch-token backbones.

A backbone maps a batch of (B, 3, H, W) image tensors to (B, N, dim) patch
tokens, N = (H / patch_size) * (W / patch_size). The real backbone is the
small DINOv2 vision transformer from torch.hub (384-dimensional tokens,
patch size 14); a deterministic random-projection backbone with the same
token geometry is provided for tests and offline dry runs.
"""

from __future__ import annotations

import numpy as np
import torch

DINOV2_REPO = "facebookresearch/dinov2"
DINOV2_MODEL = "dinov2_vits14"


class DinoV2Backbone:
    """Pretrained DINOv2 ViT-S/14; requires the official weights.

    Loading goes through torch.hub, so the weights must either be cached
    locally or downloadable. A missing backbone is a fatal error.
    """

    patch_size = 14
    dim = 384

    def __init__(self, device: str = "cpu"):
        self.device = device
        try:
            self.model = torch.hub.load(DINOV2_REPO, DINOV2_MODEL)
        except Exception as exc:  # noqa: BLE001 - hub raises a zoo of types
            raise RuntimeError(
                f"could not load {DINOV2_MODEL} from torch.hub; the pretrained "
                f"weights are required ({exc})"
            ) from exc
        self.model.eval().to(device)

    @torch.inference_mode()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        features = self.model.forward_features(images.to(self.device))
        return features["x_norm_patchtokens"].cpu()


class PatchProjectionBackbone:
    """Deterministic stand-in: a fixed linear projection of raw patches.

    Produces the same token geometry as the real backbone (patch size 14,
    384 dimensions) from a seeded projection matrix, so shard plumbing can be
    exercised without pretrained weights.
    """

    patch_size = 14
    dim = 384

    def __init__(self, seed: int = 0, device: str = "cpu"):
        rng = np.random.default_rng(seed)
        flat = 3 * self.patch_size * self.patch_size
        weight = rng.standard_normal((flat, self.dim)) / np.sqrt(flat)
        self.weight = torch.from_numpy(weight.astype(np.float32))
        self.device = device

    @torch.inference_mode()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        b, c, h, w = images.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} is not a multiple of patch size {p}")
        # (B, C, H/p, p, W/p, p) -> (B, H/p * W/p, C*p*p), row-major over the grid
        patches = (
            images.reshape(b, c, h // p, p, w // p, p)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(b, (h // p) * (w // p), c * p * p)
        )
        return patches @ self.weight


def load_backbone(name: str, device: str = "cpu"):
    if name == "dinov2":
        return DinoV2Backbone(device)
    if name == "projection":
        return PatchProjectionBackbone(device=device)
    raise ValueError(f"unknown backbone {name!r}")
