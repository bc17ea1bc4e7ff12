"""Image datasets to patch-embedding shards via a DINOv2 backbone."""

from .backbone import DinoV2Backbone, PatchProjectionBackbone, load_backbone
from .extract import ExtractJob, ExtractReport, extract
from .shardio import PatchRecord, write_mask_pgm, write_shard

__version__ = "0.1.0"

__all__ = [
    "DinoV2Backbone",
    "PatchProjectionBackbone",
    "load_backbone",
    "ExtractJob",
    "ExtractReport",
    "extract",
    "PatchRecord",
    "write_mask_pgm",
    "write_shard",
]
