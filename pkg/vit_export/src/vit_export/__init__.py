"""Export per-superpixel implicit features from self-supervised ViT attention."""

__version__ = "0.1.0"

from .export import ExportJob, export_frame, patch_means
from .sidecar import SidecarReport, verify_sidecar, write_sidecar

__all__ = [
    "ExportJob",
    "export_frame",
    "patch_means",
    "SidecarReport",
    "verify_sidecar",
    "write_sidecar",
]
