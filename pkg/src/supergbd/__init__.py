"""Zero-shot RGB-D instance segmentation: over-segment, merge, evaluate."""

__version__ = "0.1.0"

from .imagery import RgbdFrame, DatasetIndex, load_frame, save_frame, scan_dataset
from .superpixel import SlicConfig, SuperpixelMap, slic, slic_rgb, slic_depth, combine_maps

__all__ = [
    "RgbdFrame",
    "DatasetIndex",
    "load_frame",
    "save_frame",
    "scan_dataset",
    "SlicConfig",
    "SuperpixelMap",
    "slic",
    "slic_rgb",
    "slic_depth",
    "combine_maps",
]
