"""Offline feature exporter: runs a frozen image encoder over a dataset
directory and writes one embedding row per image to a CLFT feature table.

The package is deliberately standalone: it shares only on-disk formats with
the training side (the class-per-subdirectory PPM tree and the CLFT binary
table), never code.
"""

from .encoder import FEATURE_DIM, FrozenEncoder
from .export import (DatasetError, ExportError, ExportManifest, ExportReport,
                     export_clip_features, scan_dataset)
from .ppm import DecodeError, read_ppm
from .table import write_table

__all__ = [
    "FEATURE_DIM",
    "FrozenEncoder",
    "DatasetError",
    "ExportError",
    "ExportManifest",
    "ExportReport",
    "export_clip_features",
    "scan_dataset",
    "DecodeError",
    "read_ppm",
    "write_table",
]
