"""tinydet-kit: the TinyDet detector family as analyzable data.

Architecture specs are plain values; FLOPs accounting, misalignment traces,
reference kernels and anchor-coverage statistics are pure functions of them.
"""

from .archspec import (
    ArchSpec,
    LayerSpec,
    PyramidLevel,
    RcnnConfig,
    RpnConfig,
    builtin_arch,
    parse_arch,
    serialize_arch,
    shape_trace,
    validate_arch,
)
from .flops import FlopCount, FlopsReport, model_flops
from .align import insert_alignment_pools, misalignment_trace
from .anchors import AnchorGrid, Box, assign, coverage_map, gtmr, iou, tile_anchors

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "LayerSpec",
    "PyramidLevel",
    "RpnConfig",
    "RcnnConfig",
    "builtin_arch",
    "parse_arch",
    "serialize_arch",
    "shape_trace",
    "validate_arch",
    "FlopCount",
    "FlopsReport",
    "model_flops",
    "misalignment_trace",
    "insert_alignment_pools",
    "Box",
    "AnchorGrid",
    "tile_anchors",
    "iou",
    "assign",
    "gtmr",
    "coverage_map",
    "__version__",
]
