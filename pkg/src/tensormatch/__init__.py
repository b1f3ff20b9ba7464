"""Volumetric template matching: classical rotation-sampled NCC and tensorial template matching."""

from .grid import SspConfig, VolumeGrid, read_volume, write_volume
from .matching import (
    Detection,
    PeakParams,
    TensorField,
    build_tensor_template,
    classical_match,
    correlation_tensor_field,
    run_ttm,
    ttm_match,
)
from .so3 import RotationSet, UnitQuaternion, sample_haar
from .symtensor import SymTensor, multi_index_table, sshopm

__version__ = "0.1.0"

__all__ = [
    "Detection", "PeakParams", "RotationSet", "SspConfig", "SymTensor", "TensorField",
    "UnitQuaternion", "VolumeGrid", "build_tensor_template", "classical_match",
    "correlation_tensor_field", "multi_index_table", "read_volume", "run_ttm", "sample_haar", "sshopm",
    "ttm_match", "write_volume",
]
