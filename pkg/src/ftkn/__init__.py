"""Focal-token refinement network: temporal 3D box refinement with
adaptive token scaling, deduplicated focal-point storage, grouped
hierarchical fusion, and a dual-layer decoder."""

from .config import PipelineConfig, desk_config, load_config, paper_shape_config
from .model import FTKNModel

__version__ = "0.1.0"

__all__ = [
    "FTKNModel",
    "PipelineConfig",
    "desk_config",
    "load_config",
    "paper_shape_config",
    "__version__",
]
