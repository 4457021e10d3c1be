"""Flow-matching forecasting of longitudinal 3D volume sequences.

A sequence of context volumes is transported toward a single target
volume along a learned velocity field, either on a uniform time grid
(missing slots carried forward) or conditioned directly on real-valued
timestamps so the target time can be arbitrary.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    FlowcastError,
    FormatError,
    IntegrationDivergedError,
    ShapeError,
    TrainingDivergedError,
)
from .series import (
    MaskPlan,
    SplitManifest,
    Volume,
    VolumeSequence,
    mask_plan_hash,
    read_series,
    write_series,
)

__all__ = [
    "__version__",
    "ConfigError",
    "DataError",
    "FlowcastError",
    "FormatError",
    "IntegrationDivergedError",
    "ShapeError",
    "TrainingDivergedError",
    "MaskPlan",
    "SplitManifest",
    "Volume",
    "VolumeSequence",
    "mask_plan_hash",
    "read_series",
    "write_series",
]
