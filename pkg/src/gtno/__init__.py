"""Graph transformer neural operator for parametric PDEs on point clouds.

A self-contained research engine: float64 tape autodiff, neighborhood graph
attention with rotary position encodings, a query-based operator decoder that
evaluates on arbitrary point sets, desk-scale PDE data generators, and a CLI
for the full train / eval / ablate loop.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FormatError,
    IsolatedNodeError,
    MagicError,
    NumericFaultError,
    ShapeError,
    TruncationError,
    VersionError,
    ZeroTargetError,
)
from .graph import PointSet, Graph, build_knn_graph, build_radius_graph, uniform_grid
from .model import ModelConfig, OperatorModel, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward, grad_check, no_grad
from .training import TrainConfig, TrainSample, evaluate, train

__all__ = [
    "__version__",
    "ConfigError", "FormatError", "IsolatedNodeError", "MagicError",
    "NumericFaultError", "ShapeError", "TruncationError", "VersionError",
    "ZeroTargetError",
    "PointSet", "Graph", "build_knn_graph", "build_radius_graph", "uniform_grid",
    "ModelConfig", "OperatorModel", "load_checkpoint", "save_checkpoint",
    "Tape", "Tensor", "backward", "grad_check", "no_grad",
    "TrainConfig", "TrainSample", "evaluate", "train",
]
