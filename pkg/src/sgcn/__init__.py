"""Evolutionary architecture search over spatial-temporal graph convolutions
for skeleton action recognition, on a small numpy autodiff engine."""

from .ceim import ArchDistribution, CEIMConfig, FitSample, importance_mix, rank_weights, search, update_distribution
from .datasets import DatasetFile, SyntheticMotionSpec, load, save, synthesize
from .errors import ConfigurationError, DataError, DimensionError, FormatError, NumericalError
from .graph import ModuleKind, SkeletonTopology, chebyshev_components, normalized_graph
from .network import ArchitectureParams, Mode, Network, build_network, finalize_architecture
from .tensor import Tape, Tensor

__version__ = "0.1.0"
