"""Cross-layer weight sharing guided by loss curvature.

Layers are assigned to a small pool of shared low-rank bases so that the
weight change caused by sharing avoids the high-curvature directions of each
layer's Hessian.
"""

from .aligner import AlignConfig, AlignmentReport, LayerAlignment, align_layer, geo_share, select_basis
from .autodiff import Batch, ModelSpec
from .curvature import MinorAxisBundle, decompose, minor_axes, quadratic_cost
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DataError,
    GeoShareError,
    NumericError,
    OracleFailure,
    ParameterError,
)
from .linalg import EigenPairs, SymmetricOperator, lanczos_top_eigs, svd_truncated, sym_eig_dense
from .sharing import Coloring, SharedBasis, color_classes, compression_ratio

__version__ = "0.1.0"

__all__ = [
    "AlignConfig",
    "AlignmentReport",
    "Batch",
    "Coloring",
    "ConfigurationError",
    "ConvergenceError",
    "DataError",
    "EigenPairs",
    "GeoShareError",
    "LayerAlignment",
    "MinorAxisBundle",
    "ModelSpec",
    "NumericError",
    "OracleFailure",
    "ParameterError",
    "SharedBasis",
    "SymmetricOperator",
    "align_layer",
    "color_classes",
    "compression_ratio",
    "decompose",
    "geo_share",
    "lanczos_top_eigs",
    "minor_axes",
    "quadratic_cost",
    "select_basis",
    "svd_truncated",
    "sym_eig_dense",
]
