"""Complete-to-partial point cloud registration with patch candidates.

The core entry points are :func:`match_and_estimate` (feature matching plus
weighted SVD on the whole source) and :func:`p2p_register`, which adds
target-sized source patches as extra candidates and keeps the best one.
"""

from .cloud import NormalizationInfo, PointCloud, RigidTransform, SpatialIndex, voxel_downsample
from .errors import (
    DegenerateConfigurationError,
    IcpStallError,
    NoCandidateError,
    ParameterError,
    RansacFailure,
    RegistrationError,
)
from .features import FeatureMatrix
from .matching import CorrespondenceSet, RegistrationResult, dual_softmax, match_and_estimate, weighted_svd
from .p2p import P2PConfig, p2p_register

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceSet",
    "DegenerateConfigurationError",
    "FeatureMatrix",
    "IcpStallError",
    "NoCandidateError",
    "NormalizationInfo",
    "P2PConfig",
    "ParameterError",
    "PointCloud",
    "RansacFailure",
    "RegistrationError",
    "RegistrationResult",
    "RigidTransform",
    "SpatialIndex",
    "dual_softmax",
    "match_and_estimate",
    "p2p_register",
    "voxel_downsample",
    "weighted_svd",
]
