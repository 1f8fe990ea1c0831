"""Exception types raised across the package."""

from __future__ import annotations


class RegistrationError(Exception):
    """Base class for all package errors."""


class ParameterError(RegistrationError, ValueError):
    """An argument is outside its documented domain."""


class StateError(RegistrationError, RuntimeError):
    """An object is not in a state that supports the request."""


class ScaleZeroError(ParameterError):
    """Normalization of a cloud whose points all coincide."""


class DegenerateConfigurationError(RegistrationError):
    """Too few or rank-deficient correspondences for a rigid fit.

    Attributes
    ----------
    rank : int
        Numerical rank of the (weighted) cross-covariance, or of the
        centered source configuration.
    n_pairs : int
        Number of correspondences that were available.
    """

    def __init__(self, message: str, rank: int = 0, n_pairs: int = 0):
        super().__init__(message)
        self.rank = rank
        self.n_pairs = n_pairs


class NoCandidateError(RegistrationError):
    """Every candidate transform in a P2P run failed."""


class IcpStallError(RegistrationError):
    """ICP lost all correspondences under its distance gate."""

    def __init__(self, message: str, last_transform=None, iteration: int = 0):
        super().__init__(message)
        self.last_transform = last_transform
        self.iteration = iteration


class RansacFailure(RegistrationError):
    """No RANSAC hypothesis gathered at least three inliers."""


class DeformationError(ParameterError):
    """A displacement field would fold the mesh (gradient too large)."""
