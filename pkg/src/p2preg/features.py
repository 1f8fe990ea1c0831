"""Row-normalized feature matrices shared by descriptors and matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ParameterError

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class FeatureMatrix:
    """One unit-norm descriptor row per cloud point.

    Rows are unit length, so inner products between two matrices are
    cosine similarities.
    """

    values: NDArray[np.float64]

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2 or v.shape[1] < 1:
            raise ParameterError(f"features must be a 2-D (rows, dim) array, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ParameterError("feature values must be finite")
        if v.shape[0] and not np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=UNIT_TOL, rtol=0):
            raise ParameterError("feature rows must have unit L2 norm")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_raw(cls, raw: ArrayLike) -> "FeatureMatrix":
        """Normalize rows of an arbitrary matrix; zero rows are rejected."""
        raw = np.asarray(raw, dtype=np.float64)
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise ParameterError("cannot normalize an all-zero feature row")
        return cls(raw / norm)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.rows

    def take(self, idx: ArrayLike) -> "FeatureMatrix":
        return FeatureMatrix(self.values[np.asarray(idx, dtype=np.int64)])


def as_feature_array(x: FeatureMatrix | ArrayLike) -> NDArray[np.float64]:
    if isinstance(x, FeatureMatrix):
        return x.values
    return np.asarray(x, dtype=np.float64)
