"""Score matrix, dual-softmax confidences, mutual nearest neighbours and
weighted Procrustes: the correspondence pipeline shared by the baseline and
the patch-based registration paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .cloud import PointCloud, RigidTransform
from .errors import DegenerateConfigurationError, ParameterError
from .features import FeatureMatrix, as_feature_array

# above this logit spread a single global max-shift could underflow whole rows
_SHARED_EXP_SPREAD = 600.0


@dataclass(frozen=True)
class CorrespondenceSet:
    """Weighted index pairs between a source and a target cloud."""

    source_idx: NDArray[np.int64]
    target_idx: NDArray[np.int64]
    weights: NDArray[np.float64]
    source: PointCloud | None = None
    target: PointCloud | None = None

    def __post_init__(self):
        si = np.asarray(self.source_idx, dtype=np.int64).reshape(-1)
        ti = np.asarray(self.target_idx, dtype=np.int64).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (si.shape == ti.shape == w.shape):
            raise ParameterError("index and weight arrays must have equal length")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ParameterError("correspondence weights must be positive and finite")
        if si.size:
            if np.any(si < 0) or np.any(ti < 0):
                raise ParameterError("negative correspondence index")
            if self.source is not None and si.max() >= len(self.source):
                raise ParameterError("source index out of range")
            if self.target is not None and ti.max() >= len(self.target):
                raise ParameterError("target index out of range")
            pairs = si * (int(ti.max()) + 1) + ti
            if np.unique(pairs).size != pairs.size:
                raise ParameterError("duplicate correspondence pair")
        for a in (si, ti, w):
            a.setflags(write=False)
        object.__setattr__(self, "source_idx", si)
        object.__setattr__(self, "target_idx", ti)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.source_idx.shape[0]

    @classmethod
    def empty(cls, source=None, target=None) -> "CorrespondenceSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros(0), source, target)

    @property
    def source_points(self) -> NDArray[np.float64]:
        return self.source.points[self.source_idx]

    @property
    def target_points(self) -> NDArray[np.float64]:
        return self.target.points[self.target_idx]

    def is_injective(self) -> bool:
        return (np.unique(self.source_idx).size == len(self)
                and np.unique(self.target_idx).size == len(self))

    def remap_source(self, mapping: ArrayLike, source: PointCloud) -> "CorrespondenceSet":
        """Re-express source indices through ``mapping`` (patch -> full cloud)."""
        mapping = np.asarray(mapping, dtype=np.int64)
        return CorrespondenceSet(mapping[self.source_idx], self.target_idx, self.weights, source, self.target)

    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(w)) for i, j, w in zip(self.source_idx, self.target_idx, self.weights)]


@dataclass
class RegistrationResult:
    transform: RigidTransform
    correspondences: CorrespondenceSet
    diagnostics: dict[str, Any] = field(default_factory=dict)


def default_temperature(dim: int) -> float:
    return 1.0 / np.sqrt(dim)


def score_matrix(xS: FeatureMatrix | ArrayLike, xT: FeatureMatrix | ArrayLike) -> NDArray[np.float64]:
    """Cosine similarities ``xS @ xT.T`` between unit-norm feature rows."""
    a = as_feature_array(xS)
    b = as_feature_array(xT)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ParameterError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    return a @ b.T


@dataclass
class SoftmaxParts:
    """Exponentiated logits and their row/column normalizers.

    ``row_exp / row_sum`` is the row softmax and ``col_exp / col_sum`` the
    column softmax. When the logit spread is moderate both share one array.
    """

    row_exp: NDArray[np.float64]
    row_sum: NDArray[np.float64]
    col_exp: NDArray[np.float64]
    col_sum: NDArray[np.float64]

    @property
    def shared(self) -> bool:
        return self.row_exp is self.col_exp


def _check_temperature(temperature: float) -> float:
    if not (np.isfinite(temperature) and temperature > 0):
        raise ParameterError(f"temperature must be positive, got {temperature}")
    return float(temperature)


def softmax_parts(S: ArrayLike, temperature: float) -> SoftmaxParts:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.size == 0:
        raise ParameterError("score matrix must be a non-empty 2-D array")
    L = S / _check_temperature(temperature)
    hi, lo = L.max(), L.min()
    if hi - lo < _SHARED_EXP_SPREAD:
        E = np.exp(L - hi)
        return SoftmaxParts(E, E.sum(axis=1), E, E.sum(axis=0))
    Er = np.exp(L - L.max(axis=1, keepdims=True))
    Ec = np.exp(L - L.max(axis=0, keepdims=True))
    return SoftmaxParts(Er, Er.sum(axis=1), Ec, Ec.sum(axis=0))


def dual_softmax(S: ArrayLike, temperature: float = 1.0) -> NDArray[np.float64]:
    """Row softmax times column softmax of ``S / temperature``."""
    p = softmax_parts(S, temperature)
    return (p.row_exp / p.row_sum[:, None]) * (p.col_exp / p.col_sum[None, :])


def _unique_max(block: NDArray, peak: NDArray, axis: int) -> NDArray[np.bool_]:
    """Whether each row (``axis=1``) or column (``axis=0``) of ``block`` attains ``peak`` once."""
    hits = block == (peak[:, None] if axis == 1 else peak[None, :])
    if np.count_nonzero(hits) == peak.shape[0]:
        return np.ones(peak.shape[0], dtype=bool)
    return np.count_nonzero(hits, axis=axis) == 1


def mutual_nn_matches(M: ArrayLike, source: PointCloud | None = None,
                      target: PointCloud | None = None) -> CorrespondenceSet:
    """Pairs whose confidence is the strict maximum of both its row and column."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise ParameterError("confidence matrix must be a non-empty 2-D array")
    # column argmax is slow on C-ordered data; column maxima plus tie counts suffice
    row_arg = M.argmax(axis=1)
    row_max = M[np.arange(M.shape[0]), row_arg]
    col_max = M.max(axis=0)
    if not np.all(np.isfinite(col_max)):
        raise ParameterError("confidence matrix must be finite")
    i = np.flatnonzero((row_max == col_max[row_arg]) & (row_max > 0))
    j = row_arg[i]
    if i.size:
        # ties only matter for the candidate pairs, so check just their rows and columns
        keep = _unique_max(M[i], row_max[i], 1) & _unique_max(M[:, j], col_max[j], 0)
        i, j = i[keep], j[keep]
    return CorrespondenceSet(i, j, M[i, j], source, target)


def _rank(a: NDArray, rtol: float = 1e-10) -> int:
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > s[0] * rtol).sum())


def procrustes(P: ArrayLike, Q: ArrayLike, weights: ArrayLike | None = None) -> RigidTransform:
    """Weighted least-squares rigid map taking points ``P`` onto ``Q``.

    Minimizes ``sum_j w_j * ||R p_j + t - q_j||^2`` over proper rotations by
    SVD of the weighted cross-covariance, flipping the last singular
    direction when the unconstrained optimum is a reflection.

    Raises
    ------
    DegenerateConfigurationError
        Fewer than three pairs, collinear source points, or a rank < 2
        cross-covariance.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise ParameterError(f"point arrays must both be (n, 3), got {P.shape} and {Q.shape}")
    n = P.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (n,) or np.any(w < 0):
        raise ParameterError("weights must be non-negative, one per pair")
    if n < 3 or np.count_nonzero(w) < 3:
        raise DegenerateConfigurationError(f"need at least 3 weighted pairs, got {np.count_nonzero(w)}",
                                           rank=0, n_pairs=n)
    wn = w / w.sum()
    p0 = wn @ P
    q0 = wn @ Q
    Pc = P - p0
    Qc = Q - q0
    src_rank = _rank((Pc * wn[:, None]).T @ Pc)
    H = (Pc * wn[:, None]).T @ Qc
    h_rank = _rank(H)
    if src_rank < 2 or h_rank < 2:
        raise DegenerateConfigurationError(
            f"rank-deficient configuration (source rank {src_rank}, covariance rank {h_rank})",
            rank=min(src_rank, h_rank), n_pairs=n)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    t = q0 - R @ p0
    return RigidTransform(R, t)


def weighted_svd(corr: CorrespondenceSet) -> RigidTransform:
    """Rigid transform best aligning the weighted correspondences."""
    if corr.source is None or corr.target is None:
        raise ParameterError("correspondence set carries no clouds")
    if len(corr) < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {len(corr)}",
                                           rank=0, n_pairs=len(corr))
    return procrustes(corr.source_points, corr.target_points, corr.weights)


@dataclass
class MatchState:
    """Intermediate arrays of a full-source match, reusable by patch matching."""

    scores: NDArray[np.float64]
    parts: SoftmaxParts
    confidence: NDArray[np.float64]
    temperature: float


def match_state(xS, xT, temperature: float | None = None) -> MatchState:
    a = as_feature_array(xS)
    if temperature is None:
        temperature = default_temperature(a.shape[1])
    S = score_matrix(xS, xT)
    p = softmax_parts(S, temperature)
    M = (p.row_exp / p.row_sum[:, None]) * (p.col_exp / p.col_sum[None, :])
    return MatchState(S, p, M, float(temperature))


def match_and_estimate(xS, xT, source: PointCloud, target: PointCloud,
                       temperature: float | None = None, state: MatchState | None = None) -> RegistrationResult:
    """Baseline complete-to-partial registration from point features.

    Score matrix, dual softmax, mutual nearest neighbours and a weighted
    SVD fit with the confidences as weights.
    """
    a, b = as_feature_array(xS), as_feature_array(xT)
    if a.shape[0] != len(source) or b.shape[0] != len(target):
        raise ParameterError("feature rows must match cloud sizes")
    if state is None:
        state = match_state(a, b, temperature)
    corr = mutual_nn_matches(state.confidence, source, target)
    T = weighted_svd(corr)
    diag = {"n_correspondences": len(corr), "temperature": state.temperature}
    return RegistrationResult(T, corr, diag)


def mean_residual(T: RigidTransform, P: ArrayLike, Q: ArrayLike) -> float:
    return float(np.linalg.norm(T.apply(P) - np.asarray(Q), axis=1).mean())

