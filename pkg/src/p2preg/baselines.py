"""Reference registrars: point-to-point ICP and RANSAC over correspondences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, RigidTransform
from .errors import DegenerateConfigurationError, IcpStallError, ParameterError, RansacFailure
from .matching import CorrespondenceSet, procrustes


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tolerance: float = 1e-10
    max_correspondence_distance: float | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be at least 1")
        if not self.tolerance > 0:
            raise ParameterError("tolerance must be positive")
        if self.max_correspondence_distance is not None and not self.max_correspondence_distance > 0:
            raise ParameterError("max_correspondence_distance must be positive")


@dataclass
class IcpResult:
    transform: RigidTransform
    residuals: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")


def _rms(d: np.ndarray) -> float:
    return float(np.sqrt((d * d).mean()))


def icp_detailed(source: PointCloud, target: PointCloud, T0: RigidTransform | None = None,
                 cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Point-to-point ICP recording the residual of every iteration.

    Correspondences go from each transformed source point to its nearest
    target point, optionally gated by ``max_correspondence_distance``. The
    residual is the root-mean-square correspondence distance, the quantity
    each SVD step minimizes. An update is only accepted when it does not
    raise that residual, so the sequence is non-increasing.
    """
    T = RigidTransform.identity() if T0 is None else T0
    tree = cKDTree(target.points)
    src = source.points
    gate = cfg.max_correspondence_distance

    def residual(transform):
        d, j = tree.query(transform.apply(src), k=1)
        keep = np.ones(d.shape, bool) if gate is None else d <= gate
        return d, j, keep

    d, j, keep = residual(T)
    if not keep.any():
        raise IcpStallError("no correspondences within the distance gate", T, 0)
    res = [_rms(d[keep])]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        try:
            step = procrustes(src[keep], target.points[j[keep]])
        except DegenerateConfigurationError:
            break
        T_new = step
        d_new, j_new, keep_new = residual(T_new)
        if not keep_new.any():
            raise IcpStallError("no correspondences within the distance gate", T, it)
        r_new = _rms(d_new[keep_new])
        if r_new > res[-1]:
            break
        improvement = res[-1] - r_new
        T, d, j, keep = T_new, d_new, j_new, keep_new
        res.append(r_new)
        if improvement < cfg.tolerance:
            converged = True
            break
    return IcpResult(T, res, it, converged)


def icp(source: PointCloud, target: PointCloud, T0: RigidTransform | None = None,
        cfg: IcpConfig = IcpConfig()) -> RigidTransform:
    return icp_detailed(source, target, T0, cfg).transform


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    sample_size: int = 3
    max_correspondence_distance: float = 0.05
    seed: int = 0
    icp_refine: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ParameterError("iterations must be at least 1")
        if self.sample_size < 3:
            raise ParameterError("sample_size must be at least 3")
        if not self.max_correspondence_distance > 0:
            raise ParameterError("max_correspondence_distance must be positive")


@dataclass
class RansacResult:
    transform: RigidTransform
    inliers: np.ndarray
    best_count: int
    hypothesis_counts: list[int]


def ransac_detailed(corr: CorrespondenceSet, source: PointCloud | None = None,
                    target: PointCloud | None = None, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Hypothesize-and-verify rigid fitting over putative correspondences.

    Every iteration fits three randomly drawn pairs, counts pairs whose
    residual is within ``max_correspondence_distance``, and the best
    hypothesis is refit on its inliers. Iteration ``i`` draws from its own
    generator derived from ``(seed, i)``, so the outcome does not depend on
    evaluation order.
    """
    source = corr.source if source is None else source
    target = corr.target if target is None else target
    n = len(corr)
    if n < cfg.sample_size:
        raise RansacFailure(f"need at least {cfg.sample_size} correspondences, got {n}")
    P = source.points[corr.source_idx]
    Q = target.points[corr.target_idx]
    best_count, best_inliers, counts = -1, None, []
    for i in range(cfg.iterations):
        pick = np.random.default_rng([cfg.seed, i]).choice(n, size=cfg.sample_size, replace=False)
        try:
            T = procrustes(P[pick], Q[pick])
        except DegenerateConfigurationError:
            counts.append(0)
            continue
        inl = np.linalg.norm(T.apply(P) - Q, axis=1) <= cfg.max_correspondence_distance
        c = int(inl.sum())
        counts.append(c)
        if c > best_count:
            best_count, best_inliers = c, inl
    if best_inliers is None or best_count < 3:
        raise RansacFailure("no hypothesis reached three inliers")
    try:
        T = procrustes(P[best_inliers], Q[best_inliers])
    except DegenerateConfigurationError as exc:
        raise RansacFailure(f"inlier refit is degenerate: {exc}") from exc
    if cfg.icp_refine:
        T = icp(source, target, T, IcpConfig(max_correspondence_distance=cfg.max_correspondence_distance))
    return RansacResult(T, best_inliers, best_count, counts)


def ransac_registration(corr: CorrespondenceSet, source: PointCloud | None = None,
                        target: PointCloud | None = None, cfg: RansacConfig = RansacConfig()) -> RigidTransform:
    return ransac_detailed(corr, source, target, cfg).transform
