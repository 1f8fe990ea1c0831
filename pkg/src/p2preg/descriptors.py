"""Point-wise feature providers.

Two kinds of features feed the matching pipeline here. The first is a
handcrafted rotation-invariant histogram descriptor in the spirit of FPFH.
The second is an oracle that derives features from benchmark ground truth
with a single corruption knob, which lets matching be studied without a
trained network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import ParameterError
from .features import FeatureMatrix

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


def estimate_normals(cloud: PointCloud, k: int = 12, return_flags: bool = False):
    """PCA normals from the ``k`` nearest neighbours of every point.

    Each normal is the eigenvector of the smallest eigenvalue of the local
    covariance. It is oriented away from the neighbourhood centroid, or away
    from the cloud centroid where the neighbourhood is flat around the
    point. Neighbourhoods whose covariance has rank below 2 get
    ``FALLBACK_NORMAL`` and are flagged.
    """
    n = len(cloud)
    if k < 3:
        raise ParameterError(f"k must be at least 3, got {k}")
    if n < k:
        raise ParameterError(f"cloud has {n} points, fewer than k={k}")
    pts = cloud.points
    _, nbr = cKDTree(pts).query(pts, k=k)
    local = pts[nbr]
    centroid = local.mean(axis=1)
    diff = local - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", diff, diff) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    flags = evals[:, 1] <= 1e-10 * scale
    normals[flags] = FALLBACK_NORMAL

    extent = np.sqrt(scale)
    side = np.einsum("ij,ij->i", normals, pts - centroid)
    flat = np.abs(side) <= 1e-9 * extent
    side[flat] = np.einsum("ij,ij->i", normals[flat], pts[flat] - pts.mean(axis=0))
    flip = (side < 0) & ~flags
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = cloud.with_normals(normals)
    if return_flags:
        return out, flags
    return out


def pair_features(p1: NDArray, n1: NDArray, p2: NDArray, n2: NDArray) -> NDArray[np.float64]:
    """Darboux-frame angles (theta, alpha, phi) for arrays of point pairs.

    The frame is anchored at whichever endpoint's normal makes the smaller
    angle with the connecting line, which makes the result symmetric in
    the two endpoints. ``phi`` is the absolute cosine of that angle, in
    [0, 1].
    """
    d = p2 - p1
    dist = np.linalg.norm(d, axis=1)
    dist = np.where(dist > 0, dist, 1.0)
    dn = d / dist[:, None]
    a1 = np.einsum("ij,ij->i", n1, dn)
    a2 = np.einsum("ij,ij->i", n2, dn)
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    u = np.where(swap[:, None], n2, n1)
    other = np.where(swap[:, None], n1, n2)
    dn = np.where(swap[:, None], -dn, dn)
    # the signed cosine would flip when rounding flips the anchor choice
    phi = np.maximum(np.abs(a1), np.abs(a2))
    v = np.cross(dn, u)
    vn = np.linalg.norm(v, axis=1)
    ok = vn > 1e-12
    v[ok] /= vn[ok, None]
    v[~ok] = 0.0
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, other)
    theta = np.arctan2(np.einsum("ij,ij->i", w, other), np.einsum("ij,ij->i", u, other))
    return np.column_stack([theta, alpha, phi])


def _soft_bin(values: NDArray, lo: float, hi: float, bins: int, circular: bool = False):
    """Split each vote linearly between the two nearest bin centres.

    Hard binning would jump when rounding moves a value across an edge,
    which breaks rigid invariance; linear votes vary continuously.
    Returns ``(left, right, right_weight)``.
    """
    x = (values - lo) / (hi - lo) * bins - 0.5
    left = np.floor(x)
    frac = x - left
    left = left.astype(np.int64)
    right = left + 1
    if circular:
        return left % bins, right % bins, frac
    return np.clip(left, 0, bins - 1), np.clip(right, 0, bins - 1), frac


def compute_local_descriptor(cloud: PointCloud, radius: float, dim: int = 33,
                             return_flags: bool = False):
    """Fast-point-feature-histogram style descriptor, one unit row per point.

    Parameters
    ----------
    cloud : PointCloud
        Must carry normals.
    radius : float
        Neighbourhood radius in the cloud's units.
    dim : int
        Descriptor length; must be a multiple of 3 (one histogram per angle).

    Returns
    -------
    FeatureMatrix, or (FeatureMatrix, flags) with ``return_flags``. Points
    without any neighbour inside ``radius`` get the normalized all-ones row
    and a set flag.
    """
    if not cloud.has_normals:
        raise ParameterError("local descriptors need normals; run estimate_normals first")
    if not radius > 0:
        raise ParameterError("radius must be positive")
    if dim < 3 or dim % 3:
        raise ParameterError("dim must be a positive multiple of 3")
    bins = dim // 3
    pts, nrm = cloud.points, cloud.normals
    n = len(cloud)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    spfh = np.zeros((n, dim))
    counts = np.zeros(n)
    if pairs.size:
        i, j = pairs[:, 0], pairs[:, 1]
        f = pair_features(pts[i], nrm[i], pts[j], nrm[j])
        parts = (
            _soft_bin(f[:, 0], -np.pi, np.pi, bins, circular=True),
            _soft_bin(f[:, 1], -1.0, 1.0, bins),
            _soft_bin(f[:, 2], 0.0, 1.0, bins),
        )
        for end in (i, j):
            for c, (left, right, frac) in enumerate(parts):
                np.add.at(spfh, (end, c * bins + left), 1.0 - frac)
                np.add.at(spfh, (end, c * bins + right), frac)
        np.add.at(counts, i, 1.0)
        np.add.at(counts, j, 1.0)
    lonely = counts == 0
    spfh[~lonely] /= counts[~lonely, None]

    fpfh = spfh.copy()
    if pairs.size:
        i, j = pairs[:, 0], pairs[:, 1]
        dist = np.linalg.norm(pts[i] - pts[j], axis=1)
        wgt = 1.0 / np.maximum(dist, 1e-12)
        acc = np.zeros((n, dim))
        np.add.at(acc, i, spfh[j] * wgt[:, None])
        np.add.at(acc, j, spfh[i] * wgt[:, None])
        fpfh[~lonely] += acc[~lonely] / counts[~lonely, None]
    fpfh[lonely] = 1.0
    feats = FeatureMatrix.from_raw(fpfh)
    if return_flags:
        return feats, lonely
    return feats


@dataclass(frozen=True)
class OracleNoiseSpec:
    """Controls for the ground-truth feature oracle.

    ``corruption_sigma`` is the standard deviation of the Gaussian noise
    added to every component of a unit target feature before it is
    renormalized. ``smooth_weight`` is the share of a feature that varies
    smoothly with position (over ``length_scale`` mm); the rest is a
    per-point random direction. The default is fully smooth: neighbouring
    points look alike and distant regions can resemble each other, as on a
    featureless organ surface.
    """

    feature_dim: int = 32
    corruption_sigma: float = 0.0
    seed: int = 0
    smooth_weight: float = 1.0
    length_scale: float = 30.0

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ParameterError("feature_dim must be positive")
        if self.corruption_sigma < 0:
            raise ParameterError("corruption_sigma must be non-negative")
        if not 0 <= self.smooth_weight <= 1:
            raise ParameterError("smooth_weight must lie in [0, 1]")
        if not self.length_scale > 0:
            raise ParameterError("length_scale must be positive")


class OracleField:
    """Fixed feature assignment over the source surface of one shape."""

    def __init__(self, spec: OracleNoiseSpec, n_source: int, stream: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream, 21]))
        d = spec.feature_dim
        self.spec = spec
        self.omega = rng.normal(0.0, 1.0 / spec.length_scale, size=(d, 3))
        self.phase = rng.uniform(0.0, 2 * np.pi, size=d)
        iid = rng.normal(size=(n_source, d))
        self.iid = iid / np.linalg.norm(iid, axis=1, keepdims=True)

    def smooth(self, x: ArrayLike) -> NDArray[np.float64]:
        g = np.cos(np.asarray(x, dtype=np.float64) @ self.omega.T + self.phase)
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        return g / np.where(norm > 0, norm, 1.0)

    def features(self, x: ArrayLike, vertex: ArrayLike) -> NDArray[np.float64]:
        s = self.spec.smooth_weight
        f = np.sqrt(s) * self.smooth(x) + np.sqrt(1 - s) * self.iid[np.asarray(vertex, dtype=np.int64)]
        return f / np.linalg.norm(f, axis=1, keepdims=True)


def oracle_descriptor(sample, spec: OracleNoiseSpec) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Ground-truth features for the raw source and target of a benchmark sample.

    A target point's feature is the oracle feature at the spot it was
    observed, expressed in source coordinates (its source correspondent
    displaced by the sample noise), plus isotropic Gaussian noise with
    standard deviation ``corruption_sigma`` per component, renormalized.
    """
    corr = getattr(sample, "correspondence", None)
    if corr is None:
        raise ParameterError("sample has no ground-truth correspondence map")
    corr = np.asarray(corr, dtype=np.int64)
    src_pts = sample.source.points
    field = OracleField(spec, len(src_pts), stream=sample.spec.shape_seed)
    xs = field.features(src_pts, np.arange(len(src_pts)))

    noise = getattr(sample, "noise", None)
    if noise is None or not np.any(noise):
        observed, vertex = src_pts[corr], corr
    else:
        observed = src_pts[corr] + noise
        _, vertex = cKDTree(src_pts).query(observed, k=1)
    xt = field.features(observed, vertex)
    if spec.corruption_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(
            [spec.seed, sample.spec.crop_seed, sample.spec.rigid_seed, 22]))
        xt = xt + spec.corruption_sigma * rng.normal(size=xt.shape)
        xt /= np.linalg.norm(xt, axis=1, keepdims=True)
    return FeatureMatrix(xs), FeatureMatrix(xt)


def pool_features(features: FeatureMatrix, inverse: ArrayLike, n_out: int) -> FeatureMatrix:
    """Average feature rows that fell into the same voxel, then renormalize."""
    inverse = np.asarray(inverse, dtype=np.int64)
    acc = np.zeros((n_out, features.dim))
    np.add.at(acc, inverse, features.values)
    return FeatureMatrix.from_raw(acc)
