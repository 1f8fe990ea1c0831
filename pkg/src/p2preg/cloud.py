"""Point-cloud containers, rigid transforms, spatial indexing and preprocessing.

Everything here is immutable after construction: arrays handed to the
dataclasses are copied and flagged read-only, so clouds and transforms can be
shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import ParameterError, ScaleZeroError, StateError

Role = Literal["source", "target"]

ORTHO_TOL = 1e-9


def _frozen(a: ArrayLike, dtype=np.float64) -> NDArray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3-D points with optional unit normals.

    Parameters
    ----------
    points : (N, 3) array
        Coordinates, millimetres for raw data or normalized units after
        :func:`normalize_pair`.
    normals : (N, 3) array, optional
        Unit normals, one per point.
    role : {"source", "target"}
        Whether the cloud is the complete or the partial side of a pair.
    """

    points: NDArray[np.float64]
    normals: NDArray[np.float64] | None = None
    role: Role = "source"

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ParameterError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ParameterError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ParameterError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _frozen(self.normals)
            if nrm.shape != pts.shape:
                raise ParameterError("normals must match points in shape")
            if not np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-6, rtol=0):
                raise ParameterError("normals must be unit length")
            object.__setattr__(self, "normals", nrm)
        if self.role not in ("source", "target"):
            raise ParameterError(f"unknown role {self.role!r}")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx: ArrayLike) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals, self.role)

    def with_points(self, points: ArrayLike) -> "PointCloud":
        return PointCloud(points, self.normals, self.role)

    def with_normals(self, normals: ArrayLike | None) -> "PointCloud":
        return PointCloud(self.points, normals, self.role)

    def with_role(self, role: Role) -> "PointCloud":
        return PointCloud(self.points, self.normals, role)


def as_points(cloud: PointCloud | ArrayLike) -> NDArray[np.float64]:
    """Coordinates of a cloud, or an (N, 3) array passed through."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ParameterError(f"expected an (N, 3) array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class RigidTransform:
    """Proper rotation plus translation, acting as ``p -> R @ p + t``."""

    rotation: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    translation: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ParameterError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ParameterError("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise ParameterError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ParameterError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike, orthonormalize: bool = False) -> "RigidTransform":
        """Build from a 3x4 or 4x4 matrix.

        With ``orthonormalize`` the rotation block is projected onto SO(3),
        which is needed for matrices read back from rounded text.
        """
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise ParameterError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        R = m[:3, :3]
        if orthonormalize:
            U, _, Vt = np.linalg.svd(R)
            D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
            R = U @ D @ Vt
        return cls(R, m[:3, 3])

    @classmethod
    def from_euler(cls, angles: Sequence[float], translation: ArrayLike, seq: str = "xyz") -> "RigidTransform":
        R = Rotation.from_euler(seq, angles).as_matrix()
        return cls(R, translation)

    def matrix34(self) -> NDArray[np.float64]:
        return np.hstack([self.rotation, self.translation[:, None]])

    def matrix44(self) -> NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :4] = self.matrix34()
        return m

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``first`` and then ``self``."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def rotation_angle(self) -> float:
        """Rotation angle in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def to_list(self) -> list[list[float]]:
        return self.matrix34().tolist()


def compose(second: RigidTransform, first: RigidTransform) -> RigidTransform:
    """``second`` after ``first``."""
    return second.compose(first)


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    """Map every point through ``T``; normals are only rotated."""
    pts = T.apply(cloud.points)
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ T.rotation.T
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals, cloud.role)


@dataclass(frozen=True)
class NormalizationInfo:
    """Affine map from millimetres to normalized units: ``(p - centroid) / scale``."""

    centroid: NDArray[np.float64]
    scale: float

    def __post_init__(self):
        c = _frozen(self.centroid).reshape(-1)
        if c.shape != (3,):
            raise ParameterError("centroid must be a 3-vector")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ParameterError("scale must be positive")
        object.__setattr__(self, "centroid", c)
        object.__setattr__(self, "scale", float(self.scale))

    def normalize(self, points: ArrayLike) -> NDArray[np.float64]:
        return (np.asarray(points, dtype=np.float64) - self.centroid) / self.scale

    def denormalize(self, points: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(points, dtype=np.float64) * self.scale + self.centroid

    def transform_to_mm(self, T: RigidTransform) -> RigidTransform:
        """Express a transform estimated between normalized clouds in millimetres.

        Both clouds share one normalization, so the rotation is unchanged and
        only the translation picks up the centroid and scale.
        """
        R = T.rotation
        t = self.scale * T.translation + self.centroid - R @ self.centroid
        return RigidTransform(R, t)

    def transform_from_mm(self, T: RigidTransform) -> RigidTransform:
        R = T.rotation
        t = (T.translation + R @ self.centroid - self.centroid) / self.scale
        return RigidTransform(R, t)


def normalize_pair(source: PointCloud, target: PointCloud) -> tuple[PointCloud, PointCloud, NormalizationInfo]:
    """Center the source at the origin and scale it into the unit sphere.

    The target is shifted by the source centroid and divided by the same
    factor, so the pair keeps its relative geometry.

    Raises
    ------
    ScaleZeroError
        If every source point coincides.
    """
    centroid = source.points.mean(axis=0)
    scale = float(np.linalg.norm(source.points - centroid, axis=1).max())
    if not scale > 0:
        raise ScaleZeroError("source points are all identical; cannot scale")
    info = NormalizationInfo(centroid, scale)
    src = PointCloud(info.normalize(source.points), source.normals, source.role)
    tgt = PointCloud(info.normalize(target.points), target.normals, target.role)
    return src, tgt, info


def voxel_downsample(cloud: PointCloud, voxel_size: float, return_inverse: bool = False):
    """Replace the points of every occupied voxel by their centroid.

    Voxels are aligned to the origin of the coordinate frame. Output points
    are ordered by voxel key, so the result does not depend on input order.

    Parameters
    ----------
    cloud : PointCloud
    voxel_size : float
        Edge length of the cubic cells, in the cloud's units.
    return_inverse : bool
        Also return, for every input point, the index of its output point.

    Returns
    -------
    PointCloud or (PointCloud, ndarray)
    """
    if not (np.isfinite(voxel_size) and voxel_size > 0):
        raise ParameterError(f"voxel_size must be positive, got {voxel_size}")
    pts = cloud.points
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_out = counts.shape[0]
    sums = np.zeros((n_out, 3))
    np.add.at(sums, inverse, pts)
    centroids = sums / counts[:, None]
    # single-point cells reproduce the input exactly, which keeps the op idempotent
    single = counts[inverse] == 1
    centroids[inverse[single]] = pts[single]
    normals = None
    if cloud.normals is not None:
        nsum = np.zeros((n_out, 3))
        np.add.at(nsum, inverse, cloud.normals)
        norm = np.linalg.norm(nsum, axis=1, keepdims=True)
        if np.all(norm > 1e-12):
            normals = nsum / norm
            normals[inverse[single]] = cloud.normals[single]
    out = PointCloud(centroids, normals, cloud.role)
    if return_inverse:
        return out, inverse
    return out


class SpatialIndex:
    """Exact k-nearest-neighbour search over a fixed point set.

    Backed by a k-d tree. Results are re-ranked with explicitly computed
    Euclidean distances so that ordering, including ties (lower index
    first), is identical to a brute-force scan.
    """

    def __init__(self, cloud: PointCloud | ArrayLike):
        pts = np.array(as_points(cloud), dtype=np.float64, copy=True)
        pts.setflags(write=False)
        self._points = pts
        self._tree = cKDTree(pts) if pts.shape[0] else None

    @property
    def points(self) -> NDArray[np.float64]:
        return self._points

    def __len__(self) -> int:
        return self._points.shape[0]

    def _distances(self, q: NDArray, idx: NDArray) -> NDArray:
        return np.sqrt(((self._points[idx] - q) ** 2).sum(axis=1))

    def query(self, query: ArrayLike, k: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        if self._tree is None:
            raise StateError("spatial index is empty")
        n = len(self)
        if not 1 <= k <= n:
            raise ParameterError(f"k must lie in [1, {n}], got {k}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        if k == n:
            cand = np.arange(n)
        else:
            d_tree, _ = self._tree.query(q, k=k)
            radius = float(np.atleast_1d(d_tree)[-1])
            # widen slightly so tree rounding cannot hide a tied point
            cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
        d = self._distances(q, cand)
        order = np.lexsort((cand, d))[:k]
        return cand[order].astype(np.int64), d[order]

    def nearest_distance(self, queries: ArrayLike) -> NDArray[np.float64]:
        """Distance from each query to its closest indexed point."""
        if self._tree is None:
            raise StateError("spatial index is empty")
        d, _ = self._tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return np.asarray(d, dtype=np.float64)

    def nearest(self, queries: ArrayLike) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        if self._tree is None:
            raise StateError("spatial index is empty")
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return np.asarray(i, dtype=np.int64), np.asarray(d, dtype=np.float64)

    def radius(self, query: ArrayLike, r: float) -> NDArray[np.int64]:
        if self._tree is None:
            raise StateError("spatial index is empty")
        return np.sort(np.asarray(self._tree.query_ball_point(np.asarray(query, dtype=np.float64), r), dtype=np.int64))


def nearest_neighbors(index: SpatialIndex, query: ArrayLike, k: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """The ``k`` indexed points closest to ``query``, ascending by distance."""
    return index.query(query, k)


def farthest_point_sample(cloud: PointCloud | ArrayLike, k: int, seed: int = 0) -> NDArray[np.int64]:
    """Greedy farthest-point sampling.

    With ``seed == 0`` the walk starts at the point farthest from the
    centroid; any other seed draws the start index uniformly. Distance ties
    go to the lower index.
    """
    pts = as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in [1, {n}], got {k}")
    if seed == 0:
        start = int(np.argmax(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    else:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    mind = np.sqrt(((pts - pts[start]) ** 2).sum(axis=1))
    mind[start] = -1.0
    for s in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[s] = nxt
        mind = np.minimum(mind, np.sqrt(((pts - pts[nxt]) ** 2).sum(axis=1)))
        mind[chosen[: s + 1]] = -1.0
    return chosen
