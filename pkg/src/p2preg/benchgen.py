"""Synthetic complete-to-partial registration problems.

Organ-like test shapes are smooth star-convex blobs. Each sample deforms a
scaled blob with a Gaussian radial-basis displacement field, removes the
rigid part of that deformation using interior fiducials, crops a connected
patch of the deformed surface, perturbs it with uniform noise and moves it
by a random rigid transform. All randomness flows from explicit seeds kept
in the sample metadata, so any sample can be rebuilt bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterator

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import ConvexHull
from scipy.special import sph_harm_y

from .cloud import PointCloud, RigidTransform, SpatialIndex
from .errors import DeformationError, ParameterError
from .matching import procrustes

EXTENT_RANGE = (120.0, 200.0)
DEFAULT_VISIBILITY_RANGE = (0.2, 1.0)
VISIBILITY_BINS = 8
MAX_GRADIENT = 0.5


def _rng(*seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))


@dataclass(frozen=True)
class SyntheticMesh:
    vertices: NDArray[np.float64]
    faces: NDArray[np.int64]
    fiducials: NDArray[np.float64]
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        fid = np.array(self.fiducials, dtype=np.float64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
            raise ParameterError("vertices must be (V, 3) and faces (F, 3)")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ParameterError("face index out of range")
        for a in (v, f, fid):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "fiducials", fid)

    def with_geometry(self, vertices: ArrayLike, fiducials: ArrayLike, **params) -> "SyntheticMesh":
        return SyntheticMesh(vertices, self.faces, fiducials, {**self.params, **params})

    def extent(self) -> NDArray[np.float64]:
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)


def euler_characteristic(faces: ArrayLike, n_vertices: int) -> int:
    faces = np.asarray(faces)
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    n_edges = np.unique(edges, axis=0).shape[0]
    return n_vertices - n_edges + faces.shape[0]


def is_watertight(faces: ArrayLike) -> bool:
    """Every undirected edge shared by exactly two faces with opposite orientation."""
    faces = np.asarray(faces)
    directed = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    und = np.sort(directed, axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    if np.any(counts != 2):
        return False
    # consistent orientation: each directed edge appears once
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    return bool(np.all(dcounts == 1))


def winding_number(vertices: ArrayLike, faces: ArrayLike, points: ArrayLike) -> NDArray[np.float64]:
    """Generalized winding number of a closed triangle mesh at query points."""
    V = np.asarray(vertices, dtype=np.float64)
    F = np.asarray(faces)
    out = np.empty(len(points))
    for k, p in enumerate(np.asarray(points, dtype=np.float64)):
        a, b, c = V[F[:, 0]] - p, V[F[:, 1]] - p, V[F[:, 2]] - p
        la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
        num = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("ij,ij->i", a, b) * lc
               + np.einsum("ij,ij->i", b, c) * la + np.einsum("ij,ij->i", c, a) * lb)
        out[k] = 2.0 * np.arctan2(num, den).sum() / (4.0 * np.pi)
    return out


def _fibonacci_sphere(n: int) -> NDArray[np.float64]:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _sphere_triangulation(n: int) -> tuple[NDArray, NDArray]:
    dirs = _fibonacci_sphere(n)
    faces = ConvexHull(dirs).simplices.astype(np.int64)
    # orient every triangle outward
    a, b, c = dirs[faces[:, 0]], dirs[faces[:, 1]], dirs[faces[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return dirs, faces


def _real_harmonics(dirs: NDArray, lmax: int, lmin: int = 2) -> NDArray[np.float64]:
    """Real spherical harmonics of degrees lmin..lmax evaluated at unit vectors."""
    polar = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    azim = np.arctan2(dirs[:, 1], dirs[:, 0])
    cols = []
    for l in range(lmin, lmax + 1):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), polar, azim)
            if m > 0:
                cols.append(np.sqrt(2.0) * y.real)
            elif m < 0:
                cols.append(np.sqrt(2.0) * y.imag)
            else:
                cols.append(y.real)
    return np.column_stack(cols)


def _radial(dirs: NDArray, coeffs: NDArray, lmax: int) -> NDArray[np.float64]:
    if coeffs.size == 0:
        return np.ones(dirs.shape[0])
    return 1.0 + _real_harmonics(dirs, lmax) @ coeffs


def generate_shape(seed: int, harmonic_amplitude: float = 0.15, lmax: int = 4,
                   n_fiducials: int = 200) -> SyntheticMesh:
    """Smooth blob: an ellipsoid whose radius is modulated by low-order harmonics.

    Parameters
    ----------
    seed : int
    harmonic_amplitude : float
        Standard deviation of the radial modulation; 0 gives an exact
        ellipsoid.
    lmax : int
        Highest harmonic degree (degrees 2..lmax are used).
    n_fiducials : int
        Interior points drawn by rejection sampling.
    """
    rng = _rng(seed, 1)
    n_vertices = int(rng.integers(2000, 4001))
    semi_axes = rng.uniform(60.0, 100.0, size=3)
    n_coef = (lmax + 1) ** 2 - 4
    coeffs = np.zeros(0)
    if harmonic_amplitude > 0:
        coeffs = rng.normal(0.0, harmonic_amplitude, size=n_coef)
        coeffs /= np.sqrt(np.repeat(np.arange(2, lmax + 1), 2 * np.arange(2, lmax + 1) + 1))
    dirs, faces = _sphere_triangulation(n_vertices)
    r = _radial(dirs, coeffs, lmax)
    # keep the blob clearly star-shaped
    if r.min() < 0.6:
        coeffs *= 0.4 / (1.0 - r.min())
        r = _radial(dirs, coeffs, lmax)
    verts = r[:, None] * dirs * semi_axes
    largest = (verts.max(axis=0) - verts.min(axis=0)).max()
    scale = float(np.clip(largest, *EXTENT_RANGE) / largest)
    verts *= scale
    semi_axes = semi_axes * scale

    fiducials = np.empty((0, 3))
    while fiducials.shape[0] < n_fiducials:
        cand = rng.uniform(-1.0, 1.0, size=(4 * n_fiducials, 3)) * semi_axes * r.max()
        q = cand / semi_axes
        qn = np.linalg.norm(q, axis=1)
        inside = qn < 0.9 * _radial(q / np.maximum(qn, 1e-12)[:, None], coeffs, lmax)
        fiducials = np.vstack([fiducials, cand[inside]])
    fiducials = fiducials[:n_fiducials]
    params = {"seed": int(seed), "semi_axes": semi_axes.tolist(), "harmonic_amplitude": harmonic_amplitude}
    return SyntheticMesh(verts, faces, fiducials, params)


def scale_mesh(mesh: SyntheticMesh, factors: ArrayLike) -> SyntheticMesh:
    f = np.asarray(factors, dtype=np.float64).reshape(3)
    return mesh.with_geometry(mesh.vertices * f, mesh.fiducials * f, scale_factors=f.tolist())


def apply_scaling_augmentation(mesh: SyntheticMesh, seed: int) -> SyntheticMesh:
    """Scale each axis by an independent factor drawn from U[0.5, 1]."""
    return scale_mesh(mesh, _rng(seed, 2).uniform(0.5, 1.0, size=3))


def augment_copies(mesh: SyntheticMesh, seed: int, n: int = 10) -> list[SyntheticMesh]:
    return [apply_scaling_augmentation(mesh, int(s)) for s in _rng(seed, 3).integers(0, 2**31, size=n)]


@dataclass(frozen=True)
class DeformationSpec:
    """Gaussian-RBF displacement field parameters (lengths in mm)."""

    control_points: int = 6
    kernel_width: float = 40.0
    amplitude: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ParameterError("amplitude must be non-negative")
        if not self.kernel_width > 0:
            raise ParameterError("kernel width must be positive")
        if self.control_points < 1:
            raise ParameterError("need at least one control point")


@dataclass(frozen=True)
class DisplacementField:
    centers: NDArray[np.float64]
    weights: NDArray[np.float64]
    kernel_width: float

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=np.float64)
        d2 = ((x[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return np.exp(-d2 / (2 * self.kernel_width ** 2)) @ self.weights

    def jacobian(self, x: ArrayLike) -> NDArray[np.float64]:
        """(n, 3, 3) array of du_i/dx_j."""
        x = np.asarray(x, dtype=np.float64)
        diff = x[:, None, :] - self.centers[None]
        k = np.exp(-(diff ** 2).sum(-1) / (2 * self.kernel_width ** 2))
        return -np.einsum("nc,ci,ncj->nij", k, self.weights, diff) / self.kernel_width ** 2

    def max_gradient(self, x: ArrayLike) -> float:
        J = self.jacobian(x)
        if J.shape[0] == 0:
            return 0.0
        return float(np.linalg.norm(J, ord=2, axis=(1, 2)).max())

    def scaled(self, factor: float) -> "DisplacementField":
        return DisplacementField(self.centers, self.weights * factor, self.kernel_width)


def make_field(mesh: SyntheticMesh, spec: DeformationSpec) -> DisplacementField:
    rng = _rng(spec.seed, 4)
    centers = mesh.vertices[rng.choice(mesh.vertices.shape[0], size=spec.control_points, replace=False)]
    weights = rng.normal(size=(spec.control_points, 3)) * spec.amplitude
    return DisplacementField(centers, weights, float(spec.kernel_width))


def deform(mesh: SyntheticMesh, spec: DeformationSpec | DisplacementField) -> tuple[SyntheticMesh, DisplacementField]:
    """Displace vertices and fiducials by a smooth field.

    A field whose largest displacement gradient reaches 1 could fold the
    surface and is rejected; one between 0.5 and 1 is scaled down to 0.5.

    Raises
    ------
    DeformationError
        If the gradient bound is 1 or more.
    """
    u = spec if isinstance(spec, DisplacementField) else make_field(mesh, spec)
    pts = np.vstack([mesh.vertices, mesh.fiducials])
    g = u.max_gradient(pts)
    if g >= 1.0:
        raise DeformationError(
            f"displacement gradient {g:.3f} >= 1; lower the amplitude or widen the kernel and resample")
    guard = 1.0
    if g > MAX_GRADIENT:
        guard = MAX_GRADIENT * (1 - 1e-6) / g
        u = u.scaled(guard)
    out = mesh.with_geometry(mesh.vertices + u(mesh.vertices), mesh.fiducials + u(mesh.fiducials),
                             gradient_guard=guard)
    return out, u


def remove_rigid_component(undeformed_fiducials: ArrayLike, deformed: SyntheticMesh) -> tuple[SyntheticMesh, float]:
    """Align the deformed model back onto the undeformed one through its fiducials.

    Returns the aligned mesh and the fiducial RMS remaining after alignment (mm).
    """
    X = np.asarray(undeformed_fiducials, dtype=np.float64)
    Y = deformed.fiducials
    if X.shape != Y.shape or X.shape[0] < 3:
        raise ParameterError("need two equal-length fiducial sets of at least 3 points")
    T = procrustes(Y, X)
    fid = T.apply(Y)
    rms = float(np.sqrt(((fid - X) ** 2).sum(axis=1).mean()))
    return deformed.with_geometry(T.apply(deformed.vertices), fid), rms


def fiducial_rms(a: ArrayLike, b: ArrayLike) -> float:
    return float(np.sqrt(((np.asarray(a) - np.asarray(b)) ** 2).sum(axis=1).mean()))


def crop_visibility(surface: PointCloud | ArrayLike, ratio: float, seed: int) -> tuple[PointCloud, NDArray[np.int64]]:
    """Connected ball crop holding ``ceil(ratio * N)`` surface points.

    Returns the cropped cloud and, per cropped point, its index in ``surface``.
    """
    if not 0 < ratio <= 1:
        raise ParameterError(f"ratio must lie in (0, 1], got {ratio}")
    cloud = surface if isinstance(surface, PointCloud) else PointCloud(surface)
    n = len(cloud)
    m = min(n, max(1, math.ceil(ratio * n - 1e-9)))
    centre = int(_rng(seed, 5).integers(n))
    idx, _ = SpatialIndex(cloud).query(cloud.points[centre], m)
    return PointCloud(cloud.points[idx], None if cloud.normals is None else cloud.normals[idx], "target"), idx


def random_rigid(seed: int) -> RigidTransform:
    """Euler XYZ angles uniform on [0, 2pi], translation uniform on [-100, 100] mm."""
    rng = _rng(seed, 6)
    angles = rng.uniform(0.0, 2 * np.pi, size=3)
    return RigidTransform.from_euler(angles, rng.uniform(-100.0, 100.0, size=3))


def noise_offsets(n: int, level: float, seed: int) -> NDArray[np.float64]:
    if level < 0:
        raise ParameterError("noise level must be non-negative")
    return _rng(seed, 7).uniform(-0.5, 0.5, size=(n, 3)) * level


def add_noise(cloud: PointCloud, level: float, seed: int) -> PointCloud:
    """Perturb every coordinate by ``U[-0.5, 0.5] * level``."""
    if level == 0:
        return cloud
    return cloud.with_points(cloud.points + noise_offsets(len(cloud), level, seed))


@dataclass(frozen=True)
class SampleSpec:
    """Everything needed to rebuild one benchmark sample."""

    sample_id: str
    shape_seed: int
    augment_seed: int | None
    deformation: DeformationSpec
    ratio: float
    crop_seed: int
    noise_level: float
    noise_seed: int
    rigid_seed: int
    harmonic_amplitude: float = 0.15

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SampleSpec":
        d = dict(d)
        d["deformation"] = DeformationSpec(**d["deformation"])
        return cls(**d)


@dataclass(frozen=True)
class BenchmarkSample:
    """One complete-to-partial problem in millimetres.

    ``transform`` maps source coordinates onto the target; ``correspondence``
    gives, for every target point, the index of the source point it was
    cut from; ``noise`` holds the per-point perturbation applied before the
    rigid motion.
    """

    spec: SampleSpec
    source: PointCloud
    source_fiducials: NDArray[np.float64]
    target: PointCloud
    target_fiducials: NDArray[np.float64]
    transform: RigidTransform
    correspondence: NDArray[np.int64]
    noise: NDArray[np.float64]
    metadata: dict[str, Any]

    @property
    def sample_id(self) -> str:
        return self.spec.sample_id


def build_sample(spec: SampleSpec) -> BenchmarkSample:
    """Shape, scaling, deformation, rigid removal, crop, noise and rigid motion."""
    mesh = generate_shape(spec.shape_seed, spec.harmonic_amplitude)
    if spec.augment_seed is not None:
        mesh = apply_scaling_augmentation(mesh, spec.augment_seed)
    deformed, _ = deform(mesh, spec.deformation)
    deformed, rms = remove_rigid_component(mesh.fiducials, deformed)
    target, corr = crop_visibility(PointCloud(deformed.vertices), spec.ratio, spec.crop_seed)
    noise = noise_offsets(len(target), spec.noise_level, spec.noise_seed)
    G = random_rigid(spec.rigid_seed)
    target = PointCloud(G.apply(target.points + noise), role="target")
    n_src = mesh.vertices.shape[0]
    metadata = {
        "visibility": len(target) / n_src,
        "requested_visibility": spec.ratio,
        "deformation_rms": rms,
        "noise_level": spec.noise_level,
        "n_source": n_src,
        "n_target": len(target),
        "gradient_guard": deformed.params.get("gradient_guard", 1.0),
    }
    return BenchmarkSample(
        spec=spec,
        source=PointCloud(mesh.vertices, role="source"),
        source_fiducials=np.asarray(mesh.fiducials),
        target=target,
        target_fiducials=G.apply(deformed.fiducials),
        transform=G,
        correspondence=corr,
        noise=noise,
        metadata=metadata,
    )


@dataclass(frozen=True)
class SuiteConfig:
    """Grid of shapes x deformations x crops.

    Visibility ratios are stratified over ``VISIBILITY_BINS`` equal bins of
    ``visibility_range`` so every bin is populated evenly. The deformation
    amplitude of each sample is drawn uniformly from ``amplitude_range``.
    """

    n_shapes: int = 11
    n_deformations: int = 10
    n_crops: int = 5
    seed: int = 0
    noise_level: float = 0.0
    visibility_range: tuple[float, float] = DEFAULT_VISIBILITY_RANGE
    control_points: int = 6
    kernel_width: float = 40.0
    amplitude_range: tuple[float, float] = (1.0, 9.0)
    harmonic_amplitude: float = 0.15
    augment: bool = True

    @property
    def size(self) -> int:
        return self.n_shapes * self.n_deformations * self.n_crops

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["visibility_range"] = list(self.visibility_range)
        d["amplitude_range"] = list(self.amplitude_range)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SuiteConfig":
        d = dict(d)
        for k in ("visibility_range", "amplitude_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def sample_id(shape: int, deformation: int, crop: int) -> str:
    return f"s{shape:02d}_d{deformation:02d}_c{crop}"


def suite_specs(cfg: SuiteConfig = SuiteConfig()) -> Iterator[SampleSpec]:
    lo, hi = cfg.visibility_range
    width = (hi - lo) / VISIBILITY_BINS
    counter = 0
    for s in range(cfg.n_shapes):
        shape_seed = int(_rng(cfg.seed, 10, s).integers(2**31))
        for d in range(cfg.n_deformations):
            rng = _rng(cfg.seed, 11, s, d)
            augment_seed = int(rng.integers(2**31)) if cfg.augment else None
            dspec = DeformationSpec(cfg.control_points, cfg.kernel_width,
                                    float(rng.uniform(*cfg.amplitude_range)), int(rng.integers(2**31)))
            for c in range(cfg.n_crops):
                crng = _rng(cfg.seed, 12, s, d, c)
                b = counter % VISIBILITY_BINS
                ratio = float(min(hi, lo + width * (b + crng.uniform())))
                counter += 1
                yield SampleSpec(
                    sample_id=sample_id(s, d, c),
                    shape_seed=shape_seed,
                    augment_seed=augment_seed,
                    deformation=dspec,
                    ratio=ratio,
                    crop_seed=int(crng.integers(2**31)),
                    noise_level=cfg.noise_level,
                    noise_seed=int(crng.integers(2**31)),
                    rigid_seed=int(crng.integers(2**31)),
                    harmonic_amplitude=cfg.harmonic_amplitude,
                )


def with_noise(spec: SampleSpec, level: float) -> SampleSpec:
    """Same sample with a different noise level (identical noise draw, rescaled)."""
    return replace(spec, noise_level=float(level))
