"""Glue between benchmark samples and the registrars.

Raw samples are in millimetres. Registration runs on the normalized and
voxelized pair; transforms are converted back to millimetres before any
error is measured.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any


from .baselines import IcpConfig, RansacConfig, icp_detailed, ransac_detailed
from .benchgen import BenchmarkSample
from .cloud import NormalizationInfo, PointCloud, RigidTransform, normalize_pair, voxel_downsample
from .descriptors import (
    OracleNoiseSpec,
    compute_local_descriptor,
    estimate_normals,
    oracle_descriptor,
    pool_features,
)
from .errors import ParameterError, RegistrationError
from .evaluation import EvalRecord, procrustes_reference, rms_tre
from .features import FeatureMatrix
from .matching import match_and_estimate
from .p2p import P2PConfig, p2p_register

METHODS = ("baseline", "p2p", "icp", "ransac", "procrustes")
DEFAULT_VOXEL = 0.04
DESCRIPTOR_KINDS = ("oracle", "local", "cached")
# ungated ICP from a complete source onto a partial target drags the fit toward the target
DEFAULT_ICP = IcpConfig(max_iterations=50, max_correspondence_distance=0.05)


@dataclass(frozen=True)
class DescriptorConfig:
    """Which features to feed the matcher.

    ``kind`` is ``"oracle"`` (ground-truth derived), ``"local"``
    (histogram descriptor on estimated normals, radius in normalized units)
    or ``"cached"`` (per-point features supplied by the caller, usually
    read from a feature cache).
    """

    kind: str = "oracle"
    oracle: OracleNoiseSpec = OracleNoiseSpec(corruption_sigma=0.3)
    normal_k: int = 12
    radius: float = 0.15
    dim: int = 33

    def __post_init__(self):
        if self.kind not in DESCRIPTOR_KINDS:
            raise ParameterError(f"unknown descriptor kind {self.kind!r}")


@dataclass
class PreparedPair:
    sample: BenchmarkSample
    source: PointCloud
    target: PointCloud
    xS: FeatureMatrix
    xT: FeatureMatrix
    info: NormalizationInfo


def prepare(sample: BenchmarkSample, voxel_size: float = DEFAULT_VOXEL,
            descriptor: DescriptorConfig = DescriptorConfig(),
            features: tuple[FeatureMatrix, FeatureMatrix] | None = None) -> PreparedPair:
    """Normalize by the source, voxelize both clouds and attach features.

    Per-point features (oracle or ``features`` for the cached kind) are
    averaged over each voxel; local descriptors are computed on the voxels.
    """
    src, tgt, info = normalize_pair(sample.source, sample.target)
    src_v, src_inv = voxel_downsample(src, voxel_size, return_inverse=True)
    tgt_v, tgt_inv = voxel_downsample(tgt, voxel_size, return_inverse=True)
    if descriptor.kind == "cached" and features is None:
        raise ParameterError("descriptor kind 'cached' needs precomputed features")
    if descriptor.kind in ("oracle", "cached"):
        fs, ft = oracle_descriptor(sample, descriptor.oracle) if features is None else features
        if fs.rows != len(src) or ft.rows != len(tgt):
            raise ParameterError(f"feature rows {fs.rows}/{ft.rows} do not match clouds {len(src)}/{len(tgt)}")
        xS = pool_features(fs, src_inv, len(src_v))
        xT = pool_features(ft, tgt_inv, len(tgt_v))
    else:
        src_v = estimate_normals(src_v, min(descriptor.normal_k, len(src_v)))
        tgt_v = estimate_normals(tgt_v, min(descriptor.normal_k, len(tgt_v)))
        xS = compute_local_descriptor(src_v, descriptor.radius, descriptor.dim)
        xT = compute_local_descriptor(tgt_v, descriptor.radius, descriptor.dim)
    return PreparedPair(sample, src_v, tgt_v, xS, xT, info)


@dataclass
class MethodResult:
    method: str
    transform: RigidTransform | None
    transform_normalized: RigidTransform | None
    runtime: float
    diagnostics: dict[str, Any] = field(default_factory=dict)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.transform is None


def run_method(pair: PreparedPair, method: str, p2p: P2PConfig = P2PConfig(),
               icp_cfg: IcpConfig = DEFAULT_ICP, ransac: RansacConfig = RansacConfig(),
               icp_init: str = "identity", temperature: float | None = None) -> MethodResult:
    """Run one registrar on a prepared pair; registration errors are captured.

    ``icp_init`` is ``"identity"`` or ``"ground-truth"``.
    """
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    t0 = time.perf_counter()
    diag: dict[str, Any] = {}
    try:
        if method == "baseline":
            res = match_and_estimate(pair.xS, pair.xT, pair.source, pair.target, temperature)
            T, diag = res.transform, res.diagnostics
        elif method == "p2p":
            res = p2p_register(pair.source, pair.target, pair.xS, pair.xT, p2p)
            T, diag = res.transform, res.diagnostics
        elif method == "icp":
            if icp_init == "ground-truth":
                T0 = pair.info.transform_from_mm(pair.sample.transform)
            elif icp_init == "identity":
                T0 = RigidTransform.identity()
            else:
                raise ParameterError(f"unknown icp init {icp_init!r}")
            r = icp_detailed(pair.source, pair.target, T0, icp_cfg)
            T = r.transform
            diag = {"iterations": r.iterations, "residual": r.residual, "converged": r.converged}
        elif method == "ransac":
            corr = match_and_estimate(pair.xS, pair.xT, pair.source, pair.target, temperature).correspondences
            r = ransac_detailed(corr, pair.source, pair.target, ransac)
            T = r.transform
            diag = {"inliers": r.best_count, "max_hypothesis_inliers": max(r.hypothesis_counts)}
        else:
            X, Y = pair.sample.source_fiducials, pair.sample.target_fiducials
            T_mm, _ = procrustes_reference(X, Y)
            return MethodResult(method, T_mm, pair.info.transform_from_mm(T_mm), time.perf_counter() - t0, {})
    except RegistrationError as exc:
        return MethodResult(method, None, None, time.perf_counter() - t0, diag, f"{type(exc).__name__}: {exc}")
    return MethodResult(method, pair.info.transform_to_mm(T), T, time.perf_counter() - t0, diag)


def evaluate(pair: PreparedPair, result: MethodResult) -> EvalRecord:
    s = pair.sample
    err = None if result.failed else rms_tre(result.transform, s.source_fiducials, s.target_fiducials)
    return EvalRecord(
        sample_id=s.sample_id,
        method=result.method,
        rms_tre=err,
        runtime=result.runtime,
        visibility=float(s.metadata["visibility"]),
        noise_level=float(s.metadata["noise_level"]),
        deformation_rms=float(s.metadata["deformation_rms"]),
        failed=result.failed,
        diagnostics=result.diagnostics,
    )
