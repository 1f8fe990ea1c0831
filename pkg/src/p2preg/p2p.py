"""Patches-to-partial registration.

A partial target usually covers a small region of the complete source, and
matching it against the whole source lets similar-looking distant regions
attract spurious correspondences. This module narrows the search: it ranks
source points by how strongly they resemble the target overall, seeds a few
well-spread patches of target size in the most likely visible region,
registers the target against each patch, and keeps whichever candidate
transform (baseline included) explains the target best.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .cloud import PointCloud, RigidTransform, SpatialIndex, farthest_point_sample
from .errors import DegenerateConfigurationError, NoCandidateError, ParameterError
from .features import FeatureMatrix, as_feature_array
from .matching import (
    CorrespondenceSet,
    MatchState,
    RegistrationResult,
    dual_softmax,
    match_and_estimate,
    match_state,
    mutual_nn_matches,
    score_matrix,
    weighted_svd,
)

SelectionRule = Literal["closest-distance", "inlier-count"]
Proposal = Literal["visible", "whole-surface"]


@dataclass(frozen=True)
class P2PConfig:
    """Settings of the patch module.

    ``tau`` is only used by the inlier rule and is in normalized units.
    ``temperature=None`` means ``1/sqrt(feature dim)``. ``proposal`` set to
    ``"whole-surface"`` seeds patches over the entire source instead of the
    likely visible region; it exists for ablation only.
    """

    K: int = 5
    selection: SelectionRule = "closest-distance"
    tau: float = 0.05
    temperature: float | None = None
    seed: int = 0
    proposal: Proposal = "visible"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ParameterError(f"K must be a positive integer, got {self.K}")
        if self.selection not in ("closest-distance", "inlier-count"):
            raise ParameterError(f"unknown selection rule {self.selection!r}")
        if not self.tau > 0:
            raise ParameterError("tau must be positive")
        if self.temperature is not None and not self.temperature > 0:
            raise ParameterError("temperature must be positive")
        if self.proposal not in ("visible", "whole-surface"):
            raise ParameterError(f"unknown proposal mode {self.proposal!r}")


@dataclass
class PatchCandidate:
    """A target-sized source patch; registration fills in the lower fields.

    ``correspondences`` index into the patch (``points``); use
    :meth:`full_correspondences` for indices into the whole source.
    """

    node: int
    members: NDArray[np.int64]
    points: PointCloud
    features: FeatureMatrix
    clamped: bool = False
    transform: RigidTransform | None = None
    correspondences: CorrespondenceSet | None = None
    score: float | None = None
    failed: bool = False
    failure: str | None = None

    @property
    def size(self) -> int:
        return int(self.members.shape[0])

    def full_correspondences(self, source: PointCloud) -> CorrespondenceSet:
        return self.correspondences.remap_source(self.members, source)


def visibility_scores(S: ArrayLike) -> NDArray[np.float64]:
    """Per-source-point sum of similarities over all target points."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.size == 0:
        raise ParameterError("score matrix must be a non-empty 2-D array")
    return S.sum(axis=1)


def select_visible(scores: ArrayLike, M: int) -> NDArray[np.int64]:
    """Indices of the ``min(M, N)`` highest scores; ties go to the lower index.

    The returned indices are ordered by decreasing score.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ParameterError("scores must be non-empty")
    if M < 1:
        raise ParameterError(f"M must be at least 1, got {M}")
    m = min(int(M), s.size)
    # stable sort on the negated scores keeps lower indices first among ties
    return np.argsort(-s, kind="stable")[:m].astype(np.int64)


def generate_patch_nodes(source: PointCloud, visible_idx: ArrayLike, K: int, seed: int = 0) -> NDArray[np.int64]:
    """Farthest-point sample ``K`` patch nodes from the visible subset."""
    visible_idx = np.asarray(visible_idx, dtype=np.int64)
    if K > visible_idx.size:
        raise ParameterError(f"cannot pick {K} nodes from {visible_idx.size} visible points")
    local = farthest_point_sample(source.points[visible_idx], K, seed)
    return visible_idx[local]


def sample_patch(source: PointCloud, index: SpatialIndex, node: int, M: int,
                 xS: FeatureMatrix | ArrayLike) -> PatchCandidate:
    """The ``M`` source points nearest to ``node`` together with their features.

    ``M`` larger than the source is clamped to the source size and flagged.
    """
    n = len(source)
    clamped = M > n
    m = min(int(M), n)
    members, _ = index.query(source.points[node], m)
    if node not in members:
        members = np.concatenate([[node], members[:-1]])
    feats = as_feature_array(xS)[members]
    return PatchCandidate(int(node), members, source.subset(members), FeatureMatrix(feats), clamped=clamped)


def _patch_confidence(state: MatchState, members: NDArray, col_sum: NDArray) -> NDArray:
    """Dual-softmax confidences of one patch, resampled from the full-source match.

    Rows of a patch score matrix are complete rows of the full one, so the
    row softmax carries over unchanged; only the column normalization is
    restricted to the patch rows.
    """
    out = state.confidence[members]
    out *= state.parts.col_sum / col_sum
    return out


def register_patches(patches: Sequence[PatchCandidate], xT: FeatureMatrix | ArrayLike, target: PointCloud,
                     temperature: float | None = None, state: MatchState | None = None) -> list[PatchCandidate]:
    """Match the target against every patch and fit a transform per patch.

    Patches with fewer than three mutual matches are marked failed; they
    never abort the run. When ``state`` from the full-source match is given
    the patch confidences are resampled from it instead of recomputed.
    """
    if not patches:
        raise ParameterError("need at least one patch")
    xt = as_feature_array(xT)
    if temperature is None:
        temperature = state.temperature if state is not None else 1.0 / np.sqrt(xt.shape[1])
    col_sums = None
    if state is not None:
        W = np.zeros((len(patches), state.scores.shape[0]))
        for k, p in enumerate(patches):
            W[k, p.members] = 1.0
        col_sums = W @ state.parts.col_exp
    for k, p in enumerate(patches):
        if col_sums is not None and np.all(col_sums[k] > 0):
            M = _patch_confidence(state, p.members, col_sums[k])
        else:
            M = dual_softmax(score_matrix(p.features, xt), temperature)
        p.correspondences = mutual_nn_matches(M, p.points, target)
        p.transform, p.failed, p.failure = None, False, None
        if len(p.correspondences) < 3:
            p.failed, p.failure = True, f"only {len(p.correspondences)} mutual matches"
            continue
        try:
            p.transform = weighted_svd(p.correspondences)
        except DegenerateConfigurationError as exc:
            p.failed, p.failure = True, str(exc)
    return list(patches)


def select_by_inliers(candidates: Sequence[RigidTransform], C_all: CorrespondenceSet, tau: float) -> int:
    """Index of the candidate with the most correspondences closer than ``tau``."""
    if not candidates:
        raise ParameterError("need at least one candidate")
    if len(C_all) == 0:
        raise ParameterError("combined correspondence set is empty")
    P, Q = C_all.source_points, C_all.target_points
    counts = inlier_counts(candidates, P, Q, tau)
    return int(np.argmax(counts))


def inlier_counts(candidates: Sequence[RigidTransform], P: NDArray, Q: NDArray, tau: float) -> NDArray[np.int64]:
    return np.array([int((np.linalg.norm(T.apply(P) - Q, axis=1) < tau).sum()) for T in candidates])


def closest_distances(candidates: Sequence[RigidTransform], source: PointCloud, target: PointCloud,
                      index: SpatialIndex | None = None) -> NDArray:
    """Mean distance from the target points to each transformed source.

    Rigid maps preserve distances, so the target is pulled back by each
    inverse transform and queried against a single tree over the source.
    """
    index = index or SpatialIndex(source)
    return np.array([index.nearest_distance(T.inverse().apply(target.points)).mean() for T in candidates])


def select_by_closest_distance(candidates: Sequence[RigidTransform], source: PointCloud, target: PointCloud) -> int:
    """Index of the candidate whose transformed source lies closest to the target."""
    if not candidates:
        raise ParameterError("need at least one candidate")
    return int(np.argmin(closest_distances(candidates, source, target)))


def union_correspondences(sets: Sequence[CorrespondenceSet], source: PointCloud, target: PointCloud) -> CorrespondenceSet:
    """Merge correspondence sets; a pair seen twice keeps its larger weight."""
    sets = [c for c in sets if c is not None and len(c)]
    if not sets:
        return CorrespondenceSet.empty(source, target)
    si = np.concatenate([c.source_idx for c in sets])
    ti = np.concatenate([c.target_idx for c in sets])
    w = np.concatenate([c.weights for c in sets])
    key = si * len(target) + ti
    order = np.lexsort((-w, key))
    key, si, ti, w = key[order], si[order], ti[order], w[order]
    first = np.ones(key.size, dtype=bool)
    first[1:] = key[1:] != key[:-1]
    return CorrespondenceSet(si[first], ti[first], w[first], source, target)


def p2p_register(source: PointCloud, target: PointCloud, xS: FeatureMatrix | ArrayLike,
                 xT: FeatureMatrix | ArrayLike, config: P2PConfig = P2PConfig()) -> RegistrationResult:
    """Baseline registration refined by patch candidates and a selection rule.

    Candidate 0 is always the baseline full-source estimate, followed by
    the successful patches ordered by node index.

    Raises
    ------
    NoCandidateError
        When the baseline and every patch fail.
    """
    xs, xt = as_feature_array(xS), as_feature_array(xT)
    if xs.shape[0] != len(source) or xt.shape[0] != len(target):
        raise ParameterError("feature rows must match cloud sizes")
    t0 = time.perf_counter()
    state = match_state(xs, xt, config.temperature)
    baseline = None
    baseline_error = None
    try:
        baseline = match_and_estimate(xs, xt, source, target, state=state)
    except DegenerateConfigurationError as exc:
        baseline_error = str(exc)
    t1 = time.perf_counter()

    m = len(target)
    if config.proposal == "visible":
        visible = select_visible(visibility_scores(state.scores), m)
    else:
        visible = np.arange(len(source), dtype=np.int64)
    K = min(config.K, visible.size)
    nodes = generate_patch_nodes(source, visible, K, config.seed)
    index = SpatialIndex(source)
    patches = [sample_patch(source, index, int(n), m, xs) for n in sorted(nodes)]
    patches = register_patches(patches, xt, target, state.temperature, state=state)

    names, transforms, corrs, nodes_out = [], [], [], []
    if baseline is not None:
        names.append("baseline")
        transforms.append(baseline.transform)
        corrs.append(baseline.correspondences)
        nodes_out.append(None)
    for p in patches:
        if not p.failed:
            names.append(f"patch{p.node}")
            transforms.append(p.transform)
            corrs.append(p.full_correspondences(source))
            nodes_out.append(p.node)
    if not transforms:
        raise NoCandidateError("baseline and all patches failed")

    if config.selection == "closest-distance":
        scores = closest_distances(transforms, source, target, index)
        chosen = int(np.argmin(scores))
    else:
        c_all = union_correspondences(corrs, source, target)
        scores = inlier_counts(transforms, c_all.source_points, c_all.target_points, config.tau).astype(float)
        chosen = int(np.argmax(scores))
    t2 = time.perf_counter()

    diagnostics = {
        "selection_rule": config.selection,
        "proposal": config.proposal,
        "K": config.K,
        "K_used": K,
        "patch_size": m,
        "patch_clamped": bool(patches[0].clamped),
        "n_candidates": len(transforms),
        "candidates": [
            {"name": nm, "node": nd, "n_correspondences": len(c), "score": float(sc)}
            for nm, nd, c, sc in zip(names, nodes_out, corrs, scores)
        ],
        "failed_patches": [{"node": p.node, "reason": p.failure} for p in patches if p.failed],
        "baseline_failed": baseline is None,
        "baseline_error": baseline_error,
        "selected_index": chosen,
        "selected": names[chosen],
        "timing": {"baseline_s": t1 - t0, "module_s": t2 - t1},
    }
    return RegistrationResult(transforms[chosen], corrs[chosen], diagnostics)
