import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_rotation
from p2preg.cloud import PointCloud, RigidTransform, SpatialIndex
from p2preg.errors import NoCandidateError, ParameterError
from p2preg.features import FeatureMatrix
from p2preg.matching import CorrespondenceSet, dual_softmax, match_state, mutual_nn_matches, score_matrix
from p2preg.p2p import (
    P2PConfig,
    PatchCandidate,
    closest_distances,
    generate_patch_nodes,
    inlier_counts,
    p2p_register,
    register_patches,
    sample_patch,
    select_by_closest_distance,
    select_by_inliers,
    select_visible,
    union_correspondences,
    visibility_scores,
)


def _features(rng, n, d=16):
    return FeatureMatrix.from_raw(rng.normal(size=(n, d)))


def _crop_problem(rng, n=400, m=100):
    """Source cloud, exact features and a rigidly moved ball crop as target."""
    src = PointCloud(rng.uniform(-1, 1, size=(n, 3)))
    xs = _features(rng, n)
    center = int(rng.integers(n))
    members, _ = SpatialIndex(src).query(src.points[center], m)
    T = RigidTransform(Rotation.from_euler("xyz", [0.4, -0.3, 0.2]).as_matrix(), [0.1, 0.2, -0.1])
    tgt = PointCloud(T.apply(src.points[members]), role="target")
    return src, xs, tgt, xs.take(members), T, center, members


class TestVisibility:
    def test_constant_matrix(self):
        np.testing.assert_allclose(visibility_scores(np.full((4, 6), 0.25)), np.full(4, 1.5))

    def test_orthogonal_row_scores_zero(self):
        xs = FeatureMatrix(np.eye(3))
        xt = FeatureMatrix(np.eye(3)[1:])
        assert visibility_scores(score_matrix(xs, xt))[0] == 0.0

    def test_row_sums(self, rng):
        S = rng.uniform(-1, 1, size=(40, 30))
        expected = [sum(S[i, j] for j in range(30)) for i in range(40)]
        np.testing.assert_allclose(visibility_scores(S), expected, atol=1e-12)

    def test_select_visible_examples(self):
        assert select_visible([3.0, 1.0, 2.0], 2).tolist() == [0, 2]
        assert sorted(select_visible([3.0, 1.0, 2.0], 3).tolist()) == [0, 1, 2]
        assert select_visible([1.0, 1.0, 1.0, 0.0], 2).tolist() == [0, 1]
        assert len(select_visible([1.0, 2.0], 10)) == 2

    def test_select_visible_matches_full_sort(self):
        for trial in range(20):
            s = np.random.default_rng(trial).uniform(size=1000)
            if trial % 2:
                s = np.round(s, 1)
            ranked = sorted(range(1000), key=lambda i: (-s[i], i))
            assert select_visible(s, 250).tolist() == ranked[:250]

    def test_select_visible_rejects_bad_m(self):
        with pytest.raises(ParameterError):
            select_visible([1.0], 0)


class TestPatchNodes:
    def test_single_node_is_fps_start(self, rng):
        src = PointCloud(rng.normal(size=(50, 3)))
        vis = np.arange(10, 30)
        sub = src.points[vis]
        start = vis[np.argmax(np.linalg.norm(sub - sub.mean(0), axis=1))]
        assert generate_patch_nodes(src, vis, 1).tolist() == [start]

    def test_two_clusters_get_one_node_each(self, rng):
        a = rng.normal(size=(5, 3)) * 0.1
        b = rng.normal(size=(5, 3)) * 0.1 + [10.0, 0, 0]
        src = PointCloud(np.vstack([a, b]))
        nodes = generate_patch_nodes(src, np.arange(10), 2)
        assert {int(n) // 5 for n in nodes} == {0, 1}

    def test_all_visible(self, rng):
        src = PointCloud(rng.normal(size=(20, 3)))
        vis = np.array([3, 7, 11, 19])
        assert sorted(generate_patch_nodes(src, vis, 4).tolist()) == vis.tolist()

    def test_too_many_nodes(self, rng):
        with pytest.raises(ParameterError):
            generate_patch_nodes(PointCloud(rng.normal(size=(5, 3))), [0, 1], 3)


class TestSamplePatch:
    def test_whole_source(self, rng):
        src = PointCloud(rng.normal(size=(30, 3)))
        p = sample_patch(src, SpatialIndex(src), 4, 30, _features(rng, 30))
        assert sorted(p.members.tolist()) == list(range(30)) and not p.clamped

    def test_line_end(self):
        src = PointCloud(np.outer(np.arange(6.0), [1, 0, 0]))
        p = sample_patch(src, SpatialIndex(src), 0, 3, FeatureMatrix(np.tile([1.0, 0.0], (6, 1))))
        assert p.members.tolist() == [0, 1, 2]

    def test_matches_brute_force_knn(self, rng):
        src = PointCloud(rng.normal(size=(400, 3)))
        xs = _features(rng, 400)
        index = SpatialIndex(src)
        for node in rng.choice(400, 5, replace=False):
            p = sample_patch(src, index, int(node), 100, xs)
            d = np.linalg.norm(src.points - src.points[node], axis=1)
            np.testing.assert_array_equal(p.members, np.lexsort((np.arange(400), d))[:100])
            np.testing.assert_array_equal(p.features.values, xs.values[p.members])
            assert node in p.members

    def test_clamped(self, rng):
        src = PointCloud(rng.normal(size=(10, 3)))
        p = sample_patch(src, SpatialIndex(src), 0, 25, _features(rng, 10))
        assert p.clamped and p.size == 10


class TestRegisterPatches:
    def test_exact_cover_recovers_ground_truth(self, rng):
        src, xs, tgt, xt, T, center, members = _crop_problem(rng)
        p = sample_patch(src, SpatialIndex(src), center, len(members), xs)
        (out,) = register_patches([p], xt, tgt)
        assert not out.failed
        np.testing.assert_allclose(out.transform.matrix44(), T.matrix44(), atol=1e-6)

    def test_adversarial_patch_fails_in_isolation(self, rng):
        src, xs, tgt, xt, T, center, members = _crop_problem(rng)
        good = sample_patch(src, SpatialIndex(src), center, len(members), xs)
        flat = FeatureMatrix(np.tile(xs.values[0], (len(members), 1)))
        bad = PatchCandidate(0, members, src.subset(members), flat)
        out = register_patches([bad, good], xt, tgt)
        assert out[0].failed and "mutual" in out[0].failure
        assert not out[1].failed

    def test_fast_path_matches_recomputed_confidences(self, rng):
        src = PointCloud(rng.normal(size=(120, 3)))
        xs, xt = _features(rng, 120, 8), _features(rng, 40, 8)
        tgt = PointCloud(rng.normal(size=(40, 3)))
        state = match_state(xs, xt)
        index = SpatialIndex(src)
        nodes = [3, 50, 90]
        fast = register_patches([sample_patch(src, index, n, 40, xs) for n in nodes], xt, tgt, state=state)
        for p in fast:
            M = dual_softmax(score_matrix(p.features, xt), state.temperature)
            ref = mutual_nn_matches(M, p.points, tgt)
            np.testing.assert_array_equal(p.correspondences.source_idx, ref.source_idx)
            np.testing.assert_array_equal(p.correspondences.target_idx, ref.target_idx)
            np.testing.assert_allclose(p.correspondences.weights, ref.weights, rtol=1e-10)


class TestSelection:
    def _clouds(self, rng, n=300, m=120):
        src = PointCloud(rng.normal(size=(n, 3)))
        tgt = PointCloud(rng.normal(size=(m, 3)), role="target")
        return src, tgt

    def test_closest_distance_matches_brute_force(self):
        for trial in range(20):
            rng = np.random.default_rng(trial)
            src, tgt = self._clouds(rng)
            cands = [RigidTransform(random_rotation(rng), rng.normal(size=3) * 0.3) for _ in range(6)]
            scores = []
            for T in cands:
                moved = T.apply(src.points)
                scores.append(np.mean([np.min(np.linalg.norm(moved - q, axis=1)) for q in tgt.points]))
            np.testing.assert_allclose(closest_distances(cands, src, tgt), scores, atol=1e-12)
            assert select_by_closest_distance(cands, src, tgt) == int(np.argmin(scores))

    def test_overlay_beats_displaced_candidate(self, rng):
        src, xs, tgt, xt, T, *_ = _crop_problem(rng)
        off = RigidTransform(T.rotation, T.translation + [0.3, 0, 0])
        d = closest_distances([off, T], src, tgt)
        assert d[1] < 1e-12 < d[0]
        assert select_by_closest_distance([off, T], src, tgt) == 1

    def test_identical_candidates_pick_first(self, rng):
        src, tgt = self._clouds(rng)
        T = RigidTransform(random_rotation(rng))
        assert select_by_closest_distance([T, T, T], src, tgt) == 0

    def test_inliers_match_brute_force(self):
        for trial in range(20):
            rng = np.random.default_rng(100 + trial)
            src, tgt = self._clouds(rng, 200, 80)
            corr = CorrespondenceSet(rng.permutation(200)[:60], rng.permutation(80)[:60],
                                     rng.uniform(0.1, 1, 60), src, tgt)
            cands = [RigidTransform(random_rotation(rng), rng.normal(size=3) * 0.2) for _ in range(6)]
            counts = [sum(np.linalg.norm(T.apply(src.points[i][None])[0] - tgt.points[j]) < 0.8
                          for i, j, _ in corr.pairs()) for T in cands]
            assert inlier_counts(cands, corr.source_points, corr.target_points, 0.8).tolist() == counts
            best = max(counts)
            assert select_by_inliers(cands, corr, 0.8) == counts.index(best)

    def test_ground_truth_beats_rotated_candidate(self, rng):
        src, xs, tgt, xt, T, center, members = _crop_problem(rng)
        corr = CorrespondenceSet(members, np.arange(len(members)), np.ones(len(members)), src, tgt)
        off = RigidTransform(Rotation.from_euler("z", 30, degrees=True).as_matrix() @ T.rotation, T.translation)
        assert select_by_inliers([off, T], corr, 0.05) == 1
        assert select_by_inliers([off], corr, 0.05) == 0
        assert select_by_inliers([off, T], corr, 1e9) == 0

    def test_empty_inputs(self, rng):
        src, tgt = self._clouds(rng)
        with pytest.raises(ParameterError):
            select_by_closest_distance([], src, tgt)
        with pytest.raises(ParameterError):
            select_by_inliers([RigidTransform.identity()], CorrespondenceSet.empty(src, tgt), 0.05)

    def test_union_keeps_larger_weight(self, rng):
        src, tgt = self._clouds(rng, 10, 10)
        a = CorrespondenceSet([0, 1], [0, 1], [0.2, 0.5], src, tgt)
        b = CorrespondenceSet([1, 2], [1, 2], [0.7, 0.1], src, tgt)
        assert union_correspondences([a, b], src, tgt).pairs() == [(0, 0, 0.2), (1, 1, 0.7), (2, 2, 0.1)]


class TestP2PRegister:
    def test_full_visibility_matches_baseline(self, rng):
        src = PointCloud(rng.uniform(-1, 1, size=(300, 3)))
        xs = _features(rng, 300)
        T = RigidTransform(random_rotation(rng), [0.2, 0.0, -0.1])
        tgt = PointCloud(T.apply(src.points), role="target")
        res = p2p_register(src, tgt, xs, xs)
        base = res.diagnostics["candidates"][0]
        assert base["name"] == "baseline"
        assert res.diagnostics["patch_size"] == 300
        assert res.diagnostics["selected"] == "baseline" or res.diagnostics["candidates"][
            res.diagnostics["selected_index"]]["score"] <= base["score"]
        np.testing.assert_allclose(res.transform.matrix44(), T.matrix44(), atol=1e-9)

    def test_selected_score_is_extreme(self, rng):
        src, xs, tgt, xt, T, *_ = _crop_problem(rng)
        noisy = FeatureMatrix.from_raw(xt.values + rng.normal(size=xt.values.shape) * 0.3)
        for rule, pick in (("closest-distance", min), ("inlier-count", max)):
            res = p2p_register(src, tgt, xs, noisy, P2PConfig(selection=rule))
            scores = [c["score"] for c in res.diagnostics["candidates"]]
            assert scores[res.diagnostics["selected_index"]] == pick(scores)
            assert res.diagnostics["n_candidates"] == len(scores) <= 6

    def test_more_candidates_never_worse(self, rng):
        src, xs, tgt, xt, T, *_ = _crop_problem(rng)
        noisy = FeatureMatrix.from_raw(xt.values + rng.normal(size=xt.values.shape) * 0.5)
        best = [min(c["score"] for c in p2p_register(src, tgt, xs, noisy, P2PConfig(K=k)).diagnostics["candidates"])
                for k in (1, 3, 6)]
        # FPS prefixes are nested, so the candidate sets grow with K
        assert best[0] >= best[1] >= best[2]

    def test_single_patch_on_true_region(self, rng):
        src, xs, tgt, xt, T, center, members = _crop_problem(rng)
        res = p2p_register(src, tgt, xs, xt, P2PConfig(K=1))
        assert res.diagnostics["K_used"] == 1
        np.testing.assert_allclose(res.transform.matrix44(), T.matrix44(), atol=1e-6)

    def test_deterministic(self, rng):
        src, xs, tgt, xt, *_ = _crop_problem(rng)
        noisy = FeatureMatrix.from_raw(xt.values + rng.normal(size=xt.values.shape) * 0.4)
        a = p2p_register(src, tgt, xs, noisy)
        b = p2p_register(src, tgt, xs, noisy)
        np.testing.assert_array_equal(a.transform.matrix44(), b.transform.matrix44())
        assert a.diagnostics["candidates"] == b.diagnostics["candidates"]

    def test_whole_surface_proposal(self, rng):
        src, xs, tgt, xt, T, *_ = _crop_problem(rng)
        res = p2p_register(src, tgt, xs, xt, P2PConfig(proposal="whole-surface"))
        assert res.diagnostics["proposal"] == "whole-surface"

    def test_all_paths_fail(self, rng):
        src = PointCloud(rng.normal(size=(20, 3)))
        flat = FeatureMatrix(np.tile([1.0, 0.0], (20, 1)))
        with pytest.raises(NoCandidateError):
            p2p_register(src, src.subset(np.arange(10)), flat, flat.take(np.arange(10)))

    def test_config_validation(self):
        for kw in ({"K": 0}, {"K": 1.5}, {"tau": 0}, {"selection": "best"}, {"temperature": -1.0},
                   {"proposal": "random"}):
            with pytest.raises(ParameterError):
                P2PConfig(**kw)
