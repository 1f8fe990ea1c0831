import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_rotation
from p2preg.baselines import IcpConfig, RansacConfig, icp, icp_detailed, ransac_detailed, ransac_registration
from p2preg.benchgen import crop_visibility, generate_shape
from p2preg.cloud import PointCloud, RigidTransform
from p2preg.errors import IcpStallError, ParameterError, RansacFailure
from p2preg.matching import CorrespondenceSet, weighted_svd


def _blob(seed=3):
    v = generate_shape(seed).vertices
    return PointCloud((v - v.mean(0)) / np.abs(v).max())


def _pairs(P, Q, w=None):
    n = len(P)
    return CorrespondenceSet(np.arange(n), np.arange(n), np.ones(n) if w is None else w,
                             PointCloud(P), PointCloud(Q))


def _angle_deg(R):
    return np.degrees(Rotation.from_matrix(R).magnitude())


class TestIcp:
    def test_ground_truth_init_is_fixed_point(self, rng):
        src = PointCloud(rng.normal(size=(200, 3)))
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        r = icp_detailed(src, PointCloud(T.apply(src.points)), T)
        assert r.iterations <= 2
        np.testing.assert_allclose(r.transform.matrix44(), T.matrix44(), atol=1e-9)

    def test_small_rotation_recovered(self, rng):
        src = PointCloud(rng.uniform(-1, 1, size=(200, 3)))
        R = Rotation.from_euler("z", 5, degrees=True).as_matrix()
        tgt = PointCloud(src.points @ R.T)
        r = icp_detailed(src, tgt, cfg=IcpConfig(max_iterations=200))
        np.testing.assert_allclose(r.transform.rotation, R, atol=1e-6)
        assert r.residual < 1e-6

    def test_large_rotation_on_partial_target_not_recovered(self):
        src = _blob()
        crop, _ = crop_visibility(src, 0.25, seed=1)
        R = Rotation.from_euler("z", 170, degrees=True).as_matrix()
        tgt = PointCloud(crop.points @ R.T)
        r = icp_detailed(src, tgt, cfg=IcpConfig(max_iterations=100))
        assert r.residual > 0.01
        assert _angle_deg(r.transform.rotation.T @ R) > 30

    def test_residuals_non_increasing(self, rng):
        src = _blob(5)
        T = RigidTransform(Rotation.from_euler("xyz", [0.3, 0.2, -0.4]).as_matrix(), [0.1, 0, 0])
        tgt, _ = crop_visibility(PointCloud(T.apply(src.points)), 0.5, seed=2)
        r = icp_detailed(src, tgt, cfg=IcpConfig(max_iterations=60))
        assert np.all(np.diff(r.residuals) <= 0)

    def test_gate_stall_carries_transform(self, rng):
        src = PointCloud(rng.normal(size=(20, 3)))
        tgt = PointCloud(rng.normal(size=(20, 3)) + 100)
        with pytest.raises(IcpStallError) as err:
            icp(src, tgt, cfg=IcpConfig(max_correspondence_distance=0.1))
        assert err.value.last_transform is not None

    def test_config_validation(self):
        for kw in ({"max_iterations": 0}, {"tolerance": 0}, {"max_correspondence_distance": -1}):
            with pytest.raises(ParameterError):
                IcpConfig(**kw)


class TestRansac:
    def test_outlier_free(self, rng):
        P = rng.normal(size=(40, 3)) * 0.5
        T = RigidTransform(random_rotation(rng), rng.normal(size=3) * 0.2)
        got = ransac_registration(_pairs(P, T.apply(P)), cfg=RansacConfig(iterations=50))
        np.testing.assert_allclose(got.matrix44(), T.matrix44(), atol=1e-9)

    def test_half_gross_outliers(self, rng):
        P = rng.uniform(-1, 1, size=(100, 3))
        T = RigidTransform(random_rotation(rng), rng.normal(size=3) * 0.2)
        Q = T.apply(P)
        bad = rng.permutation(100)[:50]
        Q[bad] = rng.uniform(-1, 1, size=(50, 3))
        res = ransac_detailed(_pairs(P, Q), cfg=RansacConfig(iterations=1000, seed=4))
        fid = rng.uniform(-1, 1, size=(50, 3))
        err = np.sqrt(((res.transform.apply(fid) - T.apply(fid)) ** 2).sum(1).mean())
        assert err < 0.04
        assert res.best_count >= 50
        assert res.best_count >= max(res.hypothesis_counts)

    def test_three_pairs_equal_svd(self, rng):
        P = rng.normal(size=(3, 3))
        Q = P @ random_rotation(rng).T + rng.normal(size=(3, 3)) * 0.01
        corr = _pairs(P, Q)
        got = ransac_registration(corr, cfg=RansacConfig(iterations=5, max_correspondence_distance=1.0))
        np.testing.assert_allclose(got.matrix44(), weighted_svd(corr).matrix44(), atol=1e-12)

    def test_seed_determinism(self, rng):
        P = rng.normal(size=(60, 3))
        Q = rng.normal(size=(60, 3))
        cfg = RansacConfig(iterations=100, max_correspondence_distance=0.5, seed=9)
        try:
            a = ransac_detailed(_pairs(P, Q), cfg=cfg)
        except RansacFailure:
            pytest.skip("no consensus on pure noise")
        b = ransac_detailed(_pairs(P, Q), cfg=cfg)
        assert a.hypothesis_counts == b.hypothesis_counts
        np.testing.assert_array_equal(a.transform.matrix44(), b.transform.matrix44())

    def test_failures(self, rng):
        P = rng.normal(size=(2, 3))
        with pytest.raises(RansacFailure):
            ransac_registration(_pairs(P, P))
        P = rng.normal(size=(10, 3))
        Q = rng.normal(size=(10, 3)) * 100
        with pytest.raises(RansacFailure):
            ransac_registration(_pairs(P, Q), cfg=RansacConfig(iterations=20, max_correspondence_distance=1e-6))

    def test_config_validation(self):
        for kw in ({"iterations": 0}, {"sample_size": 2}, {"max_correspondence_distance": 0}):
            with pytest.raises(ParameterError):
                RansacConfig(**kw)
