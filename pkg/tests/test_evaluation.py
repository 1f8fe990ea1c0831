import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_rotation
from p2preg.cloud import RigidTransform
from p2preg.errors import DegenerateConfigurationError, ParameterError
from p2preg.evaluation import (
    TAU_GRID,
    VISIBILITY_EDGES,
    EvalRecord,
    assign_bin,
    bin_report,
    bin_rows_csv,
    paired_csv,
    paired_rows,
    procrustes_reference,
    rms_tre,
    success_csv,
    success_curve,
    success_rate,
)


def _rec(sid, method, err, vis=0.25, failed=False, runtime=1.0):
    return EvalRecord(sid, method, None if failed else err, runtime, vis, failed=failed)


class TestRmsTre:
    def test_exact_mapping(self, rng):
        X = rng.normal(size=(30, 3))
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        assert rms_tre(T, X, T.apply(X)) == pytest.approx(0.0, abs=1e-12)

    def test_single_fiducial(self):
        T = RigidTransform(np.eye(3), [0.0, 3.0, 0.0])
        assert rms_tre(T, [[1.0, 1.0, 1.0]], [[1.0, 1.0, 1.0]]) == 3.0

    def test_matches_loop(self, rng):
        X, Y = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        acc = 0.0
        for x, y in zip(X, Y):
            p = T.rotation @ x + T.translation
            acc += sum((y[k] - p[k]) ** 2 for k in range(3))
        assert abs(rms_tre(T, X, Y) - math.sqrt(acc / 50)) < 1e-12

    @given(st.integers(0, 2**31))
    def test_equivariant_under_common_motion(self, seed):
        rng = np.random.default_rng(seed)
        X, Y = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        A = RigidTransform(random_rotation(rng), rng.normal(size=3))
        B = RigidTransform(random_rotation(rng), rng.normal(size=3))
        moved = B.compose(T).compose(A.inverse())
        assert rms_tre(moved, A.apply(X), B.apply(Y)) == pytest.approx(rms_tre(T, X, Y), abs=1e-9)

    def test_count_mismatch(self):
        with pytest.raises(ParameterError):
            rms_tre(RigidTransform.identity(), np.zeros((2, 3)), np.zeros((3, 3)))


class TestProcrustesReference:
    def test_rigid_case(self, rng):
        X = rng.normal(size=(20, 3))
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        T_ref, err = procrustes_reference(X, T.apply(X))
        assert err < 1e-9
        np.testing.assert_allclose(T_ref.matrix44(), T.matrix44(), atol=1e-9)

    @given(st.integers(0, 2**31))
    def test_is_a_floor(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(15, 3))
        Y = X @ random_rotation(rng).T + rng.normal(size=(15, 3)) * 0.3
        _, floor = procrustes_reference(X, Y)
        other = RigidTransform(random_rotation(rng), rng.normal(size=3))
        assert rms_tre(other, X, Y) >= floor - 1e-9

    def test_degenerate(self):
        with pytest.raises(DegenerateConfigurationError):
            procrustes_reference(np.zeros((2, 3)), np.zeros((2, 3)))


class TestSuccessRate:
    def test_examples(self):
        assert success_rate([1.0, 2.0], 5.0) == 100.0
        assert success_rate([0.0, 1.0], 0.0) == 0.0
        assert success_rate([5.0, 15.0, 25.0], 20.0) == pytest.approx(66.67, abs=0.01)
        assert success_rate([20.0], 20.0) == 0.0

    def test_empty(self):
        with pytest.raises(ParameterError):
            success_rate([], 1.0)

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=50))
    def test_monotone_in_tau(self, errors):
        rates = [r for _, r in success_curve(errors)]
        assert all(a <= b for a, b in zip(rates, rates[1:]))

    def test_default_grid(self):
        assert TAU_GRID == tuple(range(2, 41, 2))


class TestBins:
    def test_default_edges(self):
        assert VISIBILITY_EDGES == (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
        assert assign_bin(0.2, VISIBILITY_EDGES) == 0
        assert assign_bin(0.3, VISIBILITY_EDGES) == 1
        assert assign_bin(1.0, VISIBILITY_EDGES) == 7
        assert assign_bin(0.1, VISIBILITY_EDGES) is None

    def test_singleton(self):
        rows = bin_report([_rec("a", "m", 4.0)], (0.2, 0.3))
        assert len(rows) == 1 and rows[0].n == 1 and rows[0].std == 0.0 and rows[0].mean == 4.0

    def test_hand_computed_stats(self):
        errs = [1.0, 2.0, 4.0, 8.0, 10.0]
        rows = bin_report([_rec(str(k), "m", e, runtime=k) for k, e in enumerate(errs)])
        row = rows[0]
        mean = 5.0
        std = math.sqrt(sum((e - mean) ** 2 for e in errs) / 5)
        assert abs(row.mean - mean) < 1e-12 and abs(row.std - std) < 1e-12
        assert row.runtime == 2.0
        assert [r.n for r in rows] == [5, 0, 0, 0, 0, 0, 0, 0]
        assert rows[1].mean is None

    def test_failures_counted_not_averaged(self):
        rows = bin_report([_rec("a", "m", 3.0), _rec("b", "m", 0, failed=True)], (0.2, 0.3))
        assert rows[0].n == 1 and rows[0].failures == 1 and rows[0].mean == 3.0

    def test_csv(self):
        text = bin_rows_csv(bin_report([_rec("a", "m", 3.0)], (0.2, 0.3)))
        assert text.splitlines() == ["method,bin,mean,std,n,runtime,failures",
                                     "m,\"[0.2,0.3]\",3.000000,0.000000,1,1.000000,0"]
        assert success_csv({"m": [(2.0, 50.0)]}).splitlines()[1] == "m,2,50.0000"


class TestPaired:
    def test_one_row_per_sample(self):
        recs = [_rec("b", "baseline", 5.0), _rec("a", "baseline", 4.0), _rec("a", "p2p", 3.0),
                _rec("b", "p2p", 0, failed=True), _rec("c", "p2p", 1.0)]
        rows = paired_rows(recs, "baseline", "p2p")
        assert [r["sample_id"] for r in rows] == ["a", "b"]
        assert rows[0]["difference"] == -1.0 and rows[1]["difference"] is None
        lines = paired_csv(rows).splitlines()
        assert lines[0] == "sample_id,visibility,baseline_rms_tre,p2p_rms_tre,difference"
        assert lines[2].endswith(",5.000000,,")
        assert paired_csv([]) == ""

    def test_negative_error_rejected(self):
        with pytest.raises(ParameterError):
            EvalRecord("a", "m", -1.0)
