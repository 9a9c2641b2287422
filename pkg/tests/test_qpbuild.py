import numpy as np
import pytest

from rtmotion.poly import basis_row
from rtmotion.qpbuild import (
    QpBuildError,
    assemble_qp,
    build_equality,
    build_inequality,
    jerk_cost_matrix,
    segment_samples,
)


class TestJerkCostMatrix:
    def test_single_sample_gram_structure(self):
        # Gram matrix of one third-derivative row at u=0: only [3][3] nonzero
        row = basis_row(5, 0.0, 3)
        gram = np.outer(row, row) * 0.5**-6
        assert gram[3, 3] == pytest.approx(36.0 * 0.5**-6)
        nz = np.nonzero(gram)
        assert nz[0].tolist() == [3] and nz[1].tolist() == [3]

    @pytest.mark.parametrize("degree,duration,fc", [(5, 1.0, 100.0), (4, 0.5, 50.0), (6, 2.0, 20.0)])
    def test_symmetric_psd(self, degree, duration, fc):
        q = jerk_cost_matrix(degree, duration, fc)
        np.testing.assert_array_equal(q, q.T)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            x = rng.normal(size=degree + 1)
            assert x @ q @ x >= -1e-10

    def test_riemann_sum_consistency(self):
        # mean of sampled (d3 u^3)^2 = 36 equals the integral of 36 du exactly
        q = jerk_cost_matrix(5, 1.0, 100.0)
        samples = len(segment_samples(1.0, 100.0))
        assert q[3, 3] / samples == pytest.approx(36.0, rel=0.01)

    def test_sample_count_floor(self):
        assert len(segment_samples(0.001, 100.0)) == 2
        assert len(segment_samples(0.5, 100.0)) == 50

    def test_rejects_bad_inputs(self):
        with pytest.raises(QpBuildError):
            jerk_cost_matrix(5, -1.0, 100.0)
        with pytest.raises(QpBuildError):
            jerk_cost_matrix(5, 1.0, 0.0)


class TestBuildEquality:
    def test_single_segment_rows(self):
        a_eq, b_eq = build_equality([(1.0, 1.0)], (0.0, 0.0, 0.0), 5)
        assert a_eq.shape == (6, 6)
        np.testing.assert_array_equal(b_eq, [0, 0, 0, 1, 0, 0])

    def test_two_segment_structure(self):
        a_eq, b_eq = build_equality([(1.0, 1.0), (2.0, 1.0)], (0.0, 0.0, 0.0), 5)
        assert a_eq.shape == (10, 12)
        # initial rows touch only the first block
        assert np.all(a_eq[:3, 6:] == 0.0)
        # terminal rows touch only the last block
        assert np.all(a_eq[3:6, :6] == 0.0)
        # continuity rows have support in exactly the two adjacent blocks
        for row in a_eq[7:10]:
            assert np.any(row[:6] != 0.0) and np.any(row[6:] != 0.0)

    def test_row_count_formula(self):
        for n in range(1, 7):
            a_eq, _ = build_equality([(float(i), 0.5) for i in range(n)], (0.0, 0.0, 0.0), 5)
            assert a_eq.shape[0] == 4 * n + 2

    def test_rank_deficiency_is_a_build_error(self):
        # L=4, N=1: 6 rows but only 5 unknowns cannot be full row rank
        with pytest.raises(QpBuildError, match="rank"):
            build_equality([(1.0, 1.0)], (0.0, 0.0, 0.0), 4)

    def test_full_rank_for_valid_sizes(self):
        rng = np.random.default_rng(5)
        for n, degree in [(2, 4), (1, 5), (3, 5), (5, 6)]:
            wps = [(float(rng.normal()), float(rng.uniform(0.2, 1.5))) for _ in range(n)]
            a_eq, _ = build_equality(wps, (0.0, 0.1, -0.2), degree)
            assert np.linalg.matrix_rank(a_eq) == 4 * n + 2

    def test_empty_waypoints(self):
        with pytest.raises(QpBuildError, match="waypoints: empty"):
            build_equality([], (0.0, 0.0, 0.0), 5)

    def test_non_finite_initial_state(self):
        with pytest.raises(QpBuildError, match="finite"):
            build_equality([(1.0, 1.0)], (np.nan, 0.0, 0.0), 5)


class TestBuildInequality:
    def test_row_count(self):
        # one segment, D=1, fc=10: 10 samples -> 20 interval rows
        a_in, l_in, u_in = build_inequality(5, [1.0], 10.0, 1.0, 2.0)
        assert a_in.shape == (20, 6)
        assert l_in.shape == (20,) and u_in.shape == (20,)

    def test_zero_coefficients_strictly_feasible(self):
        a_in, l_in, u_in = build_inequality(5, [1.0, 0.5], 25.0, 1.0, 2.0)
        vals = a_in @ np.zeros(12)
        assert np.all(vals > l_in) and np.all(vals < u_in)

    def test_bounds_alternate_velocity_acceleration(self):
        _, l_in, u_in = build_inequality(5, [1.0], 10.0, 1.5, 7.0)
        np.testing.assert_array_equal(u_in[0::2], 1.5)
        np.testing.assert_array_equal(u_in[1::2], 7.0)
        np.testing.assert_array_equal(l_in, -u_in)

    def test_rejects_non_positive_limits(self):
        with pytest.raises(QpBuildError):
            build_inequality(5, [1.0], 10.0, 0.0, 1.0)


class TestAssembleQp:
    def test_dimensions_and_equality_count(self):
        wps = [(float(i), 0.5) for i in range(5)]
        problem = assemble_qp(wps, (0.0, 0.0, 0.0), 5, 100.0, 2.0, 8.0)
        assert problem.n_vars == 30
        assert problem.n_eq == 22
        assert np.all(problem.lower[: problem.n_eq] == problem.upper[: problem.n_eq])

    def test_block_diagonal_cost(self):
        wps = [(1.0, 1.0), (2.0, 0.5), (1.5, 0.8)]
        problem = assemble_qp(wps, (0.0, 0.0, 0.0), 5, 50.0, 2.0, 8.0)
        q = problem.q_matrix
        for i in range(3):
            for j in range(3):
                block = q[i * 6 : (i + 1) * 6, j * 6 : (j + 1) * 6]
                if i != j:
                    assert np.all(block == 0.0)

    def test_psd_with_ridge(self):
        wps = [(1.0, 1.0), (0.5, 0.5)]
        problem = assemble_qp(wps, (0.0, 0.0, 0.0), 5, 50.0, 2.0, 8.0)
        eigvals = np.linalg.eigvalsh(problem.q_matrix)
        assert eigvals.min() >= -1e-10

    def test_deterministic_bit_identical(self):
        wps = [(0.3, 0.7), (0.9, 0.4)]
        a = assemble_qp(wps, (0.1, 0.0, -0.2), 5, 100.0, 2.0, 8.0)
        b = assemble_qp(wps, (0.1, 0.0, -0.2), 5, 100.0, 2.0, 8.0)
        assert np.array_equal(a.q_matrix, b.q_matrix)
        assert np.array_equal(a.a_matrix, b.a_matrix)
        assert np.array_equal(a.lower, b.lower)
        assert np.array_equal(a.upper, b.upper)

    def test_no_zero_rows(self):
        wps = [(1.0, 1.0)]
        problem = assemble_qp(wps, (0.0, 0.0, 0.0), 5, 100.0, 2.0, 8.0)
        assert not np.any(np.all(problem.a_matrix == 0.0, axis=1))

    def test_json_dump_round_trip(self, tmp_path):
        import json

        wps = [(1.0, 1.0)]
        problem = assemble_qp(wps, (0.0, 0.0, 0.0), 5, 100.0, 2.0, 8.0)
        path = tmp_path / "qp.json"
        problem.dump_json(path)
        raw = json.loads(path.read_text())
        assert raw["n_eq"] == 6
        np.testing.assert_array_equal(np.array(raw["Q"]), problem.q_matrix)
        np.testing.assert_array_equal(np.array(raw["A"]), problem.a_matrix)
