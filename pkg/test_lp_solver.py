"""
Unit tests for the dense simplex kernel.

This module covers optimal, infeasible and unbounded programs, free
variables, redundant rows, degenerate cycling instances and randomized
programs with a planted optimum.
"""

import numpy as np
import pytest

from lp_solver import LinearProgram, LinearProgramError, LpStatus, SimplexSolver, solve


def _planted_program(rng, m, n):
    """Random program whose optimum x0 is certified by a planted dual y0."""
    a = rng.standard_normal((m, n))
    x0 = rng.uniform(0.5, 2.0, n)
    zero = rng.random(n) < 0.4
    x0[zero] = 0.0
    y0 = rng.standard_normal(m)
    s = np.where(zero, rng.uniform(0.1, 1.0, n), 0.0)
    c = a.T @ y0 - s
    return LinearProgram(c, a, a @ x0, np.ones(n, dtype=bool)), float(c @ x0)


class TestLinearProgram:
    """Test cases for program validation."""

    def test_dimension_mismatch_columns(self):
        """Test that a constraint matrix with the wrong column count is rejected."""
        with pytest.raises(LinearProgramError, match="columns but objective"):
            LinearProgram(np.ones(3), np.ones((2, 2)), np.ones(2), np.ones(3, dtype=bool))

    def test_dimension_mismatch_rows(self):
        """Test that a right-hand side with the wrong length is rejected."""
        with pytest.raises(LinearProgramError, match="rows but right-hand side"):
            LinearProgram(np.ones(2), np.ones((2, 2)), np.ones(3), np.ones(2, dtype=bool))

    def test_non_finite_data(self):
        """Test that NaN data is rejected."""
        with pytest.raises(LinearProgramError, match="finite"):
            LinearProgram(np.array([1.0, np.nan]), np.ones((1, 2)), np.ones(1), np.ones(2, dtype=bool))

    def test_solver_rejects_bad_iteration_budget(self):
        """Test that a non-positive iteration budget is rejected."""
        with pytest.raises(LinearProgramError, match="max_iterations"):
            SimplexSolver(max_iterations=0)


class TestSimplexStatuses:
    """Test cases for termination statuses."""

    def test_simple_optimum(self):
        """Test max x1 + 2 x2 subject to x1 + x2 = 1."""
        lp = LinearProgram(np.array([1.0, 2.0]), np.array([[1.0, 1.0]]), np.array([1.0]), np.ones(2, dtype=bool))
        solution = solve(lp)

        assert solution.status == LpStatus.OPTIMAL
        assert solution.value == pytest.approx(2.0, abs=1e-12)
        np.testing.assert_allclose(solution.primal, [0.0, 1.0], atol=1e-12)
        assert solution.dual[0] == pytest.approx(2.0, abs=1e-12)

    def test_infeasible(self):
        """Test that x1 + x2 = -1 with x >= 0 is infeasible."""
        lp = LinearProgram(np.ones(2), np.array([[1.0, 1.0]]), np.array([-1.0]), np.ones(2, dtype=bool))
        assert solve(lp).status == LpStatus.INFEASIBLE

    def test_unbounded(self):
        """Test that max x1 subject to x1 - x2 = 0 is unbounded."""
        lp = LinearProgram(np.array([1.0, 0.0]), np.array([[1.0, -1.0]]), np.array([0.0]), np.ones(2, dtype=bool))
        assert solve(lp).status == LpStatus.UNBOUNDED

    def test_free_variable(self):
        """Test that a free variable may go negative."""
        # max -x1 s.t. x1 - x2 = -3, x1 free, x2 >= 0
        lp = LinearProgram(np.array([-1.0, 0.0]), np.array([[1.0, -1.0]]), np.array([-3.0]),
                           np.array([False, True]))
        solution = solve(lp)

        assert solution.status == LpStatus.OPTIMAL
        assert solution.primal[0] == pytest.approx(-3.0, abs=1e-12)
        assert solution.value == pytest.approx(3.0, abs=1e-12)

    def test_redundant_rows(self):
        """Test that a duplicated equality row does not break duality."""
        a = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, -1.0, 0.0]])
        lp = LinearProgram(np.array([1.0, 2.0, 3.0]), a, np.array([1.0, 1.0, 0.0]), np.ones(3, dtype=bool))
        solution = solve(lp)

        assert solution.status == LpStatus.OPTIMAL
        assert solution.value == pytest.approx(3.0, abs=1e-10)
        assert lp.b_eq @ solution.dual == pytest.approx(solution.value, abs=1e-9)

    def test_degenerate_cycling_example(self):
        """Test that Beale's cycling example terminates at the optimum."""
        a = np.array([
            [1.0, 0.0, 0.0, 0.25, -60.0, -1.0 / 25.0, 9.0],
            [0.0, 1.0, 0.0, 0.5, -90.0, -1.0 / 50.0, 3.0],
            [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
        ])
        c = np.array([0.0, 0.0, 0.0, 0.75, -150.0, 1.0 / 50.0, -6.0])
        solution = solve(LinearProgram(c, a, np.array([0.0, 0.0, 1.0]), np.ones(7, dtype=bool)))

        assert solution.status == LpStatus.OPTIMAL
        assert solution.value == pytest.approx(0.05, abs=1e-10)

    def test_deterministic(self):
        """Test that identical input yields identical output."""
        rng = np.random.default_rng(5)
        lp, _ = _planted_program(rng, 4, 7)
        first, second = solve(lp), solve(lp)

        np.testing.assert_array_equal(first.primal, second.primal)
        np.testing.assert_array_equal(first.dual, second.dual)


class TestRandomPrograms:
    """Test cases for randomized programs with planted optima."""

    def test_planted_optima(self):
        """Test 500 random programs against their planted optimal value and dual."""
        rng = np.random.default_rng(20240601)
        for _ in range(500):
            n = int(rng.integers(1, 13))
            m = int(rng.integers(1, n + 1))
            lp, expected = _planted_program(rng, m, n)
            solution = solve(lp)

            assert solution.status == LpStatus.OPTIMAL
            assert solution.value == pytest.approx(expected, abs=1e-7 * (1.0 + abs(expected)))
            assert lp.b_eq @ solution.dual == pytest.approx(solution.value, abs=1e-7 * (1.0 + abs(expected)))
            assert np.all(solution.primal >= -1e-9)
            assert solution.residuals['primal'] <= 1e-9 * (1.0 + np.max(np.abs(lp.b_eq)))
