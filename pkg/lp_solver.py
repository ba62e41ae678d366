"""
Dense linear programming kernel.

This module provides a small two-phase tableau simplex that maximizes
c^T x subject to A x = b with per-variable non-negativity flags. It returns
primal and dual solutions and certifies them with explicit residuals, so
callers never act on a silently wrong answer. Node programs in this project
have at most a few dozen variables, so the tableau is kept dense.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np


FEASIBILITY_TOL = 1e-9
PIVOT_FLOOR = 1e-13
MAX_ITERATIONS = 5000


class LinearProgramError(Exception):
    """Custom exception for malformed linear programs."""
    pass


class _PivotBreakdown(Exception):
    """Raised inside the solver when a pivot is numerically unusable."""
    pass


class LpStatus(str, Enum):
    """Termination status of a simplex run."""

    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class LinearProgram:
    """
    Maximize ``objective @ x`` subject to ``a_eq @ x == b_eq``.

    Variables flagged in ``nonnegative`` are constrained to x >= 0, the
    others are free.
    """

    objective: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    nonnegative: np.ndarray

    def __post_init__(self):
        objective = np.asarray(self.objective, dtype=float).reshape(-1)
        n_vars = objective.size
        if n_vars == 0:
            raise LinearProgramError("Linear program needs at least one variable")

        a_eq = np.asarray(self.a_eq, dtype=float)
        if a_eq.size == 0:
            a_eq = a_eq.reshape(0, n_vars)
        if a_eq.ndim != 2:
            raise LinearProgramError(f"Constraint matrix must be 2-D, got {a_eq.ndim}-D")

        b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        flags = np.asarray(self.nonnegative, dtype=bool).reshape(-1)

        if a_eq.shape[1] != n_vars:
            raise LinearProgramError(
                f"Constraint matrix has {a_eq.shape[1]} columns but objective has {n_vars} entries"
            )
        if a_eq.shape[0] != b_eq.size:
            raise LinearProgramError(
                f"Constraint matrix has {a_eq.shape[0]} rows but right-hand side has {b_eq.size} entries"
            )
        if flags.size != n_vars:
            raise LinearProgramError(
                f"Got {flags.size} bound flags for {n_vars} variables"
            )
        if not (np.all(np.isfinite(objective)) and np.all(np.isfinite(a_eq)) and np.all(np.isfinite(b_eq))):
            raise LinearProgramError("Linear program data must be finite")

        object.__setattr__(self, 'objective', objective)
        object.__setattr__(self, 'a_eq', a_eq)
        object.__setattr__(self, 'b_eq', b_eq)
        object.__setattr__(self, 'nonnegative', flags)

    @property
    def n_variables(self) -> int:
        return self.objective.size

    @property
    def n_constraints(self) -> int:
        return self.b_eq.size


@dataclass(frozen=True)
class LpSolution:
    """Result of a simplex run; ``dual`` has one multiplier per equality row."""

    status: LpStatus
    value: float
    primal: np.ndarray
    dual: np.ndarray
    iterations: int = 0
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def is_optimal(self) -> bool:
        return self.status == LpStatus.OPTIMAL


class SimplexSolver:
    """
    Two-phase dense simplex with Bland's anti-cycling rule.

    The entering variable is the lowest-index column with a negative reduced
    cost; ratio-test ties go to the lowest basic variable index. Identical
    input therefore always yields identical output.
    """

    def __init__(self, max_iterations: int = MAX_ITERATIONS):
        """
        Initialize the solver.

        Args:
            max_iterations: Pivot budget across both phases

        Raises:
            LinearProgramError: If the iteration budget is not positive
        """
        if max_iterations < 1:
            raise LinearProgramError("max_iterations must be at least 1")

        self.max_iterations = max_iterations
        self.logger = logging.getLogger(__name__)

    def solve(self, lp: LinearProgram) -> LpSolution:
        """
        Solve a linear program.

        Args:
            lp: Program to solve

        Returns:
            LpSolution with certified residuals when the status is optimal
        """
        m, n = lp.a_eq.shape

        # Free variables are split into positive and negative parts
        col_origin: List[int] = []
        col_sign: List[float] = []
        for j in range(n):
            col_origin.append(j)
            col_sign.append(1.0)
            if not lp.nonnegative[j]:
                col_origin.append(j)
                col_sign.append(-1.0)
        origin = np.array(col_origin, dtype=int)
        sign = np.array(col_sign)

        row_sign = np.where(lp.b_eq < 0, -1.0, 1.0)
        a_std = lp.a_eq[:, origin] * sign * row_sign[:, None]
        b_std = lp.b_eq * row_sign
        c_std = lp.objective[origin] * sign

        try:
            status, x_std, y_std, iterations = self._two_phase(a_std, b_std, c_std)
        except _PivotBreakdown as e:
            self.logger.warning(f"Simplex breakdown on {m}x{n} program: {e}")
            return self._failure(LpStatus.NUMERICAL_FAILURE, m, n)

        if status != LpStatus.OPTIMAL:
            self.logger.debug(f"Simplex finished with status {status.value} after {iterations} pivots")
            return self._failure(status, m, n, iterations)

        primal = np.zeros(n)
        np.add.at(primal, origin, sign * x_std)
        dual = y_std * row_sign

        residuals = self._residuals(lp, primal, dual)
        value = float(lp.objective @ primal)
        if not self._certified(lp, residuals, value):
            self.logger.warning(f"Residual certification failed: {residuals}")
            return LpSolution(LpStatus.NUMERICAL_FAILURE, value, primal, dual, iterations, residuals)

        return LpSolution(LpStatus.OPTIMAL, value, primal, dual, iterations, residuals)

    def _failure(self, status: LpStatus, m: int, n: int, iterations: int = 0) -> LpSolution:
        return LpSolution(status, float('nan'), np.full(n, np.nan), np.full(m, np.nan), iterations, {})

    def _two_phase(self, a: np.ndarray, b: np.ndarray,
                   c: np.ndarray) -> Tuple[LpStatus, np.ndarray, np.ndarray, int]:
        m, n_std = a.shape

        # Phase 1: maximize minus the sum of artificials
        tableau = np.zeros((m + 1, n_std + m + 1))
        tableau[:m, :n_std] = a
        tableau[:m, n_std:n_std + m] = np.eye(m)
        tableau[:m, -1] = b
        tableau[-1, :n_std] = -a.sum(axis=0)
        tableau[-1, -1] = -b.sum()
        basis = list(range(n_std, n_std + m))

        _, iterations = self._iterate(tableau, basis, n_std + m, 0)
        b_scale = 1.0 + (np.max(np.abs(b)) if m else 0.0)
        if tableau[-1, -1] < -FEASIBILITY_TOL * b_scale:
            return LpStatus.INFEASIBLE, np.empty(0), np.empty(0), iterations

        redundant = []
        for i in range(m):
            if basis[i] < n_std:
                continue
            row = np.abs(tableau[i, :n_std])
            j = int(np.argmax(row)) if n_std else 0
            if n_std and row[j] > FEASIBILITY_TOL:
                self._pivot(tableau, i, j)
                basis[i] = j
            else:
                redundant.append(i)
        keep = [i for i in range(m) if i not in redundant]
        if redundant:
            self.logger.debug(f"Dropped {len(redundant)} redundant equality rows")

        # Phase 2 on the original objective
        phase2 = np.zeros((len(keep) + 1, n_std + 1))
        phase2[:-1, :n_std] = tableau[keep, :n_std]
        phase2[:-1, -1] = tableau[keep, -1]
        basis2 = [basis[i] for i in keep]
        c_basis = c[basis2]
        phase2[-1, :n_std] = c_basis @ phase2[:-1, :n_std] - c
        phase2[-1, -1] = c_basis @ phase2[:-1, -1]

        status, iterations = self._iterate(phase2, basis2, n_std, iterations)
        if status != LpStatus.OPTIMAL:
            return status, np.empty(0), np.empty(0), iterations

        x_std = np.zeros(n_std)
        y_std = np.zeros(m)
        if keep:
            basis_matrix = a[np.ix_(keep, basis2)]
            x_basic = phase2[:-1, -1].copy()
            try:
                polished = np.linalg.solve(basis_matrix, b[keep])
                if np.all(polished >= -FEASIBILITY_TOL):
                    x_basic = np.maximum(polished, 0.0)
                y_kept = np.linalg.solve(basis_matrix.T, c[basis2])
            except np.linalg.LinAlgError:
                y_kept = np.linalg.lstsq(basis_matrix.T, c[basis2], rcond=None)[0]
            x_std[basis2] = x_basic
            y_std[keep] = y_kept

        return LpStatus.OPTIMAL, x_std, y_std, iterations

    def _iterate(self, tableau: np.ndarray, basis: List[int], n_cols: int,
                 iterations: int) -> Tuple[LpStatus, int]:
        while True:
            if iterations >= self.max_iterations:
                raise _PivotBreakdown(f"iteration limit {self.max_iterations} reached")

            reduced = tableau[-1, :n_cols]
            negative = np.nonzero(reduced < -FEASIBILITY_TOL)[0]
            if negative.size == 0:
                return LpStatus.OPTIMAL, iterations
            entering = int(negative[0])

            column = tableau[:-1, entering]
            candidates = np.nonzero(column > FEASIBILITY_TOL)[0]
            if candidates.size == 0:
                return LpStatus.UNBOUNDED, iterations

            ratios = tableau[candidates, -1] / column[candidates]
            best = ratios.min()
            tied = candidates[ratios <= best + 1e-12 * (1.0 + abs(best))]
            leaving = int(min(tied, key=lambda i: basis[i]))

            self._pivot(tableau, leaving, entering)
            basis[leaving] = entering
            iterations += 1

    def _pivot(self, tableau: np.ndarray, row: int, col: int) -> None:
        pivot = tableau[row, col]
        if abs(pivot) < PIVOT_FLOOR:
            raise _PivotBreakdown(f"pivot magnitude {abs(pivot):.3e} below floor")

        tableau[row, :] /= pivot
        factors = tableau[:, col].copy()
        factors[row] = 0.0
        tableau -= np.outer(factors, tableau[row, :])

        rhs = tableau[:-1, -1]
        rhs[(rhs < 0.0) & (rhs > -FEASIBILITY_TOL)] = 0.0

    def _residuals(self, lp: LinearProgram, primal: np.ndarray, dual: np.ndarray) -> Dict[str, float]:
        primal_gap = lp.a_eq @ primal - lp.b_eq
        sign_violation = -primal[lp.nonnegative]
        reduced = lp.objective - lp.a_eq.T @ dual

        dual_violation = np.concatenate([
            np.maximum(reduced[lp.nonnegative], 0.0),
            np.abs(reduced[~lp.nonnegative]),
        ])
        complementarity = np.abs(primal[lp.nonnegative] * reduced[lp.nonnegative])

        return {
            'primal': float(max(np.max(np.abs(primal_gap), initial=0.0),
                                np.max(sign_violation, initial=0.0))),
            'dual': float(np.max(dual_violation, initial=0.0)),
            'complementarity': float(np.max(complementarity, initial=0.0)),
            'gap': float(abs(lp.objective @ primal - lp.b_eq @ dual)),
        }

    def _certified(self, lp: LinearProgram, residuals: Dict[str, float], value: float) -> bool:
        b_norm = np.max(np.abs(lp.b_eq), initial=0.0)
        c_norm = np.max(np.abs(lp.objective), initial=0.0)
        value_scale = 1.0 + abs(value)
        return (
            residuals['primal'] <= FEASIBILITY_TOL * (1.0 + b_norm)
            and residuals['dual'] <= FEASIBILITY_TOL * (1.0 + c_norm)
            and residuals['complementarity'] <= FEASIBILITY_TOL * value_scale
            and residuals['gap'] <= FEASIBILITY_TOL * value_scale
        )


def solve(lp: LinearProgram) -> LpSolution:
    """
    Solve ``lp`` with a default-configured SimplexSolver.

    Args:
        lp: Program to solve

    Returns:
        LpSolution
    """
    return SimplexSolver().solve(lp)
