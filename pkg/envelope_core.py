"""
One-step envelope primitives.

For a node with current price s, successor prices y_i and continuation
values f_i this module computes the concave envelope of the points (y_i, f_i)
at s in two independent ways:

* primal: the cheapest x with a hedge H such that x + H·(y_i - s) >= f_i,
* dual: the best expectation of f over martingale weights on the y_i,

and insists that both agree. It also describes the full set of optimal
hedges, enumerates the extreme one-step martingale measures and provides
the closed-form binomial step.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from lp_solver import LinearProgram, LpStatus, solve
from na_check import ArbitrageError, check_node


ENVELOPE_TOL = 1e-9
FACE_RELAXATION = 1e-10
SPAN_RTOL = 1e-10
MAX_VERTEX_SUBSETS = 20000


class EnvelopeError(Exception):
    """Custom exception for envelope computation errors."""
    pass


@dataclass(frozen=True)
class EnvelopeResult:
    """Envelope value at s with a superhedging hedge and martingale weights."""

    value: float
    hedge: np.ndarray
    support_weights: np.ndarray
    primal_value: float
    dual_value: float


@dataclass(frozen=True)
class SuperdifferentialBox:
    """
    All optimal hedges at a node.

    The face is {H : H·increments[i] >= rhs[i] for all i}; ``lower`` and
    ``upper`` bound each coordinate over it (infinite along directions
    orthogonal to the increments).
    """

    value: float
    lower: np.ndarray
    upper: np.ndarray
    increments: np.ndarray
    rhs: np.ndarray
    active: Tuple[int, ...]

    @property
    def interval(self) -> Tuple[float, float]:
        return float(self.lower[0]), float(self.upper[0])

    def contains(self, hedge: Sequence[float], tol: float = ENVELOPE_TOL) -> bool:
        gains = self.increments @ np.asarray(hedge, dtype=float).reshape(-1)
        return bool(np.all(gains >= self.rhs - tol * (1.0 + np.abs(self.rhs))))


def _as_points(points: Sequence[Tuple[Sequence[float], float]]) -> Tuple[np.ndarray, np.ndarray]:
    if len(points) == 0:
        raise EnvelopeError("envelope needs at least one support point")
    supports = np.array([np.atleast_1d(np.asarray(y, dtype=float)) for y, _ in points])
    values = np.array([float(f) for _, f in points])
    return supports, values


def _check_inputs(supports: np.ndarray, values: np.ndarray, s: np.ndarray) -> None:
    if supports.shape[1] != s.size:
        raise EnvelopeError(f"support points have dimension {supports.shape[1]}, price has {s.size}")
    if not np.all(np.isfinite(values)):
        raise EnvelopeError("envelope values must be finite")


def span_basis(vectors: np.ndarray, rtol: float = SPAN_RTOL) -> np.ndarray:
    """
    Orthonormal basis of the span of the rows of ``vectors``.

    Returns:
        (d, r) array whose columns span the row space; r may be 0
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    d = vectors.shape[1]
    if vectors.size == 0 or not np.any(vectors):
        return np.zeros((d, 0))
    _, singular, vt = np.linalg.svd(vectors, full_matrices=False)
    rank = int(np.sum(singular > rtol * singular[0]))
    return vt[:rank].T.copy()


def one_step_primal(supports: np.ndarray, values: np.ndarray, s: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Minimal superhedging capital and a hedge.

    min x s.t. x + H·(y_i - s) - sigma_i = f_i, sigma >= 0, (x, H) free.
    The hedge is projected onto the span of the increments.

    Raises:
        ArbitrageError: If the program is unbounded
        EnvelopeError: On any other solver failure
    """
    supports = np.atleast_2d(np.asarray(supports, dtype=float))
    values = np.asarray(values, dtype=float)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    _check_inputs(supports, values, s)
    increments = supports - s
    n, d = increments.shape

    # columns: x, H (d), sigma (n)
    a_eq = np.hstack([np.ones((n, 1)), increments, -np.eye(n)])
    objective = np.zeros(1 + d + n)
    objective[0] = -1.0
    nonnegative = np.concatenate([np.zeros(1 + d, dtype=bool), np.ones(n, dtype=bool)])

    solution = solve(LinearProgram(objective, a_eq, values, nonnegative))
    if solution.status == LpStatus.UNBOUNDED:
        raise ArbitrageError("one-step arbitrage: superhedging capital is unbounded below, price undefined")
    if not solution.is_optimal:
        raise EnvelopeError(f"primal envelope program ended with status {solution.status.value}")

    basis = span_basis(increments)
    hedge = basis @ (basis.T @ solution.primal[1:1 + d])
    return -solution.value, hedge


def one_step_dual(supports: np.ndarray, values: np.ndarray, s: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Best martingale expectation of the values.

    max q·f s.t. sum_i q_i (y_i - s) = 0, sum_i q_i = 1, q >= 0.

    Raises:
        ArbitrageError: If no martingale weights exist
        EnvelopeError: On any other solver failure
    """
    supports = np.atleast_2d(np.asarray(supports, dtype=float))
    values = np.asarray(values, dtype=float)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    _check_inputs(supports, values, s)
    increments = supports - s
    n, d = increments.shape

    a_eq = np.vstack([increments.T, np.ones((1, n))])
    b_eq = np.zeros(d + 1)
    b_eq[d] = 1.0

    solution = solve(LinearProgram(values, a_eq, b_eq, np.ones(n, dtype=bool)))
    if solution.status == LpStatus.INFEASIBLE:
        raise ArbitrageError("one-step arbitrage: no martingale weights on the support, price undefined")
    if not solution.is_optimal:
        raise EnvelopeError(f"dual envelope program ended with status {solution.status.value}")
    return solution.value, solution.primal.copy()


def envelope_at(points: Sequence[Tuple[Sequence[float], float]], s: Sequence[float],
                check_na: bool = True, tol: float = ENVELOPE_TOL) -> EnvelopeResult:
    """
    Concave envelope of the points evaluated at s.

    Args:
        points: Pairs (y_i, f_i) of successor price and continuation value
        s: Current price
        check_na: Run the pointwise no-arbitrage check first
        tol: Relative primal/dual agreement tolerance

    Returns:
        EnvelopeResult with the hedge from the primal and weights from the dual

    Raises:
        ArbitrageError: If the node admits one-step arbitrage
        EnvelopeError: If inputs are invalid or the two programs disagree
    """
    supports, values = _as_points(points)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    _check_inputs(supports, values, s)

    if check_na:
        ok, certificate = check_node(supports, s)
        if not ok:
            raise ArbitrageError(
                f"one-step arbitrage: price undefined (certificate {certificate})"
            )

    primal_value, hedge = one_step_primal(supports, values, s)
    dual_value, weights = one_step_dual(supports, values, s)
    if abs(primal_value - dual_value) > tol * (1.0 + abs(primal_value)):
        raise EnvelopeError(
            f"primal value {primal_value:.12g} and dual value {dual_value:.12g} disagree"
        )
    return EnvelopeResult(primal_value, hedge, weights, primal_value, dual_value)


def crr_step(pi_up: float, pi_down: float, u: float, d: float) -> float:
    """
    Binomial one-step price alpha·pi_up + (1 - alpha)·pi_down.

    Raises:
        ValueError: Unless d < 1 < u
    """
    if not d < 1.0 < u:
        raise ValueError(f"binomial step requires d < 1 < u, got d={d}, u={u}")
    alpha = (1.0 - d) / (u - d)
    return alpha * pi_up + (1.0 - alpha) * pi_down


def superdifferential_box(points: Sequence[Tuple[Sequence[float], float]],
                          s: Sequence[float]) -> SuperdifferentialBox:
    """
    Describe every hedge that superhedges at the envelope value.

    Per coordinate k, two programs min/max H_k subject to
    value + H·(y_i - s) >= f_i give the bounding box of the optimal face.

    Raises:
        ArbitrageError, EnvelopeError: As ``envelope_at``
    """
    logger = logging.getLogger(__name__)
    result = envelope_at(points, s)
    supports, values = _as_points(points)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    increments = supports - s
    n, d = increments.shape

    rhs = values - result.value
    relaxed = rhs - FACE_RELAXATION * (1.0 + abs(result.value))

    # columns: H (d), sigma (n)
    a_eq = np.hstack([increments, -np.eye(n)])
    nonnegative = np.concatenate([np.zeros(d, dtype=bool), np.ones(n, dtype=bool)])

    lower = np.empty(d)
    upper = np.empty(d)
    for k in range(d):
        for direction, target in ((1.0, upper), (-1.0, lower)):
            objective = np.zeros(d + n)
            objective[k] = direction
            solution = solve(LinearProgram(objective, a_eq, relaxed, nonnegative))
            if solution.status == LpStatus.UNBOUNDED:
                target[k] = direction * np.inf
            elif solution.is_optimal:
                target[k] = direction * solution.value
            else:
                raise EnvelopeError(f"optimal-face program ended with status {solution.status.value}")

    active = tuple(int(i) for i in np.nonzero(result.support_weights > ENVELOPE_TOL)[0])
    logger.debug(f"Superdifferential box: lower={lower}, upper={upper}, active={active}")
    return SuperdifferentialBox(result.value, lower, upper, increments, rhs, active)


def martingale_vertices(supports: np.ndarray, s: np.ndarray) -> List[np.ndarray]:
    """
    Extreme points of {q >= 0 : sum q_i (y_i - s) = 0, sum q_i = 1}.

    Each vertex is supported on affinely independent successors, so subsets
    of size at most d + 1 are enumerated.

    Raises:
        EnvelopeError: If the enumeration would be too large
    """
    supports = np.atleast_2d(np.asarray(supports, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    increments = supports - s
    n, d = increments.shape
    system = np.vstack([increments.T, np.ones((1, n))])
    target = np.zeros(d + 1)
    target[d] = 1.0
    scale = max(1.0, float(np.max(np.abs(increments))))

    sizes = range(1, min(n, d + 1) + 1)
    total = sum(math.comb(n, k) for k in sizes)
    if total > MAX_VERTEX_SUBSETS:
        raise EnvelopeError(f"vertex enumeration needs {total} subsets (limit {MAX_VERTEX_SUBSETS})")

    vertices: List[np.ndarray] = []
    for k in sizes:
        for subset in itertools.combinations(range(n), k):
            columns = system[:, subset]
            if np.linalg.matrix_rank(columns) < k:
                continue
            weights, *_ = np.linalg.lstsq(columns, target, rcond=None)
            if np.max(np.abs(columns @ weights - target)) > 1e-10 * scale or np.min(weights) < -1e-12:
                continue
            q = np.zeros(n)
            q[list(subset)] = np.maximum(weights, 0.0)
            q /= q.sum()
            if not any(np.allclose(q, v, atol=1e-12) for v in vertices):
                vertices.append(q)
    return vertices
