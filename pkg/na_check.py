"""
Pointwise no-arbitrage detection on scenario lattices.

A node admits no one-step arbitrage exactly when the zero vector lies in the
relative interior of the convex hull of its price increments. This module
decides that condition with a small linear program per node and, when it
fails, produces a trading direction H with H·(y - s) >= 0 on every successor
and > 0 on at least one, re-checked by plain dot products.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from lp_solver import LinearProgram, LpStatus, solve
from market_model import ScenarioLattice


NA_THRESHOLD = 1e-10
CERTIFICATE_TOL = 1e-9


class ArbitrageError(Exception):
    """Custom exception for models that admit one-step arbitrage."""

    def __init__(self, message: str, failures: Optional[List['NaFailure']] = None):
        super().__init__(message)
        self.failures = failures or []


@dataclass(frozen=True)
class NaFailure:
    """A node failing the pointwise condition, with its certificate."""

    node_id: str
    certificate: Optional[np.ndarray]
    epsilon: float
    note: str


@dataclass
class NaReport:
    """Lattice-wide verdict of the pointwise no-arbitrage check."""

    global_ok: bool
    failures: List[NaFailure] = field(default_factory=list)
    checked_nodes: int = 0

    @property
    def failed_nodes(self) -> List[str]:
        return [f.node_id for f in self.failures]

    def raise_if_failed(self) -> None:
        if not self.global_ok:
            listed = ', '.join(self.failed_nodes[:10])
            raise ArbitrageError(
                f"one-step arbitrage at {len(self.failures)} node(s): {listed}", self.failures
            )


def _scaled_increments(support_prices: Sequence[Sequence[float]],
                       current_price: Sequence[float]) -> np.ndarray:
    supports = np.atleast_2d(np.asarray(support_prices, dtype=float))
    increments = supports - np.asarray(current_price, dtype=float).reshape(1, -1)
    scale = np.max(np.abs(increments)) if increments.size else 0.0
    return increments / scale if scale > 0 else increments


def interior_margin(support_prices: Sequence[Sequence[float]], current_price: Sequence[float]) -> float:
    """
    Largest common weight epsilon in a convex representation of zero.

    Solves max eps s.t. sum_i lambda_i (y_i - s) = 0, lambda_i >= eps,
    sum_i lambda_i = 1 through lambda_i = eps + mu_i, mu_i >= 0.

    Returns:
        The optimum, or -inf when zero is outside the affine hull
    """
    increments = _scaled_increments(support_prices, current_price)
    n, d = increments.shape

    # columns: mu_1..mu_n, eps
    a_eq = np.zeros((d + 1, n + 1))
    a_eq[:d, :n] = increments.T
    a_eq[:d, n] = increments.sum(axis=0)
    a_eq[d, :n] = 1.0
    a_eq[d, n] = n
    b_eq = np.zeros(d + 1)
    b_eq[d] = 1.0
    objective = np.zeros(n + 1)
    objective[n] = 1.0
    nonnegative = np.ones(n + 1, dtype=bool)
    nonnegative[n] = False

    solution = solve(LinearProgram(objective, a_eq, b_eq, nonnegative))
    if solution.status == LpStatus.INFEASIBLE:
        return -np.inf
    if not solution.is_optimal:
        raise ArbitrageError(f"no-arbitrage program ended with status {solution.status.value}")
    return float(solution.value)


def separating_direction(support_prices: Sequence[Sequence[float]],
                         current_price: Sequence[float]) -> Optional[np.ndarray]:
    """
    Direction H in the unit box maximizing the summed gains subject to
    H·(y_i - s) >= 0 for every successor.

    Returns:
        H when its summed gain is positive, otherwise None
    """
    increments = _scaled_increments(support_prices, current_price)
    n, d = increments.shape

    # columns: H (free, d), sigma (n), upper slack (d), lower slack (d)
    n_cols = d + n + 2 * d
    a_eq = np.zeros((n + 2 * d, n_cols))
    a_eq[:n, :d] = increments
    a_eq[:n, d:d + n] = -np.eye(n)
    a_eq[n:n + d, :d] = np.eye(d)
    a_eq[n:n + d, d + n:d + n + d] = np.eye(d)
    a_eq[n + d:, :d] = -np.eye(d)
    a_eq[n + d:, d + n + d:] = np.eye(d)
    b_eq = np.concatenate([np.zeros(n), np.ones(2 * d)])
    objective = np.zeros(n_cols)
    objective[d:d + n] = 1.0
    nonnegative = np.ones(n_cols, dtype=bool)
    nonnegative[:d] = False

    solution = solve(LinearProgram(objective, a_eq, b_eq, nonnegative))
    if not solution.is_optimal or solution.value <= CERTIFICATE_TOL:
        return None
    return solution.primal[:d].copy()


def verify_certificate(certificate: np.ndarray, support_prices: Sequence[Sequence[float]],
                       current_price: Sequence[float], tol: float = CERTIFICATE_TOL) -> bool:
    """
    Arithmetic re-check of an arbitrage direction.

    Returns:
        True if H·(y - s) >= 0 for all successors and > 0 for one of them
    """
    supports = np.atleast_2d(np.asarray(support_prices, dtype=float))
    gains = (supports - np.asarray(current_price, dtype=float)) @ np.asarray(certificate, dtype=float)
    scale = max(1.0, float(np.max(np.abs(supports))) * float(np.max(np.abs(certificate), initial=0.0)))
    return bool(np.all(gains >= -tol * scale) and np.max(gains) > tol * scale)


def check_node(support_prices: Sequence[Sequence[float]],
               current_price: Sequence[float]) -> Tuple[bool, Optional[np.ndarray]]:
    """
    Decide the one-step no-arbitrage condition at a node.

    Args:
        support_prices: Successor price vectors (non-empty)
        current_price: Price at the node

    Returns:
        Tuple of (ok, certificate); the certificate is None when ok
    """
    ok, certificate, _, _ = _classify(support_prices, current_price)
    return ok, certificate


def _classify(support_prices, current_price) -> Tuple[bool, Optional[np.ndarray], float, str]:
    if len(support_prices) == 0:
        raise ValueError("support_prices must be non-empty")
    epsilon = interior_margin(support_prices, current_price)
    if epsilon > NA_THRESHOLD:
        return True, None, epsilon, ''

    if epsilon >= -NA_THRESHOLD:
        note = "zero increment lies on the relative boundary of the support hull"
    else:
        note = "zero increment lies outside the support hull"
    certificate = separating_direction(support_prices, current_price)
    if certificate is not None and not verify_certificate(certificate, support_prices, current_price):
        logging.getLogger(__name__).warning("Separating direction failed its arithmetic re-check")
        certificate = None
    if certificate is None:
        note += "; no separating direction found"
    return False, certificate, epsilon, note


def check_lattice(lattice: ScenarioLattice, threads: int = 1) -> NaReport:
    """
    Run the pointwise check at every non-terminal node.

    Args:
        lattice: Valid lattice
        threads: Worker threads for the node checks

    Returns:
        NaReport listing every failing node
    """
    logger = logging.getLogger(__name__)
    nodes = [node for node in lattice if not node.is_terminal]

    def run(node):
        return node.id, _classify(lattice.successor_prices(node.id), node.price_vector)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, nodes))
    else:
        results = [run(node) for node in nodes]

    failures = [
        NaFailure(node_id, certificate, epsilon, note)
        for node_id, (ok, certificate, epsilon, note) in results if not ok
    ]
    for failure in failures:
        logger.warning(f"Arbitrage at node '{failure.node_id}': {failure.note}")
    logger.info(f"Checked {len(nodes)} nodes for one-step arbitrage, {len(failures)} failing")
    return NaReport(global_ok=not failures, failures=failures, checked_nodes=len(nodes))
