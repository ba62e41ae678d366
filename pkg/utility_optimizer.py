"""
Robust max-min utility of consumption over superhedging strategies.

At a node with wealth x the agent consumes c >= 0, holds H and receives
x - c + H·(y_j - s) at successor j. Wealth must stay above the superhedging
price of every successor; the objective is u_t(c) plus the worst expected
continuation value over the node's finite prior list. The node problem is a
concave program in (H, c) which is solved with cvxpy, the worst prior mixture
being read off the multipliers of the prior rows.

Value functions are stored on wealth grids as concave non-decreasing
piecewise-linear surfaces and swept backwards through the lattice; a forward
pass from the initial wealth extracts the policy and the worst-case measure.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from envelope_core import one_step_primal, span_basis
from lp_solver import LinearProgram, LpStatus, solve
from market_model import (
    ModelValidationError, PayoffSpec, PiecewiseLinearUtility, PriorFamily, ScenarioLattice,
    UtilityFunction, UtilityProfile, terminal_values
)
from superhedge_engine import PriceSurface, SuperhedgeEngine


WEALTH_CLAMP_TOL = 1e-12
FORWARD_CLAMP_TOL = 1e-7
WEALTH_SLACK = 1e-9
FACE_RELAXATION = 1e-8
CHARGE_TOL = 1e-12
CONCAVITY_TOL = 1e-6
TIE_TOL = 1e-9
DEFAULT_GRID_N = 129
DEFAULT_WEALTH_SPAN = 10.0
DEFAULT_MULTISTARTS = 5
ACCEPTED_STATUSES = (cp.OPTIMAL, cp.OPTIMAL_INACCURATE)


class UtilityValidationError(Exception):
    """Custom exception for invalid utility problem inputs."""
    pass


class UtilityOptimizationError(Exception):
    """Custom exception for utility optimization failures."""
    pass


class InfeasibleWealthError(UtilityOptimizationError):
    """Custom exception for wealth below the superhedging price."""
    pass


def compactify(increments: Sequence[Sequence[float]]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Restrict hedges to the span L of the price increments.

    Args:
        increments: Successor increments y_j - s (non-empty)

    Returns:
        Tuple of (basis, projector); the basis has shape (d, dim L), the
        projector B Bᵀ maps any hedge to its component in L
    """
    increments = np.atleast_2d(np.asarray(increments, dtype=float))
    if increments.size == 0:
        raise UtilityValidationError("compactify needs at least one increment")
    basis = span_basis(increments)
    return basis, basis @ basis.T


def _utility_hypograph(utility: UtilityFunction, bound, argument) -> List[Any]:
    """Constraints bound <= utility(argument) for the supported families."""
    if utility.family == 'exponential':
        return [bound <= 1 - cp.exp(-utility.gamma * argument)]
    if utility.family == 'bounded_power':
        return [bound <= 1 - cp.inv_pos(1 + argument)]
    if isinstance(utility, PiecewiseLinearUtility):
        slopes = np.append(utility.slopes, 0.0)
        intercepts = np.append(utility.values[:-1] - utility.slopes * utility.breakpoints[:-1],
                               utility.values[-1])
        return [bound <= argument * slopes + intercepts]
    raise UtilityValidationError(f"utility family '{utility.family}' has no convex model")


class ValueSurface:
    """
    Concave non-decreasing piecewise-linear value of wealth at one node.

    Defined on [lower, +inf): linear between grid points, flat after the last
    one, and -inf below ``lower``.
    """

    def __init__(self, grid: Sequence[float], values: Sequence[float], tol: float = CONCAVITY_TOL):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid.size != values.size:
            raise UtilityValidationError("value surface needs matching grid and values (at least 2 points)")
        if np.any(np.diff(grid) <= 0):
            raise UtilityValidationError("value surface grid must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise UtilityValidationError("value surface values must be finite")

        scale = tol * (1.0 + float(np.max(np.abs(values))))
        slopes = np.diff(values) / np.diff(grid)
        if np.any(np.diff(values) < -scale):
            raise UtilityValidationError("continuation is not non-decreasing in wealth")
        spacing = np.minimum(np.diff(grid)[1:], np.diff(grid)[:-1])
        if np.any(np.diff(slopes) * spacing > scale):
            raise UtilityValidationError("continuation is not concave in wealth")

        self.grid = grid
        self.values = self._concave_majorant(grid, np.maximum.accumulate(values))
        self.slopes = np.diff(self.values) / np.diff(grid)

    @staticmethod
    def _concave_majorant(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
        hull: List[int] = []
        for i in range(grid.size):
            while len(hull) >= 2:
                a, b = hull[-2], hull[-1]
                cross = (grid[b] - grid[a]) * (values[i] - values[a]) - (values[b] - values[a]) * (grid[i] - grid[a])
                if cross >= 0:
                    hull.pop()
                else:
                    break
            hull.append(i)
        return np.interp(grid, grid[hull], values[hull])

    @property
    def lower(self) -> float:
        return float(self.grid[0])

    @property
    def upper(self) -> float:
        return float(self.grid[-1])

    def __call__(self, wealth, tol: float = FORWARD_CLAMP_TOL):
        w = np.asarray(wealth, dtype=float)
        out = np.where(w >= self.lower - tol * (1.0 + abs(self.lower)),
                       np.interp(w, self.grid, self.values), -np.inf)
        return float(out) if out.ndim == 0 else out

    def hypograph(self, bound, wealth) -> List[Any]:
        slopes = np.append(self.slopes, 0.0)
        intercepts = np.append(self.values[:-1] - self.slopes * self.grid[:-1], self.values[-1])
        return [bound <= wealth * slopes + intercepts]


class TerminalContinuation:
    """Terminal value u_T(w - liability): the surplus over the claim is consumed."""

    def __init__(self, utility: UtilityFunction, liability: float):
        self.utility = utility
        self.liability = float(liability)

    @property
    def lower(self) -> float:
        return self.liability

    def __call__(self, wealth, tol: float = FORWARD_CLAMP_TOL):
        surplus = np.asarray(wealth, dtype=float) - self.liability
        clamped = np.where(surplus >= -tol * (1.0 + abs(self.liability)), np.maximum(surplus, 0.0), -1.0)
        return self.utility(clamped)

    def hypograph(self, bound, wealth) -> List[Any]:
        return _utility_hypograph(self.utility, bound, wealth - self.liability)


@dataclass
class StepSolution:
    """Optimum of one node problem at a given wealth."""

    value: float
    hedge: np.ndarray
    consumption: float
    successor_wealth: np.ndarray
    prior_weights: np.ndarray
    mixture: np.ndarray
    worst_index: int
    gap: Optional[float] = None
    sup_under_worst: Optional[float] = None
    status: str = cp.OPTIMAL
    alternatives: List[np.ndarray] = field(default_factory=list)


class NodeProgram:
    """
    The max-min node problem as a parametrized cvxpy program.

    Wealth is a cvxpy Parameter so one compiled program serves a whole
    wealth grid.
    """

    def __init__(self, increments: np.ndarray, continuation: Sequence[Any], priors: np.ndarray,
                 u_t: Optional[UtilityFunction] = None, allow_consumption: bool = True,
                 solver: Optional[str] = None):
        self.increments = np.atleast_2d(np.asarray(increments, dtype=float))
        self.continuation = list(continuation)
        self.priors = np.atleast_2d(np.asarray(priors, dtype=float))
        self.u_t = u_t
        self.solver = solver
        self.logger = logging.getLogger(__name__)

        n = self.increments.shape[0]
        if len(self.continuation) != n:
            raise UtilityValidationError(f"{len(self.continuation)} continuation functions for {n} successors")
        if self.priors.shape[1] != n:
            raise UtilityValidationError(f"priors have {self.priors.shape[1]} entries for {n} successors")
        self.basis, self.projector = compactify(self.increments)
        self.gains_matrix = self.increments @ self.basis
        self.lowers = np.array([g.lower for g in self.continuation])
        self.consumes = allow_consumption and u_t is not None

        self.x = cp.Parameter()
        self.theta = cp.Variable(self.basis.shape[1]) if self.basis.shape[1] else None
        self.c = cp.Variable(nonneg=True)
        tau = cp.Variable()
        bounds = cp.Variable(n)

        gains = self.gains_matrix @ self.theta if self.theta is not None else np.zeros(n)
        # keep shape (n,) when nothing can be hedged
        wealth = (self.x - self.c) * np.ones(n) + gains
        slack = WEALTH_SLACK * (1.0 + np.abs(self.lowers))
        constraints = [wealth >= self.lowers - slack]
        for j, cont in enumerate(self.continuation):
            constraints += cont.hypograph(bounds[j], wealth[j])
        self.prior_rows = tau <= self.priors @ bounds
        constraints.append(self.prior_rows)

        objective = tau
        if self.consumes:
            felicity = cp.Variable()
            constraints += _utility_hypograph(u_t, felicity, self.c)
            objective = tau + felicity
        else:
            constraints.append(self.c == 0)
        self.problem = cp.Problem(cp.Maximize(objective), constraints)

    def hedge_from(self, theta: Optional[np.ndarray]) -> np.ndarray:
        if theta is None or self.basis.shape[1] == 0:
            return np.zeros(self.increments.shape[1])
        return self.basis @ theta

    def successor_wealth(self, x: float, hedge: np.ndarray, c: float) -> np.ndarray:
        return x - c + self.increments @ hedge

    def objective(self, x: float, hedge: np.ndarray, c: float, priors: Optional[np.ndarray] = None) -> float:
        """Exact max-min objective at (H, c) evaluated without the solver."""
        wealth = self.successor_wealth(x, hedge, c)
        values = np.array([float(g(w)) for g, w in zip(self.continuation, wealth)])
        rows = self.priors if priors is None else np.atleast_2d(priors)
        expected = []
        for row in rows:
            charged = row > CHARGE_TOL
            expected.append(float(row[charged] @ values[charged]) if np.all(np.isfinite(values[charged])) else -np.inf)
        felicity = float(self.u_t(max(c, 0.0))) if self.consumes else 0.0
        return min(expected) + felicity

    def solve(self, x: float) -> Tuple[np.ndarray, float, np.ndarray, str]:
        """
        Solve at wealth x.

        Returns:
            Tuple of (hedge, consumption, prior mixture, solver status)

        Raises:
            UtilityOptimizationError: If the solver fails
        """
        self.x.value = float(x)
        try:
            if self.solver:
                self.problem.solve(solver=self.solver)
            else:
                self.problem.solve()
        except cp.SolverError as e:
            raise UtilityOptimizationError(f"Failed to solve node program at wealth {x:.12g}: {e}")

        status = self.problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            raise InfeasibleWealthError(f"infeasible wealth {x:.12g}: no superhedging position")
        if status not in ACCEPTED_STATUSES:
            raise UtilityOptimizationError(f"node program ended with status '{status}' at wealth {x:.12g}")
        if status == cp.OPTIMAL_INACCURATE:
            self.logger.warning(f"Inaccurate node solve at wealth {x:.12g}")

        theta = self.theta.value if self.theta is not None else None
        hedge = self.hedge_from(theta)
        c = max(float(self.c.value), 0.0) if self.consumes else 0.0
        return hedge, c, self._mixture(), status

    def _mixture(self) -> np.ndarray:
        k = self.priors.shape[0]
        if k == 1:
            return np.ones(1)
        duals = self.prior_rows.dual_value
        if duals is not None:
            weights = np.maximum(np.asarray(duals, dtype=float).reshape(-1), 0.0)
            if weights.sum() > 0:
                return weights / weights.sum()
        return np.eye(k)[0]

    def explore_face(self, x: float, hedge: np.ndarray, c: float, starts: int,
                     rng: np.random.Generator) -> List[np.ndarray]:
        """Alternative optimal hedges; see ``explore_optimal_face``."""
        r = self.basis.shape[1]
        if starts <= 1 or r == 0:
            return []
        charged = np.any(self.priors > CHARGE_TOL, axis=0)
        theta_hat = self.basis.T @ hedge
        targets = self.gains_matrix @ theta_hat
        free_rows = np.nonzero(~charged)[0]
        n_free = free_rows.size

        # columns: theta (free, r), slack on uncharged successors (n_free)
        a_eq = np.zeros((len(charged), r + n_free))
        b_eq = np.zeros(len(charged))
        a_eq[:, :r] = self.gains_matrix
        b_eq[charged] = targets[charged]
        for k, j in enumerate(free_rows):
            a_eq[j, r + k] = -1.0
            floor = self.lowers[j] - x + c
            b_eq[j] = floor - FACE_RELAXATION * (1.0 + abs(self.lowers[j]))
        nonnegative = np.concatenate([np.zeros(r, dtype=bool), np.ones(n_free, dtype=bool)])

        alternatives = []
        for _ in range(starts - 1):
            objective = np.zeros(r + n_free)
            objective[:r] = rng.standard_normal(r)
            solution = solve(LinearProgram(objective, a_eq, b_eq, nonnegative))
            if solution.status != LpStatus.OPTIMAL:
                self.logger.debug(f"Face exploration start ended with status {solution.status.value}")
                continue
            alternatives.append(self.basis @ solution.primal[:r])
        return alternatives


def _implied_price(increments: np.ndarray, lowers: np.ndarray) -> float:
    return one_step_primal(increments, lowers, np.zeros(increments.shape[1]))[0]


def one_step_maxmin(current_price: Sequence[float], successor_prices: Sequence[Sequence[float]], x: float,
                    continuation: Sequence[Any], priors: Sequence[Sequence[float]],
                    u_t: Optional[UtilityFunction] = None, allow_consumption: bool = True,
                    pi_t: Optional[float] = None, wealth_tol: float = WEALTH_CLAMP_TOL,
                    compute_gap: bool = True, multistarts: int = 1, seed: int = 0,
                    solver: Optional[str] = None, program: Optional[NodeProgram] = None) -> StepSolution:
    """
    Solve the max-min problem at one node.

    Args:
        current_price: Price at the node
        successor_prices: Successor price vectors
        x: Wealth at the node before consumption
        continuation: Per-successor concave functions of wealth
            (ValueSurface or TerminalContinuation)
        priors: Finite list of probability vectors over the successors
        u_t: Utility of consumption at the node (None forbids consumption)
        allow_consumption: False fixes c = 0 (the time-0 convention)
        pi_t: Superhedging price at the node (implied from the
            continuation domains if omitted)
        wealth_tol: Wealth within this distance below pi_t is clamped up
        compute_gap: Re-solve under the worst-case mixture to measure the
            minimax gap
        multistarts: Number of starts for optimal-face exploration
        seed: Seed of the exploration directions
        solver: cvxpy solver name (cvxpy default if None)
        program: Pre-built NodeProgram to reuse

    Returns:
        StepSolution at the optimum

    Raises:
        InfeasibleWealthError: If x < pi_t - wealth_tol
        UtilityValidationError: On malformed inputs
        UtilityOptimizationError: If the solver fails
    """
    s = np.atleast_1d(np.asarray(current_price, dtype=float))
    supports = np.atleast_2d(np.asarray(successor_prices, dtype=float))
    increments = supports - s
    prior_rows = np.atleast_2d(np.asarray(priors, dtype=float))
    if prior_rows.size == 0:
        raise UtilityValidationError("prior list must be non-empty")
    if np.any(prior_rows < 0) or np.any(np.abs(prior_rows.sum(axis=1) - 1.0) > 1e-9):
        raise UtilityValidationError("priors must be probability vectors")

    if program is None:
        program = NodeProgram(increments, continuation, prior_rows, u_t, allow_consumption, solver)
    if pi_t is None:
        pi_t = _implied_price(increments, program.lowers)
    if x < pi_t - wealth_tol * (1.0 + abs(pi_t)):
        raise InfeasibleWealthError(f"infeasible wealth {x:.12g} below superhedging price {pi_t:.12g}")
    x = max(float(x), pi_t)

    hedge, c, weights, status = program.solve(x)
    value = program.objective(x, hedge, c)
    rng = np.random.default_rng(seed)
    alternatives = program.explore_face(x, hedge, c, multistarts, rng)
    for candidate in alternatives:
        # best value wins, ties keep the earliest start
        candidate_value = program.objective(x, candidate, c)
        if candidate_value > value + TIE_TOL * (1.0 + abs(value)):
            hedge, value = candidate, candidate_value

    solution = StepSolution(
        value=value,
        hedge=hedge,
        consumption=c,
        successor_wealth=program.successor_wealth(x, hedge, c),
        prior_weights=weights,
        mixture=weights @ program.priors,
        worst_index=int(np.argmax(weights)),
        status=status,
        alternatives=alternatives,
    )

    if compute_gap:
        single = NodeProgram(increments, program.continuation, solution.mixture.reshape(1, -1),
                             program.u_t, program.consumes, program.solver)
        hedge_w, c_w, _, _ = single.solve(x)
        solution.sup_under_worst = single.objective(x, hedge_w, c_w)
        solution.gap = solution.sup_under_worst - value
    return solution


def explore_optimal_face(program: NodeProgram, x: float, solution: StepSolution, starts: int,
                         seed: int = 0) -> List[np.ndarray]:
    """
    Sample optimal hedges by maximizing seeded random linear objectives over
    the optimal face.

    Consumption and wealth on every prior-charged successor are held at the
    optimum; uncharged successors keep their superhedging floors (relaxed by
    FACE_RELAXATION). The face differs from a point only when hedges are
    not unique.
    """
    rng = np.random.default_rng(seed)
    return program.explore_face(x, solution.hedge, solution.consumption, starts, rng)


@dataclass
class OptimalPolicy:
    """Hedges and consumption per node plus terminal consumption per leaf."""

    initial_wealth: float
    hedges: Dict[str, np.ndarray] = field(default_factory=dict)
    consumption: Dict[str, float] = field(default_factory=dict)
    wealth: Dict[str, float] = field(default_factory=dict)
    terminal_consumption: Dict[str, float] = field(default_factory=dict)
    alternative_hedges: Dict[str, List[np.ndarray]] = field(default_factory=dict)


@dataclass
class WorstCaseMeasure:
    """Worst prior mixture and the resulting transition vector at each node."""

    mixtures: Dict[str, np.ndarray] = field(default_factory=dict)
    indices: Dict[str, int] = field(default_factory=dict)
    transitions: Dict[str, np.ndarray] = field(default_factory=dict)

    def reach(self, lattice: ScenarioLattice) -> Dict[str, float]:
        """Probability of reaching each node under the worst-case measure."""
        probability = {lattice.root_id: 1.0}
        for t in range(lattice.horizon):
            for node in lattice.nodes_at(t):
                row = self.transitions.get(node.id)
                for j, child_id in enumerate(node.successors):
                    mass = probability.get(node.id, 0.0) * (float(row[j]) if row is not None else 0.0)
                    probability[child_id] = probability.get(child_id, 0.0) + mass
        return probability

    def as_prior_family(self) -> PriorFamily:
        return PriorFamily({node_id: [row] for node_id, row in self.transitions.items()})


@dataclass
class RecursionResult:
    """Output of the value recursion."""

    value: float
    surfaces: Dict[str, ValueSurface]
    policy: OptimalPolicy
    worst_case: WorstCaseMeasure
    prices: PriceSurface
    robust_value: float
    diagnostics: Dict[str, Any] = field(default_factory=dict)


@dataclass
class UniquenessReport:
    """Comparison of two optimal policies along the worst-case measure."""

    status: str
    passed: Optional[bool]
    max_consumption_diff: float = 0.0
    max_gain_diff: float = 0.0
    nodes_compared: int = 0
    hedges_identical: bool = True


class UtilityOptimizer:
    """
    Backward value recursion and forward policy extraction.

    Each non-terminal node carries a wealth grid on [pi, pi + w_max]; the
    surfaces of slice t + 1 are read-only while slice t is solved.
    """

    def __init__(self, grid_n: int = DEFAULT_GRID_N, w_max: Optional[float] = None,
                 multistarts: int = DEFAULT_MULTISTARTS, seed: int = 0, threads: int = 1,
                 solver: Optional[str] = None, tol: float = 1e-7):
        """
        Initialize the optimizer.

        Args:
            grid_n: Wealth grid points per node (at least 2)
            w_max: Width of the wealth grids (pi_0 + 10 if None)
            multistarts: Starts for optimal-face exploration in the forward pass
            seed: Seed of the exploration directions
            threads: Worker threads per time slice
            solver: cvxpy solver name
            tol: Primal/dual tolerance for the underlying pricing sweep

        Raises:
            UtilityValidationError: If a parameter is out of range
        """
        if grid_n < 2:
            raise UtilityValidationError(f"grid_n must be at least 2, got {grid_n}")
        if w_max is not None and w_max <= 0:
            raise UtilityValidationError(f"w_max must be positive, got {w_max}")
        if multistarts < 1:
            raise UtilityValidationError(f"multistarts must be at least 1, got {multistarts}")
        if threads < 1:
            raise UtilityValidationError(f"threads must be at least 1, got {threads}")

        self.grid_n = grid_n
        self.w_max = w_max
        self.multistarts = multistarts
        self.seed = seed
        self.threads = threads
        self.solver = solver
        self.engine = SuperhedgeEngine(tol=tol, threads=threads)
        self.logger = logging.getLogger(__name__)

    def _check_inputs(self, lattice: ScenarioLattice, priors: PriorFamily, utilities: UtilityProfile) -> None:
        if lattice.recombining:
            raise UtilityValidationError("utility optimization needs a tree lattice (wealth is path-dependent)")
        try:
            priors.validate_against(lattice, require_all=True)
            utilities.require_times(lattice.horizon)
        except ModelValidationError as e:
            raise UtilityValidationError(str(e))

    def _program(self, lattice: ScenarioLattice, node, prices: PriceSurface,
                 surfaces: Dict[str, ValueSurface], priors: PriorFamily,
                 utilities: UtilityProfile, prior_rows: Optional[np.ndarray] = None) -> NodeProgram:
        continuation = []
        for child in lattice.children(node.id):
            if child.is_terminal:
                continuation.append(TerminalContinuation(utilities.for_node(child), prices.pi[child.id]))
            else:
                continuation.append(surfaces[child.id])
        rows = np.array(priors.for_node(node.id)) if prior_rows is None else prior_rows
        return NodeProgram(lattice.increments(node.id), continuation, rows,
                           utilities.for_node(node), node.time > 0, self.solver)

    def value_recursion(self, lattice: ScenarioLattice, payoff: PayoffSpec, priors: PriorFamily,
                        utilities: UtilityProfile, x0: Optional[float] = None) -> RecursionResult:
        """
        Build value surfaces backwards and extract the optimal policy.

        Args:
            lattice: Tree lattice satisfying no-arbitrage
            payoff: Claim that must be superhedged
            priors: Prior list at every non-terminal node
            utilities: Utilities for times 1..T (time 0 optional)
            x0: Initial wealth (defaults to pi_0)

        Returns:
            RecursionResult with U_0(x0), surfaces, policy and worst-case measure

        Raises:
            ArbitrageError: If the lattice admits arbitrage
            InfeasibleWealthError: If x0 < pi_0
            UtilityValidationError, UtilityOptimizationError: As the node solves
        """
        self._check_inputs(lattice, priors, utilities)
        prices = self.engine.price(lattice, payoff)
        w_max = self.w_max if self.w_max is not None else prices.pi0 + DEFAULT_WEALTH_SPAN
        if w_max <= 0:
            raise UtilityValidationError(f"w_max must be positive, got {w_max}")

        surfaces: Dict[str, ValueSurface] = {}
        diagnostics: Dict[str, Any] = {
            'grid_n': self.grid_n, 'w_max': w_max, 'seed': self.seed,
            'multistarts': self.multistarts, 'grid_solves': 0, 'inaccurate_solves': 0,
        }

        self.logger.info(f"Value recursion on {len(lattice)} nodes, grid_n={self.grid_n}, w_max={w_max:g}")
        for t in range(lattice.horizon - 1, -1, -1):
            nodes = lattice.nodes_at(t)

            def build(node):
                program = self._program(lattice, node, prices, surfaces, priors, utilities)
                grid = np.linspace(prices.pi[node.id], prices.pi[node.id] + w_max, self.grid_n)
                values = np.empty(self.grid_n)
                inaccurate = 0
                for i, x in enumerate(grid):
                    hedge, c, _, status = program.solve(x)
                    values[i] = program.objective(x, hedge, c)
                    inaccurate += status == cp.OPTIMAL_INACCURATE
                return node.id, ValueSurface(grid, values), inaccurate

            if self.threads > 1 and len(nodes) > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    results = list(pool.map(build, nodes))
            else:
                results = [build(node) for node in nodes]
            for node_id, surface, inaccurate in results:
                surfaces[node_id] = surface
                diagnostics['grid_solves'] += self.grid_n
                diagnostics['inaccurate_solves'] += inaccurate
            self.logger.info(f"Sealed value surfaces for slice t={t} ({len(nodes)} nodes)")

        x0 = prices.pi0 if x0 is None else float(x0)
        policy, worst_case, value, forward = self._forward(lattice, prices, surfaces, priors, utilities, x0)
        diagnostics.update(forward)
        robust_value = robust_policy_value(lattice, payoff, priors, utilities, policy)
        diagnostics['policy_value_error'] = abs(robust_value - value)

        self.logger.info(f"U_0({x0:.12g}) = {value:.12g}, robust policy value {robust_value:.12g}")
        return RecursionResult(value, surfaces, policy, worst_case, prices, robust_value, diagnostics)

    def _forward(self, lattice: ScenarioLattice, prices: PriceSurface, surfaces: Dict[str, ValueSurface],
                 priors: PriorFamily, utilities: UtilityProfile, x0: float):
        policy = OptimalPolicy(initial_wealth=x0)
        worst_case = WorstCaseMeasure()
        stats = {'x0': x0, 'max_gap': 0.0, 'wealth_out_of_grid': 0, 'max_face_spread': 0.0}
        policy.wealth[lattice.root_id] = x0
        root_value = None

        for ordinal, node in enumerate(n for t in range(lattice.horizon) for n in lattice.nodes_at(t)):
            x = policy.wealth[node.id]
            program = self._program(lattice, node, prices, surfaces, priors, utilities)
            tol = WEALTH_CLAMP_TOL if node.id == lattice.root_id else FORWARD_CLAMP_TOL
            step = one_step_maxmin(node.price, lattice.successor_prices(node.id), x, program.continuation,
                                   program.priors, pi_t=prices.pi[node.id], wealth_tol=tol,
                                   multistarts=self.multistarts, seed=self.seed * 100003 + ordinal,
                                   program=program)
            if root_value is None:
                root_value = step.value
            policy.hedges[node.id] = step.hedge
            policy.consumption[node.id] = step.consumption
            policy.alternative_hedges[node.id] = step.alternatives
            worst_case.mixtures[node.id] = step.prior_weights
            worst_case.indices[node.id] = step.worst_index
            worst_case.transitions[node.id] = step.mixture
            stats['max_gap'] = max(stats['max_gap'], abs(step.gap or 0.0))
            if step.alternatives:
                spread = max(float(np.max(np.abs(h - step.hedge))) for h in step.alternatives)
                stats['max_face_spread'] = max(stats['max_face_spread'], spread)

            for child, wealth in zip(lattice.children(node.id), step.successor_wealth):
                floor = prices.pi[child.id]
                if wealth < floor - FORWARD_CLAMP_TOL * (1.0 + abs(floor)):
                    raise InfeasibleWealthError(
                        f"infeasible wealth {wealth:.12g} at node '{child.id}' below price {floor:.12g}"
                    )
                wealth = max(float(wealth), floor)
                policy.wealth[child.id] = wealth
                if child.is_terminal:
                    policy.terminal_consumption[child.id] = wealth - floor
                elif wealth > surfaces[child.id].upper:
                    stats['wealth_out_of_grid'] += 1
                    self.logger.warning(
                        f"Wealth {wealth:.12g} at node '{child.id}' exceeds the value grid "
                        f"(top {surfaces[child.id].upper:.12g}); continuation is extrapolated flat"
                    )

        return policy, worst_case, root_value, stats

    def worst_case_value(self, lattice: ScenarioLattice, payoff: PayoffSpec, result: RecursionResult,
                         utilities: UtilityProfile) -> RecursionResult:
        """Rerun the recursion with the worst-case measure as the only prior."""
        self.logger.info("Re-evaluating under the worst-case measure")
        return self.value_recursion(lattice, payoff, result.worst_case.as_prior_family(), utilities,
                                    x0=result.policy.initial_wealth)


def value_recursion(lattice: ScenarioLattice, payoff: PayoffSpec, priors: PriorFamily,
                    utilities: UtilityProfile, w_max: Optional[float] = None, grid_n: int = DEFAULT_GRID_N,
                    x0: Optional[float] = None, seed: int = 0, multistarts: int = DEFAULT_MULTISTARTS,
                    threads: int = 1, solver: Optional[str] = None) -> RecursionResult:
    """Module-level shortcut for ``UtilityOptimizer(...).value_recursion``."""
    optimizer = UtilityOptimizer(grid_n=grid_n, w_max=w_max, multistarts=multistarts, seed=seed,
                                 threads=threads, solver=solver)
    return optimizer.value_recursion(lattice, payoff, priors, utilities, x0=x0)


def _felicity(utilities: UtilityProfile, node, c: float) -> float:
    utility = utilities.for_node(node)
    if utility is None:
        return 0.0
    return float(utility(c))


def robust_policy_value(lattice: ScenarioLattice, payoff: PayoffSpec, priors: PriorFamily,
                        utilities: UtilityProfile, policy: OptimalPolicy, tol: float = FORWARD_CLAMP_TOL) -> float:
    """
    Worst-case expected utility of a policy.

    Wealth is rebuilt from the hedges and consumption, terminal consumption
    is the surplus over the claim, and the backward recursion
    R = u_t(c) + min_k sum_j P_kj R(child) equals the infimum over product
    prior selections.

    Returns:
        The robust value, or -inf if the policy consumes negatively or
        fails to superhedge
    """
    claims = terminal_values(lattice, payoff)
    wealth = {lattice.root_id: float(policy.initial_wealth)}
    for t in range(lattice.horizon):
        for node in lattice.nodes_at(t):
            c = policy.consumption.get(node.id, 0.0) if t > 0 else 0.0
            if c < -tol:
                return -np.inf
            hedge = policy.hedges.get(node.id, np.zeros(lattice.dimension))
            for child, step in zip(lattice.children(node.id), lattice.increments(node.id)):
                wealth[child.id] = wealth[node.id] - c + float(np.asarray(hedge) @ step)

    reward: Dict[str, float] = {}
    for leaf in lattice.leaves():
        surplus = wealth[leaf.id] - claims[leaf.id]
        if surplus < -tol * (1.0 + abs(claims[leaf.id])):
            return -np.inf
        reward[leaf.id] = _felicity(utilities, leaf, max(surplus, 0.0))

    for t in range(lattice.horizon - 1, -1, -1):
        for node in lattice.nodes_at(t):
            c = max(policy.consumption.get(node.id, 0.0), 0.0) if t > 0 else 0.0
            children = np.array([reward[child_id] for child_id in node.successors])
            worst = min(float(row[row > CHARGE_TOL] @ children[row > CHARGE_TOL]) for row in priors.for_node(node.id))
            reward[node.id] = (_felicity(utilities, node, c) if t > 0 else 0.0) + worst
    return reward[lattice.root_id]


def uniqueness_probe(lattice: ScenarioLattice, policy_a: OptimalPolicy, policy_b: OptimalPolicy,
                     worst_case: WorstCaseMeasure, utilities: UtilityProfile, tol: float = 1e-4) -> UniquenessReport:
    """
    Compare two optimal policies where the worst-case measure charges.

    Consumption must agree at every reachable node and hedge gains H·dS on
    every charged successor; hedges themselves may differ along directions
    orthogonal to the increments.
    """
    logger = logging.getLogger(__name__)
    if not utilities.strictly_concave:
        logger.info("Utilities are not strictly concave: uniqueness not guaranteed")
        return UniquenessReport(status="uniqueness not guaranteed", passed=None)

    reach = worst_case.reach(lattice)
    report = UniquenessReport(status="", passed=True)
    for t in range(lattice.horizon):
        for node in lattice.nodes_at(t):
            if reach.get(node.id, 0.0) <= CHARGE_TOL:
                continue
            report.nodes_compared += 1
            c_diff = abs(policy_a.consumption.get(node.id, 0.0) - policy_b.consumption.get(node.id, 0.0))
            report.max_consumption_diff = max(report.max_consumption_diff, c_diff)

            hedge_a = np.asarray(policy_a.hedges.get(node.id, np.zeros(lattice.dimension)), dtype=float)
            hedge_b = np.asarray(policy_b.hedges.get(node.id, np.zeros(lattice.dimension)), dtype=float)
            if np.max(np.abs(hedge_a - hedge_b)) > tol:
                report.hedges_identical = False
            row = worst_case.transitions.get(node.id)
            for j, step in enumerate(lattice.increments(node.id)):
                if row is not None and row[j] > CHARGE_TOL:
                    gain_diff = abs(float(hedge_a @ step) - float(hedge_b @ step))
                    report.max_gain_diff = max(report.max_gain_diff, gain_diff)

    report.passed = report.max_consumption_diff <= tol and report.max_gain_diff <= tol
    report.status = "unique on charged paths" if report.passed else "optimizers differ on charged paths"
    logger.info(f"Uniqueness probe: {report.status} (consumption diff {report.max_consumption_diff:.3e}, "
                f"gain diff {report.max_gain_diff:.3e})")
    return report
