"""
Backward-induction superhedging engine.

This module sweeps a scenario lattice from the leaves to the root. At every
node it prices the children's values with the primal envelope program (the
superhedging price) and, independently, with the dual martingale program,
and refuses to continue if the two disagree. From the price surface it
builds the minimal superhedging strategy with its consumption, simulates
wealth along paths and verifies arbitrary strategies against the claim.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from envelope_core import martingale_vertices, one_step_dual, one_step_primal
from market_model import (
    PayoffSpec, ScenarioLattice, enumerate_paths, evaluate_payoff, terminal_values
)
from na_check import check_lattice


DEFAULT_TOL = 1e-7
VERIFY_TOL = 1e-9
CONSUMPTION_TOL = 1e-10
MAX_ENUMERATED_PATHS = 100000


class SuperhedgeError(Exception):
    """Custom exception for superhedging engine errors."""
    pass


@dataclass
class PriceSurface:
    """Superhedging price and dual value at every node, with the one-step optimizers."""

    root_id: str
    pi: Dict[str, float] = field(default_factory=dict)
    dual: Dict[str, float] = field(default_factory=dict)
    hedges: Dict[str, np.ndarray] = field(default_factory=dict)
    weights: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def pi0(self) -> float:
        return self.pi[self.root_id]

    @property
    def dual0(self) -> float:
        return self.dual[self.root_id]

    def max_gap(self) -> float:
        return max(abs(self.pi[k] - self.dual[k]) for k in self.pi)


@dataclass
class HedgePlan:
    """
    A strategy with consumption.

    ``hedges`` holds the position chosen at each non-terminal node,
    ``increments`` the consumption on the edge into each node (0 at the
    root) and ``consumption`` its running total.
    """

    initial_capital: float
    hedges: Dict[str, np.ndarray] = field(default_factory=dict)
    wealth: Dict[str, float] = field(default_factory=dict)
    consumption: Dict[str, float] = field(default_factory=dict)
    increments: Dict[str, float] = field(default_factory=dict)


@dataclass
class VerificationReport:
    """Path-by-path check of V_T >= payoff and of non-decreasing consumption."""

    passed: bool
    min_slack: float
    worst_path: List[str]
    min_consumption_increment: float
    consumption_ok: bool
    paths_checked: int
    rows: List[Tuple[List[str], float, float, float]] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}, worst slack {self.min_slack:.12g}"


@dataclass
class EnumeratedDual:
    """Best product martingale measure built from one-step vertices."""

    value: float
    expectation: float
    path_probabilities: Dict[str, float]
    choices: Dict[str, np.ndarray]


Strategy = Union[HedgePlan, Dict[str, np.ndarray]]


class SuperhedgeEngine:
    """
    Computes price surfaces and minimal strategies on scenario lattices.

    Within a time slice node programs are independent and may run on a
    thread pool; slices are processed strictly from T-1 down to 0.
    """

    def __init__(self, tol: float = DEFAULT_TOL, threads: int = 1, check_na: bool = True,
                 verify_tol: float = VERIFY_TOL):
        """
        Initialize the engine.

        Args:
            tol: Allowed gap between primal and dual values at a node
            threads: Worker threads per time slice
            check_na: Run the lattice no-arbitrage check before pricing
            verify_tol: Slack tolerance for superhedge verification

        Raises:
            ValueError: If a tolerance or the thread count is not positive
        """
        if tol <= 0 or verify_tol <= 0:
            raise ValueError("Tolerances must be positive")
        if threads < 1:
            raise ValueError("Thread count must be at least 1")

        self.tol = tol
        self.threads = threads
        self.check_na = check_na
        self.verify_tol = verify_tol
        self.logger = logging.getLogger(__name__)

    def price(self, lattice: ScenarioLattice, payoff: PayoffSpec) -> PriceSurface:
        """
        Superhedging prices at every node by backward induction.

        Args:
            lattice: Valid lattice
            payoff: Claim to price

        Returns:
            PriceSurface with primal and dual values

        Raises:
            ArbitrageError: If some node admits one-step arbitrage
            SuperhedgeError: If primal and dual values disagree at a node
        """
        if self.check_na:
            check_lattice(lattice, threads=self.threads).raise_if_failed()

        surface = PriceSurface(root_id=lattice.root_id)
        for leaf_id, value in terminal_values(lattice, payoff).items():
            surface.pi[leaf_id] = value
            surface.dual[leaf_id] = value

        self.logger.info(f"Pricing '{payoff.kind}' claim on {len(lattice)} nodes")
        for t in range(lattice.horizon - 1, -1, -1):
            nodes = lattice.nodes_at(t)

            def solve_node(node):
                supports = lattice.successor_prices(node.id)
                s = node.price_vector
                primal, hedge = one_step_primal(supports, [surface.pi[c] for c in node.successors], s)
                dual, weights = one_step_dual(supports, [surface.dual[c] for c in node.successors], s)
                return node.id, primal, dual, hedge, weights

            results = self._map(solve_node, nodes)
            for node_id, primal, dual, hedge, weights in results:
                if abs(primal - dual) > self.tol * max(1.0, abs(primal)):
                    raise SuperhedgeError(
                        f"primal/dual mismatch at node '{node_id}': {primal:.12g} vs {dual:.12g}"
                    )
                surface.pi[node_id] = primal
                surface.dual[node_id] = dual
                surface.hedges[node_id] = hedge
                surface.weights[node_id] = weights
            self.logger.debug(f"Slice t={t} sealed ({len(nodes)} nodes)")

        self.logger.info(f"Superhedging price pi_0 = {surface.pi0:.12g}")
        return surface

    def _map(self, func, items):
        if self.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(func, items))
        return [func(item) for item in items]

    def minimal_strategy(self, lattice: ScenarioLattice, payoff: PayoffSpec,
                         surface: Optional[PriceSurface] = None) -> HedgePlan:
        """
        Minimal superhedging strategy with consumption.

        Starts from pi_0, holds the envelope hedge at each node and consumes
        pi_parent + H·dS - pi_child on every edge, so wealth equals the price
        surface everywhere.

        Raises:
            SuperhedgeError: For recombining lattices or broken plan invariants
        """
        if lattice.recombining:
            raise SuperhedgeError("minimal strategy needs a tree lattice (consumption is path-dependent)")
        if surface is None:
            surface = self.price(lattice, payoff)

        root = lattice.root
        plan = HedgePlan(initial_capital=surface.pi0)
        plan.wealth[root.id] = surface.pi0
        plan.consumption[root.id] = 0.0
        plan.increments[root.id] = 0.0

        for t in range(lattice.horizon):
            for node in lattice.nodes_at(t):
                hedge = surface.hedges[node.id]
                plan.hedges[node.id] = hedge
                for child in lattice.children(node.id):
                    gain = float(hedge @ (child.price_vector - node.price_vector))
                    increment = surface.pi[node.id] + gain - surface.pi[child.id]
                    scale = max(1.0, abs(surface.pi[node.id]))
                    if increment < -CONSUMPTION_TOL * scale:
                        raise SuperhedgeError(
                            f"negative consumption {increment:.3e} on edge '{node.id}' -> '{child.id}'"
                        )
                    plan.increments[child.id] = increment
                    plan.consumption[child.id] = plan.consumption[node.id] + increment
                    plan.wealth[child.id] = plan.wealth[node.id] + gain - increment

        self.logger.info(f"Built minimal strategy on {len(plan.hedges)} decision nodes")
        return plan

    def wealth_path(self, lattice: ScenarioLattice, x: float, strategy: Strategy,
                    path: List[str], consumption: Optional[Dict[str, float]] = None) -> List[float]:
        """
        Wealth V_0..V_T along a path.

        Args:
            lattice: Lattice the path lives on
            x: Initial capital
            strategy: A HedgePlan or a mapping from node id to position
            path: Node ids from the root to a leaf
            consumption: Consumption increments per node (defaults to the
                plan's increments, or zero for a bare mapping)

        Returns:
            Wealth after consumption at each time
        """
        hedges, increments = self._unpack(strategy, consumption)
        wealth = [float(x) - increments.get(path[0], 0.0)]
        for parent_id, child_id in zip(path, path[1:]):
            step = lattice.node(child_id).price_vector - lattice.node(parent_id).price_vector
            hedge = hedges.get(parent_id)
            gain = float(np.asarray(hedge) @ step) if hedge is not None else 0.0
            wealth.append(wealth[-1] + gain - increments.get(child_id, 0.0))
        return wealth

    def _unpack(self, strategy: Strategy,
                consumption: Optional[Dict[str, float]]) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
        if isinstance(strategy, HedgePlan):
            return strategy.hedges, consumption if consumption is not None else strategy.increments
        return strategy, consumption or {}

    def verify_superhedge(self, lattice: ScenarioLattice, payoff: PayoffSpec, x: float,
                          strategy: Strategy, consumption: Optional[Dict[str, float]] = None) -> VerificationReport:
        """
        Check a strategy on every lattice path.

        Args:
            lattice: Lattice to check on
            payoff: Claim that must be covered
            x: Initial capital
            strategy: HedgePlan or node -> position mapping
            consumption: Consumption increments per node (plan increments or none)

        Returns:
            VerificationReport with the smallest slack V_T - payoff
        """
        paths = enumerate_paths(lattice)
        _, increments = self._unpack(strategy, consumption)

        rows = []
        for path in paths:
            terminal = self.wealth_path(lattice, x, strategy, path, consumption)[-1]
            claim = evaluate_payoff(payoff, lattice, path) if not lattice.recombining \
                else payoff.evaluate([lattice.root.price, lattice.node(path[-1]).price])
            rows.append((path, terminal, claim, terminal - claim))

        worst = min(rows, key=lambda row: row[3])
        min_increment = min(increments.values(), default=0.0)
        consumption_ok = min_increment >= -CONSUMPTION_TOL
        passed = worst[3] >= -self.verify_tol and consumption_ok

        report = VerificationReport(
            passed=passed,
            min_slack=worst[3],
            worst_path=list(worst[0]),
            min_consumption_increment=min_increment,
            consumption_ok=consumption_ok,
            paths_checked=len(paths),
            rows=rows,
        )
        self.logger.info(f"Verified {len(paths)} paths: {report.verdict}")
        return report

    def dual_by_enumeration(self, lattice: ScenarioLattice, payoff: PayoffSpec) -> EnumeratedDual:
        """
        Maximize E_Q[payoff] over product martingale measures built from
        one-step martingale vertices, without any linear program.

        Raises:
            SuperhedgeError: If the lattice has too many paths
        """
        paths = enumerate_paths(lattice)
        if len(paths) > MAX_ENUMERATED_PATHS:
            raise SuperhedgeError(f"{len(paths)} paths exceed the enumeration limit {MAX_ENUMERATED_PATHS}")

        value = dict(terminal_values(lattice, payoff))
        choices: Dict[str, np.ndarray] = {}
        for t in range(lattice.horizon - 1, -1, -1):
            for node in lattice.nodes_at(t):
                vertices = martingale_vertices(lattice.successor_prices(node.id), node.price_vector)
                if not vertices:
                    raise SuperhedgeError(f"no martingale measure at node '{node.id}'")
                continuation = np.array([value[c] for c in node.successors])
                scores = [float(v @ continuation) for v in vertices]
                best = int(np.argmax(scores))
                choices[node.id] = vertices[best]
                value[node.id] = scores[best]

        probabilities: Dict[str, float] = {}
        expectation = 0.0
        for path in paths:
            probability = 1.0
            for parent_id, child_id in zip(path, path[1:]):
                index = lattice.node(parent_id).successors.index(child_id)
                probability *= choices[parent_id][index]
            key = '>'.join(path)
            probabilities[key] = probability
            claim = value[path[-1]]
            expectation += probability * claim

        self.logger.info(f"Enumerated dual value {value[lattice.root_id]:.12g} over {len(paths)} paths")
        return EnumeratedDual(value[lattice.root_id], expectation, probabilities, choices)
