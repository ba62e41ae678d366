"""
Market model definitions for robust superhedging on scenario lattices.

This module defines the discretized multi-prior market: the scenario lattice
(time-indexed nodes carrying d-dimensional prices), the claim to be hedged,
the finite prior families attached to each node and the utility profile used
by the max-min consumption layer. It also reads and writes model documents
(UTF-8 JSON) and expands the shorthand lattice generators.
"""

import ast
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np


SUPPORT_MERGE_RTOL = 1e-12
PROBABILITY_ATOL = 1e-12
MAX_GENERATED_NODES = 200000

TERMINAL_PAYOFF_KINDS = ('call', 'put', 'straddle', 'linear', 'min', 'max', 'constant', 'formula')
PATH_PAYOFF_KINDS = ('running_min', 'running_max', 'asian_call', 'table')


class ModelValidationError(Exception):
    """Custom exception for invalid model documents and model objects."""
    pass


class PayoffEvaluationError(ModelValidationError):
    """Exception raised when a payoff cannot be evaluated on a path."""
    pass


@dataclass(frozen=True)
class Node:
    """A lattice node: time index, price vector and ordered successor ids."""

    id: str
    time: int
    price: Tuple[float, ...]
    successors: Tuple[str, ...] = ()

    @property
    def is_terminal(self) -> bool:
        return not self.successors

    @property
    def price_vector(self) -> np.ndarray:
        return np.array(self.price, dtype=float)


class ScenarioLattice:
    """
    Time-indexed tree of price nodes.

    Successor sets are the finite supports of the one-step prior sets. With
    ``recombining=True`` nodes may have several predecessors; such lattices
    only carry terminal-price claims.
    """

    def __init__(self, horizon: int, dimension: int, nodes: Sequence[Node],
                 root_id: Optional[str] = None, recombining: bool = False):
        """
        Build and validate a lattice.

        Args:
            horizon: Final time index T (at least 1)
            dimension: Number of traded assets d (at least 1)
            nodes: All lattice nodes
            root_id: Id of the time-0 node; inferred when omitted
            recombining: Allow several predecessors per node

        Raises:
            ModelValidationError: If any structural invariant fails
        """
        if isinstance(horizon, bool) or not isinstance(horizon, int) or horizon < 1:
            raise ModelValidationError("horizon must be ≥ 1")
        if isinstance(dimension, bool) or not isinstance(dimension, int) or dimension < 1:
            raise ModelValidationError("dimension must be ≥ 1")

        self.horizon = horizon
        self.dimension = dimension
        self.recombining = recombining
        self.logger = logging.getLogger(__name__)

        self._nodes: Dict[str, Node] = {}
        for node in nodes:
            if node.id in self._nodes:
                raise ModelValidationError(f"duplicate node id '{node.id}'")
            self._nodes[node.id] = node

        roots = [node.id for node in nodes if node.time == 0]
        if root_id is None:
            if len(roots) != 1:
                raise ModelValidationError(f"expected exactly one time-0 node, found {len(roots)}")
            root_id = roots[0]
        if root_id not in self._nodes:
            raise ModelValidationError(f"root id '{root_id}' is not a node")
        self.root_id = root_id

        self._parents: Dict[str, List[str]] = {node_id: [] for node_id in self._nodes}
        self._validate()
        self._by_time: Dict[int, List[str]] = {t: [] for t in range(horizon + 1)}
        for node in self._nodes.values():
            self._by_time[node.time].append(node.id)

    def _validate(self) -> None:
        for node in self._nodes.values():
            if len(node.price) != self.dimension:
                raise ModelValidationError(
                    f"node '{node.id}' has price of length {len(node.price)}, expected {self.dimension}"
                )
            if not all(math.isfinite(p) for p in node.price):
                raise ModelValidationError(f"node '{node.id}' has a non-finite price")
            if any(p < 0 for p in node.price):
                raise ModelValidationError(f"negative price at node '{node.id}'")
            if node.time < 0 or node.time > self.horizon:
                raise ModelValidationError(f"node '{node.id}' has time {node.time} outside [0, {self.horizon}]")
            if node.is_terminal and node.time != self.horizon:
                raise ModelValidationError(
                    f"node '{node.id}' at time {node.time} < {self.horizon} has no successors"
                )
            if len(set(node.successors)) != len(node.successors):
                raise ModelValidationError(f"node '{node.id}' lists a successor twice")

            for child_id in node.successors:
                child = self._nodes.get(child_id)
                if child is None:
                    raise ModelValidationError(f"dangling successor id '{child_id}' at node '{node.id}'")
                if child.time != node.time + 1:
                    raise ModelValidationError(
                        f"successor '{child_id}' of time-{node.time} node '{node.id}' has time {child.time}"
                    )
                self._parents[child_id].append(node.id)

            prices = [np.array(self._nodes[c].price) for c in node.successors]
            for i in range(len(prices)):
                for j in range(i + 1, len(prices)):
                    if prices_coincide(prices[i], prices[j]):
                        raise ModelValidationError(
                            f"node '{node.id}' has duplicate successor prices at "
                            f"'{node.successors[i]}' and '{node.successors[j]}'"
                        )

        root = self._nodes[self.root_id]
        if root.time != 0:
            raise ModelValidationError(f"root '{self.root_id}' must have time 0")
        if not all(p > 0 for p in root.price):
            raise ModelValidationError("root price must be strictly positive")

        for node_id, parents in self._parents.items():
            if node_id == self.root_id:
                if parents:
                    raise ModelValidationError("root node cannot have a predecessor")
                continue
            if not parents:
                raise ModelValidationError(f"node '{node_id}' is unreachable from the root")
            if len(parents) > 1 and not self.recombining:
                raise ModelValidationError(
                    f"node '{node_id}' has {len(parents)} predecessors; lattice is not a tree"
                )

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self):
        return iter(self._nodes.values())

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    @property
    def root(self) -> Node:
        return self._nodes[self.root_id]

    def node(self, node_id: str) -> Node:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise ModelValidationError(f"unknown node id '{node_id}'")

    def children(self, node_id: str) -> List[Node]:
        return [self._nodes[c] for c in self.node(node_id).successors]

    def parents(self, node_id: str) -> List[str]:
        return list(self._parents[node_id])

    def nodes_at(self, time: int) -> List[Node]:
        return [self._nodes[i] for i in self._by_time.get(time, [])]

    def leaves(self) -> List[Node]:
        return self.nodes_at(self.horizon)

    def successor_prices(self, node_id: str) -> np.ndarray:
        """Successor prices of a node as an (n, d) array."""
        return np.array([self._nodes[c].price for c in self.node(node_id).successors], dtype=float)

    def increments(self, node_id: str) -> np.ndarray:
        return self.successor_prices(node_id) - self.node(node_id).price_vector

    def path_to(self, node_id: str) -> List[str]:
        """
        Root-to-node path in a tree lattice.

        Raises:
            ModelValidationError: If the lattice is recombining
        """
        if self.recombining:
            raise ModelValidationError("paths are not determined by nodes in a recombining lattice")
        path = [node_id]
        while path[-1] != self.root_id:
            path.append(self._parents[path[-1]][0])
        return path[::-1]


def prices_coincide(a: np.ndarray, b: np.ndarray) -> bool:
    """Equality of support points at the merge tolerance (relative)."""
    scale = np.maximum(np.abs(a), np.abs(b))
    return bool(np.all(np.abs(a - b) <= SUPPORT_MERGE_RTOL * scale))


class _FormulaEvaluator:
    """Restricted arithmetic over named prices, parsed with ``ast``."""

    _FUNCTIONS: Dict[str, Callable[..., float]] = {'max': max, 'min': min, 'abs': abs}
    _BINARY = {
        ast.Add: lambda a, b: a + b,
        ast.Sub: lambda a, b: a - b,
        ast.Mult: lambda a, b: a * b,
        ast.Div: lambda a, b: a / b,
        ast.Pow: lambda a, b: a ** b,
    }

    def __init__(self, expression: str):
        try:
            self.tree = ast.parse(expression, mode='eval')
        except SyntaxError as e:
            raise PayoffEvaluationError(f"cannot parse formula '{expression}': {e.msg}")
        self.expression = expression
        self.symbols = sorted({
            n.id for n in ast.walk(self.tree)
            if isinstance(n, ast.Name) and n.id not in self._FUNCTIONS
        })

    def __call__(self, bindings: Dict[str, float]) -> float:
        try:
            return float(self._eval(self.tree.body, bindings))
        except ZeroDivisionError:
            raise PayoffEvaluationError(f"division by zero in formula '{self.expression}'")

    def _eval(self, node: ast.AST, bindings: Dict[str, float]) -> float:
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id not in bindings:
                raise PayoffEvaluationError(f"unbound symbol '{node.id}' in formula '{self.expression}'")
            return bindings[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in self._BINARY:
            return self._BINARY[type(node.op)](self._eval(node.left, bindings), self._eval(node.right, bindings))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            value = self._eval(node.operand, bindings)
            return -value if isinstance(node.op, ast.USub) else value
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in self._FUNCTIONS and not node.keywords:
            args = [self._eval(arg, bindings) for arg in node.args]
            return self._FUNCTIONS[node.func.id](*args)
        raise PayoffEvaluationError(f"unsupported construct in formula '{self.expression}'")


@dataclass(frozen=True)
class PayoffSpec:
    """
    The claim to be superhedged.

    Terminal kinds depend only on the leaf price; path kinds see the whole
    price path S_0..S_T. Tables are keyed by leaf id, which identifies the
    terminal path in a tree lattice.
    """

    kind: str
    params: Dict[str, Any] = field(default_factory=dict)
    values: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TERMINAL_PAYOFF_KINDS + PATH_PAYOFF_KINDS:
            raise ModelValidationError(f"unknown payoff kind '{self.kind}'")
        if self.kind in ('call', 'put', 'straddle', 'asian_call'):
            strike = self.params.get('strike')
            if not _is_number(strike):
                raise ModelValidationError(f"payoff '{self.kind}' needs a numeric 'strike'")
        if self.kind == 'constant' and not _is_number(self.params.get('value')):
            raise ModelValidationError("payoff 'constant' needs a numeric 'value'")
        if self.kind == 'linear' and 'weights' not in self.params:
            raise ModelValidationError("payoff 'linear' needs 'weights'")
        if self.kind == 'formula':
            expression = self.params.get('expr')
            if not isinstance(expression, str):
                raise ModelValidationError("payoff 'formula' needs a string 'expr'")
            object.__setattr__(self, '_formula', _FormulaEvaluator(expression))
        if self.kind == 'table':
            for key, value in self.values.items():
                if not _is_number(value) or not math.isfinite(value):
                    raise ModelValidationError(f"payoff table value for '{key}' must be a finite number")

    @property
    def category(self) -> str:
        if self.kind in TERMINAL_PAYOFF_KINDS:
            return 'terminal-price-function'
        return 'path-function'

    @property
    def is_terminal_price_function(self) -> bool:
        return self.category == 'terminal-price-function'

    def check_dimension(self, dimension: int) -> None:
        """Reject parameters that do not fit a d-asset market."""
        asset = self.params.get('asset', 0)
        if not isinstance(asset, int) or not 0 <= asset < dimension:
            raise ModelValidationError(f"payoff asset index {asset} outside [0, {dimension})")
        if self.kind == 'linear':
            weights = np.atleast_1d(np.asarray(self.params['weights'], dtype=float))
            if weights.size not in (1, dimension):
                raise ModelValidationError(f"linear payoff has {weights.size} weights for {dimension} assets")
        if self.kind == 'formula':
            allowed = {f"S{k + 1}" for k in range(dimension)} | {f"S0_{k + 1}" for k in range(dimension)}
            unbound = [s for s in self._formula.symbols if s not in allowed]
            if unbound:
                raise PayoffEvaluationError(f"unbound symbol '{unbound[0]}' in formula '{self.params['expr']}'")

    def evaluate(self, prices: Sequence[Sequence[float]], leaf_id: Optional[str] = None) -> float:
        """
        Evaluate the claim on a price path.

        Args:
            prices: Price vectors S_0..S_T along the path
            leaf_id: Terminal node id (required for tables)

        Returns:
            Finite payoff value

        Raises:
            PayoffEvaluationError: If the path cannot be evaluated
        """
        path = [np.atleast_1d(np.asarray(p, dtype=float)) for p in prices]
        if not path:
            raise PayoffEvaluationError("empty price path")
        terminal = path[-1]
        asset = self.params.get('asset', 0)
        kind = self.kind

        if kind == 'call':
            value = max(terminal[asset] - self.params['strike'], 0.0)
        elif kind == 'put':
            value = max(self.params['strike'] - terminal[asset], 0.0)
        elif kind == 'straddle':
            value = abs(terminal[asset] - self.params['strike'])
        elif kind == 'linear':
            weights = np.asarray(self.params['weights'], dtype=float)
            value = float(np.sum(weights * terminal)) + float(self.params.get('intercept', 0.0))
        elif kind == 'min':
            value = float(np.min(terminal))
        elif kind == 'max':
            value = float(np.max(terminal))
        elif kind == 'constant':
            value = float(self.params['value'])
        elif kind == 'formula':
            bindings = {f"S{k + 1}": float(v) for k, v in enumerate(terminal)}
            bindings.update({f"S0_{k + 1}": float(v) for k, v in enumerate(path[0])})
            value = self._formula(bindings)
        elif kind == 'running_min':
            value = min(float(p[asset]) for p in path)
        elif kind == 'running_max':
            value = max(float(p[asset]) for p in path)
        elif kind == 'asian_call':
            observed = path[1:] if len(path) > 1 else path
            average = sum(float(p[asset]) for p in observed) / len(observed)
            value = max(average - self.params['strike'], 0.0)
        else:
            if leaf_id not in self.values:
                raise PayoffEvaluationError(f"payoff missing for terminal path '{leaf_id}'")
            value = float(self.values[leaf_id])

        if not math.isfinite(value):
            raise PayoffEvaluationError(f"payoff '{kind}' is not finite on the given path")
        return float(value)

    def to_document(self) -> Dict[str, Any]:
        if self.kind == 'table':
            return {'kind': 'table', 'values': dict(self.values)}
        return {'kind': self.kind, 'params': dict(self.params)}


class UtilityFunction:
    """Base class for one-dimensional utilities on [0, inf), -inf below 0."""

    family = ''
    strictly_concave = True

    def _value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        x_arr = np.asarray(x, dtype=float)
        out = np.where(x_arr >= 0, self._value(np.maximum(x_arr, 0.0)), -np.inf)
        return float(out) if out.ndim == 0 else out

    def params(self) -> Dict[str, Any]:
        return {}

    def to_document(self) -> Dict[str, Any]:
        return {'family': self.family, 'params': self.params()}

    def __eq__(self, other) -> bool:
        return isinstance(other, UtilityFunction) and self.to_document() == other.to_document()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.params()})"


class ExponentialUtility(UtilityFunction):
    """u(x) = 1 - exp(-gamma x)."""

    family = 'exponential'

    def __init__(self, gamma: float = 1.0):
        if not _is_number(gamma) or gamma <= 0:
            raise ModelValidationError(f"exponential utility needs gamma > 0, got {gamma}")
        self.gamma = float(gamma)

    def _value(self, x: np.ndarray) -> np.ndarray:
        return 1.0 - np.exp(-self.gamma * x)

    def params(self) -> Dict[str, Any]:
        return {'gamma': self.gamma}


class BoundedPowerUtility(UtilityFunction):
    """u(x) = x / (1 + x)."""

    family = 'bounded_power'

    def _value(self, x: np.ndarray) -> np.ndarray:
        return x / (1.0 + x)


class PiecewiseLinearUtility(UtilityFunction):
    """Concave non-decreasing table, flat after the last breakpoint."""

    family = 'piecewise_linear'
    strictly_concave = False

    def __init__(self, breakpoints: Sequence[float], values: Sequence[float]):
        xs = np.asarray(breakpoints, dtype=float)
        ys = np.asarray(values, dtype=float)
        if xs.ndim != 1 or xs.size < 2 or xs.size != ys.size:
            raise ModelValidationError("piecewise-linear utility needs matching breakpoints and values (at least 2)")
        if xs[0] != 0.0:
            raise ModelValidationError("piecewise-linear utility must start at breakpoint 0")
        if np.any(np.diff(xs) <= 0):
            raise ModelValidationError("piecewise-linear utility breakpoints must increase")
        slopes = np.diff(ys) / np.diff(xs)
        if np.any(slopes < -1e-12):
            raise ModelValidationError("piecewise-linear utility must be non-decreasing")
        if np.any(np.diff(slopes) > 1e-12):
            raise ModelValidationError("piecewise-linear utility must be concave")
        self.breakpoints = xs
        self.values = ys
        self.slopes = slopes

    def _value(self, x: np.ndarray) -> np.ndarray:
        return np.interp(x, self.breakpoints, self.values)

    def params(self) -> Dict[str, Any]:
        return {'breakpoints': self.breakpoints.tolist(), 'values': self.values.tolist()}


UTILITY_FAMILIES = {
    'exponential': ExponentialUtility,
    'bounded_power': BoundedPowerUtility,
    'piecewise_linear': PiecewiseLinearUtility,
}


def make_utility(spec: Dict[str, Any]) -> UtilityFunction:
    """
    Build a utility from a ``{family, params}`` document.

    Raises:
        ModelValidationError: If the family is unknown or parameters are bad
    """
    if not isinstance(spec, dict) or 'family' not in spec:
        raise ModelValidationError("utility entry must be an object with a 'family'")
    family = spec['family']
    if family not in UTILITY_FAMILIES:
        raise ModelValidationError(f"unknown utility family '{family}'")
    params = spec.get('params') or {}
    if not isinstance(params, dict):
        raise ModelValidationError("utility 'params' must be an object")
    try:
        return UTILITY_FAMILIES[family](**params)
    except TypeError as e:
        raise ModelValidationError(f"bad parameters for utility '{family}': {e}")


class UtilityProfile:
    """
    Per-time utilities with optional per-node overrides.

    ``default`` answers every time index without an explicit entry.
    """

    def __init__(self, by_time: Dict[int, UtilityFunction],
                 node_overrides: Optional[Dict[str, UtilityFunction]] = None,
                 default: Optional[UtilityFunction] = None):
        self.by_time = dict(by_time)
        self.node_overrides = dict(node_overrides or {})
        self.default = default
        u0 = self.at_time(0)
        if u0 is not None and abs(u0(0.0)) > 1e-12:
            raise ModelValidationError("time-0 utility must satisfy u_0(0) = 0")

    @classmethod
    def uniform(cls, utility: UtilityFunction) -> 'UtilityProfile':
        return cls({}, default=utility)

    def at_time(self, time: int) -> Optional[UtilityFunction]:
        return self.by_time.get(time, self.default)

    def for_node(self, node: Node) -> Optional[UtilityFunction]:
        if node.id in self.node_overrides:
            return self.node_overrides[node.id]
        return self.at_time(node.time)

    def require_times(self, horizon: int) -> None:
        missing = [t for t in range(1, horizon + 1) if self.at_time(t) is None]
        if missing:
            raise ModelValidationError(f"no utility given for time(s) {missing}")

    @property
    def strictly_concave(self) -> bool:
        utilities = list(self.by_time.values()) + list(self.node_overrides.values())
        if self.default is not None:
            utilities.append(self.default)
        return all(u.strictly_concave for u in utilities)

    def to_document(self) -> Dict[str, Any]:
        document: Dict[str, Any] = self.default.to_document() if self.default is not None else {}
        if self.by_time:
            document['times'] = {str(t): u.to_document() for t, u in sorted(self.by_time.items())}
        if self.node_overrides:
            document['node_overrides'] = {k: u.to_document() for k, u in self.node_overrides.items()}
        return document


class PriorFamily:
    """Finite lists of one-step probability vectors, one list per node."""

    def __init__(self, priors: Dict[str, Sequence[Sequence[float]]]):
        self._priors: Dict[str, List[np.ndarray]] = {}
        for node_id, vectors in priors.items():
            self._priors[node_id] = [np.asarray(v, dtype=float) for v in vectors]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._priors

    def for_node(self, node_id: str) -> List[np.ndarray]:
        if node_id not in self._priors:
            raise ModelValidationError(f"no priors given for node '{node_id}'")
        return [v.copy() for v in self._priors[node_id]]

    def node_ids(self) -> List[str]:
        return list(self._priors)

    def validate_against(self, lattice: ScenarioLattice, require_all: bool = False) -> None:
        """
        Check every prior list against the node's successor set.

        Raises:
            ModelValidationError: On a malformed or non-normalized vector
        """
        for node_id, vectors in self._priors.items():
            node = lattice.node(node_id)
            if node.is_terminal:
                raise ModelValidationError(f"priors given for terminal node '{node_id}'")
            if not vectors:
                raise ModelValidationError(f"empty prior list at node '{node_id}'")
            for vector in vectors:
                if vector.ndim != 1 or vector.size != len(node.successors):
                    raise ModelValidationError(
                        f"prior at node '{node_id}' has {vector.size} entries for {len(node.successors)} successors"
                    )
                if not np.all(np.isfinite(vector)) or np.any(vector < 0):
                    raise ModelValidationError(f"prior at node '{node_id}' has negative or non-finite mass")
                total = float(vector.sum())
                if abs(total - 1.0) > PROBABILITY_ATOL:
                    raise ModelValidationError(f"probability mass {total:g} ≠ 1 at node '{node_id}'")
        if require_all:
            missing = [n.id for n in lattice if not n.is_terminal and n.id not in self._priors]
            if missing:
                raise ModelValidationError(f"no priors given for node(s) {missing[:5]}")

    def to_document(self) -> Dict[str, List[List[float]]]:
        return {k: [v.tolist() for v in vectors] for k, vectors in self._priors.items()}


@dataclass
class MarketModel:
    """A loaded model: lattice plus the optional claim, priors and utilities."""

    lattice: ScenarioLattice
    payoff: Optional[PayoffSpec] = None
    priors: Optional[PriorFamily] = None
    utilities: Optional[UtilityProfile] = None
    merged: List[Tuple[str, str]] = field(default_factory=list)

    def as_tuple(self) -> Tuple[ScenarioLattice, Optional[PayoffSpec], Optional[PriorFamily], Optional[UtilityProfile]]:
        return self.lattice, self.payoff, self.priors, self.utilities

    def require_payoff(self) -> PayoffSpec:
        if self.payoff is None:
            raise ModelValidationError("model has no payoff")
        return self.payoff


def enumerate_paths(lattice: ScenarioLattice) -> List[List[str]]:
    """
    List every root-to-leaf path in successor order.

    Args:
        lattice: Valid lattice

    Returns:
        Paths as lists of node ids
    """
    paths: List[List[str]] = []
    stack: List[List[str]] = [[lattice.root_id]]
    while stack:
        path = stack.pop()
        node = lattice.node(path[-1])
        if node.is_terminal:
            paths.append(path)
            continue
        for child_id in reversed(node.successors):
            stack.append(path + [child_id])
    return paths


def evaluate_payoff(payoff: PayoffSpec, lattice: ScenarioLattice, path: Sequence[str]) -> float:
    """
    Evaluate a claim on a lattice path given as node ids.

    Raises:
        ModelValidationError: If the path is not a valid root-to-leaf path
        PayoffEvaluationError: If the claim cannot be evaluated
    """
    if not path or path[0] != lattice.root_id:
        raise ModelValidationError("path must start at the root")
    for parent_id, child_id in zip(path, path[1:]):
        if child_id not in lattice.node(parent_id).successors:
            raise ModelValidationError(f"'{child_id}' is not a successor of '{parent_id}'")
    if not lattice.node(path[-1]).is_terminal:
        raise ModelValidationError(f"path ends at non-terminal node '{path[-1]}'")
    prices = [lattice.node(node_id).price for node_id in path]
    return payoff.evaluate(prices, leaf_id=path[-1])


def terminal_values(lattice: ScenarioLattice, payoff: PayoffSpec) -> Dict[str, float]:
    """
    Claim value at every leaf.

    Raises:
        ModelValidationError: If a path claim is paired with a recombining lattice
    """
    values = {}
    for leaf in lattice.leaves():
        if lattice.recombining:
            if not payoff.is_terminal_price_function:
                raise ModelValidationError("recombining lattices require a terminal-price payoff")
            values[leaf.id] = payoff.evaluate([lattice.root.price, leaf.price], leaf_id=leaf.id)
        else:
            values[leaf.id] = evaluate_payoff(payoff, lattice, lattice.path_to(leaf.id))
    return values


def load_model(source: Union[str, Path, Dict[str, Any]]) -> MarketModel:
    """
    Load and validate a model document.

    Args:
        source: Path to a JSON file, a JSON string or an already parsed document

    Returns:
        Fully validated MarketModel with duplicate support points merged

    Raises:
        ModelValidationError: If the document violates the model schema
    """
    logger = logging.getLogger(__name__)
    document = _read_document(source)

    if 'generator' in document:
        raw_nodes, root_id, horizon, dimension, recombine = _expand_generator(document)
    else:
        raw_nodes, root_id, horizon, dimension, recombine = _parse_nodes(document)

    original_successors = {node_id: list(raw['successors']) for node_id, raw in raw_nodes.items()}
    merged = _merge_duplicate_successors(raw_nodes, root_id)
    if merged:
        logger.info(f"Merged {len(merged)} duplicate support points")

    nodes = [
        Node(node_id, raw['time'], tuple(raw['price']), tuple(raw['successors']))
        for node_id, raw in raw_nodes.items()
    ]
    lattice = ScenarioLattice(horizon, dimension, nodes, root_id=root_id, recombining=recombine)

    payoff = None
    if document.get('payoff') is not None:
        payoff = _parse_payoff(document['payoff'], merged)
        payoff.check_dimension(dimension)
        if recombine and not payoff.is_terminal_price_function:
            raise ModelValidationError("recombining lattices require a terminal-price payoff")
        if payoff.kind == 'table':
            missing = [leaf.id for leaf in lattice.leaves() if leaf.id not in payoff.values]
            if missing:
                raise ModelValidationError(f"payoff missing for terminal path '{missing[0]}'")

    priors = None
    if document.get('priors_u') is not None:
        priors = _parse_priors(document['priors_u'], lattice, original_successors, merged)
        priors.validate_against(lattice)

    utilities = None
    if document.get('utility') is not None:
        utilities = _parse_utility(document['utility'])

    logger.info(f"Loaded model: T={horizon}, d={dimension}, {len(lattice)} nodes, {len(lattice.leaves())} leaves")
    return MarketModel(lattice, payoff, priors, utilities, merged)


def serialize_model(model: MarketModel) -> Dict[str, Any]:
    """Explicit-node document that ``load_model`` reads back node-for-node."""
    lattice = model.lattice
    document: Dict[str, Any] = {
        'horizon': lattice.horizon,
        'dimension': lattice.dimension,
        'root_price': list(lattice.root.price),
        'nodes': [
            {'id': n.id, 'time': n.time, 'price': list(n.price), 'successors': list(n.successors)}
            for n in lattice
        ],
    }
    if lattice.recombining:
        document['recombine'] = True
    if model.payoff is not None:
        document['payoff'] = model.payoff.to_document()
    if model.priors is not None:
        document['priors_u'] = model.priors.to_document()
    if model.utilities is not None:
        document['utility'] = model.utilities.to_document()
    return document


def save_model(model: MarketModel, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(serialize_model(model), indent=2), encoding='utf-8')


def _read_document(source: Union[str, Path, Dict[str, Any]]) -> Dict[str, Any]:
    if isinstance(source, dict):
        return source
    try:
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith('{')):
            text = Path(source).read_text(encoding='utf-8')
        else:
            text = source
        document = json.loads(text)
    except OSError as e:
        raise ModelValidationError(f"cannot read model file: {e}")
    except json.JSONDecodeError as e:
        raise ModelValidationError(f"model document is not valid JSON: {e}")
    if not isinstance(document, dict):
        raise ModelValidationError("model document must be a JSON object")
    return document


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _require(document: Dict[str, Any], key: str) -> Any:
    if key not in document:
        raise ModelValidationError(f"model document is missing '{key}'")
    return document[key]


def _as_price(value: Any, where: str) -> List[float]:
    values = value if isinstance(value, list) else [value]
    if not values or not all(_is_number(v) for v in values):
        raise ModelValidationError(f"{where}: price must be a number or a list of numbers")
    return [float(v) for v in values]


def _parse_nodes(document: Dict[str, Any]):
    horizon = _require(document, 'horizon')
    if not _is_number(horizon) or int(horizon) != horizon or horizon < 1:
        raise ModelValidationError("horizon must be ≥ 1")
    dimension = _require(document, 'dimension')
    if not _is_number(dimension) or int(dimension) != dimension or dimension < 1:
        raise ModelValidationError("dimension must be ≥ 1")
    root_price = _as_price(_require(document, 'root_price'), 'root_price')
    entries = _require(document, 'nodes')
    if not isinstance(entries, list) or not entries:
        raise ModelValidationError("'nodes' must be a non-empty list")

    if not all(isinstance(entry, dict) for entry in entries):
        raise ModelValidationError("each node must be an object")
    known_ids = {str(entry.get('id')) for entry in entries}

    raw_nodes: Dict[str, Dict[str, Any]] = {}
    for entry in entries:
        for key in ('id', 'time', 'price'):
            if key not in entry:
                raise ModelValidationError(f"node entry is missing '{key}'")
        node_id = str(entry['id'])
        time = entry['time']
        if not _is_number(time) or int(time) != time:
            raise ModelValidationError(f"node '{node_id}' has a non-integer time")
        successors = entry.get('successors', [])
        if not isinstance(successors, list):
            raise ModelValidationError(f"node '{node_id}' successors must be a list")
        if node_id in raw_nodes:
            raise ModelValidationError(f"duplicate node id '{node_id}'")
        raw_nodes[node_id] = {
            'time': int(time),
            'price': _as_price(entry['price'], f"node '{node_id}'"),
            'successors': [str(s) for s in successors],
        }
        for child_id in raw_nodes[node_id]['successors']:
            if child_id not in known_ids:
                raise ModelValidationError(f"dangling successor id '{child_id}' at node '{node_id}'")

    roots = [node_id for node_id, raw in raw_nodes.items() if raw['time'] == 0]
    if len(roots) != 1:
        raise ModelValidationError(f"expected exactly one time-0 node, found {len(roots)}")
    root_id = roots[0]
    if len(root_price) != len(raw_nodes[root_id]['price']) or not np.allclose(
            root_price, raw_nodes[root_id]['price'], rtol=SUPPORT_MERGE_RTOL, atol=0.0):
        raise ModelValidationError("root_price does not match the time-0 node price")

    return raw_nodes, root_id, int(horizon), int(dimension), bool(document.get('recombine', False))


def _expand_generator(document: Dict[str, Any]):
    kind = document['generator']
    if kind not in ('crr', 'interval'):
        raise ModelValidationError(f"unknown generator '{kind}'")
    for key in ('T', 'u', 'd', 's0'):
        if key not in document:
            raise ModelValidationError(f"generator '{kind}' is missing '{key}'")
    horizon, up, down, s0 = document['T'], document['u'], document['d'], document['s0']
    if not _is_number(horizon) or int(horizon) != horizon or horizon < 1:
        raise ModelValidationError("horizon must be ≥ 1")
    if not all(_is_number(v) for v in (up, down, s0)) or down <= 0 or up < down or s0 <= 0:
        raise ModelValidationError("generator needs s0 > 0 and 0 < d ≤ u")
    horizon = int(horizon)
    recombine = bool(document.get('recombine', False))

    if kind == 'crr':
        factors = [float(up), float(down)]
        labels = ['u', 'd']
    else:
        points = document.get('points', 2)
        if not _is_number(points) or int(points) != points or points < 2:
            raise ModelValidationError("interval generator needs 'points' ≥ 2")
        factors = list(np.linspace(float(down), float(up), int(points)))[::-1]
        labels = [f".{k}" for k in range(len(factors))]
        if recombine:
            raise ModelValidationError("interval generator does not recombine")

    if recombine:
        return _recombining_crr(horizon, factors, float(s0))

    n_nodes = sum(len(factors) ** t for t in range(horizon + 1))
    if n_nodes > MAX_GENERATED_NODES:
        raise ModelValidationError(f"generator would create {n_nodes} nodes (limit {MAX_GENERATED_NODES})")

    raw_nodes: Dict[str, Dict[str, Any]] = {'0': {'time': 0, 'price': [float(s0)], 'successors': []}}
    frontier = ['0']
    for t in range(1, horizon + 1):
        next_frontier = []
        for parent_id in frontier:
            parent_price = raw_nodes[parent_id]['price'][0]
            for factor, label in zip(factors, labels):
                child_id = parent_id + label
                raw_nodes[child_id] = {'time': t, 'price': [parent_price * factor], 'successors': []}
                raw_nodes[parent_id]['successors'].append(child_id)
                next_frontier.append(child_id)
        frontier = next_frontier
    return raw_nodes, '0', horizon, 1, False


def _recombining_crr(horizon: int, factors: List[float], s0: float):
    up, down = factors
    if not down < up:
        raise ModelValidationError("recombining generator needs d < u")
    raw_nodes: Dict[str, Dict[str, Any]] = {}
    for t in range(horizon + 1):
        for j in range(t + 1):
            raw_nodes[f"{t}:{j}"] = {
                'time': t,
                'price': [s0 * up ** j * down ** (t - j)],
                'successors': [f"{t + 1}:{j + 1}", f"{t + 1}:{j}"] if t < horizon else [],
            }
    return raw_nodes, '0:0', horizon, 1, True


def _merge_duplicate_successors(raw_nodes: Dict[str, Dict[str, Any]], root_id: str) -> List[Tuple[str, str]]:
    """Merge coinciding successors; subtrees of dropped nodes move to the kept one."""
    merged: List[Tuple[str, str]] = []
    redirect: Dict[str, str] = {}

    def resolve(node_id: str) -> str:
        while node_id in redirect:
            node_id = redirect[node_id]
        return node_id

    queue = [root_id]
    seen = set()
    while queue:
        node_id = queue.pop(0)
        if node_id in seen:
            continue
        seen.add(node_id)
        kept: List[str] = []
        for child_id in raw_nodes[node_id]['successors']:
            child_id = resolve(child_id)
            if child_id in kept:
                continue
            child_price = np.array(raw_nodes[child_id]['price'])
            target = next(
                (k for k in kept if prices_coincide(np.array(raw_nodes[k]['price']), child_price)), None
            )
            if target is None:
                kept.append(child_id)
                continue
            dropped = raw_nodes.pop(child_id)
            for grandchild in dropped['successors']:
                if grandchild not in raw_nodes[target]['successors']:
                    raw_nodes[target]['successors'].append(grandchild)
            redirect[child_id] = target
            merged.append((child_id, target))
        raw_nodes[node_id]['successors'] = kept
        queue.extend(kept)

    if redirect:
        for raw in raw_nodes.values():
            resolved: List[str] = []
            for child_id in raw['successors']:
                child_id = resolve(child_id)
                if child_id not in resolved:
                    resolved.append(child_id)
            raw['successors'] = resolved
    return merged


def _parse_payoff(spec: Any, merged: List[Tuple[str, str]]) -> PayoffSpec:
    if not isinstance(spec, dict) or 'kind' not in spec:
        raise ModelValidationError("payoff must be an object with a 'kind'")
    if spec['kind'] == 'table':
        values = spec.get('values')
        if not isinstance(values, dict):
            raise ModelValidationError("table payoff needs a 'values' object")
        values = {str(k): v for k, v in values.items()}
        for dropped, kept in merged:
            if dropped in values:
                # a merged leaf must cover both claims
                values[kept] = max(values.get(kept, -math.inf), values.pop(dropped))
        return PayoffSpec('table', values=values)
    params = spec.get('params') or {}
    if not isinstance(params, dict):
        raise ModelValidationError("payoff 'params' must be an object")
    return PayoffSpec(spec['kind'], params=dict(params))


def _parse_priors(spec: Any, lattice: ScenarioLattice, original_successors: Dict[str, List[str]],
                  merged: List[Tuple[str, str]]) -> PriorFamily:
    logger = logging.getLogger(__name__)
    if not isinstance(spec, dict):
        raise ModelValidationError("'priors_u' must be an object")
    redirect = dict(merged)

    def resolve(node_id: str) -> str:
        while node_id in redirect:
            node_id = redirect[node_id]
        return node_id

    wildcard = spec.get('*')
    priors: Dict[str, List[List[float]]] = {}
    for node in lattice:
        if node.is_terminal:
            continue
        vectors = spec.get(node.id, wildcard)
        if vectors is None:
            continue
        if not isinstance(vectors, list) or not all(isinstance(v, list) for v in vectors):
            raise ModelValidationError(f"priors for node '{node.id}' must be a list of probability arrays")
        listed = original_successors.get(node.id, list(node.successors))
        positions = {child_id: k for k, child_id in enumerate(node.successors)}
        if node.id not in spec and any(len(v) != len(listed) for v in vectors):
            continue
        remapped = []
        for vector in vectors:
            if not all(_is_number(p) for p in vector):
                raise ModelValidationError(f"priors for node '{node.id}' must be numeric")
            if len(vector) != len(listed):
                raise ModelValidationError(
                    f"prior at node '{node.id}' has {len(vector)} entries for {len(listed)} successors"
                )
            total = float(sum(vector))
            if abs(total - 1.0) > PROBABILITY_ATOL:
                raise ModelValidationError(f"probability mass {total:g} ≠ 1 at node '{node.id}'")
            target = [0.0] * len(node.successors)
            for child_id, mass in zip(listed, vector):
                target[positions[resolve(child_id)]] += float(mass)
            remapped.append(target)
        if listed != list(node.successors):
            logger.warning(f"Successor set of node '{node.id}' changed by merging; priors re-indexed")
        priors[node.id] = remapped

    unknown = [k for k in spec if k != '*' and k not in lattice and k not in redirect]
    if unknown:
        raise ModelValidationError(f"priors given for unknown node '{unknown[0]}'")
    return PriorFamily(priors)


def _parse_utility(spec: Any) -> UtilityProfile:
    if not isinstance(spec, dict):
        raise ModelValidationError("'utility' must be an object")
    by_time: Dict[int, UtilityFunction] = {}
    if 'times' in spec:
        if not isinstance(spec['times'], dict):
            raise ModelValidationError("utility 'times' must be an object")
        for key, entry in spec['times'].items():
            try:
                t = int(key)
            except ValueError:
                raise ModelValidationError(f"utility time key '{key}' is not an integer")
            by_time[t] = make_utility(entry)
    default = None
    if 'family' in spec:
        default = make_utility(spec)
    elif not by_time:
        raise ModelValidationError("utility needs a 'family' or a 'times' object")
    overrides = {str(k): make_utility(v) for k, v in (spec.get('node_overrides') or {}).items()}
    return UtilityProfile(by_time, overrides, default=default)
