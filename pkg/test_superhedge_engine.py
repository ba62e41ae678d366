"""
Unit tests for the superhedging engine.

This module covers binomial oracles, random incomplete lattices, price
properties, minimal strategies, path verification and the enumerated dual.
"""

import math

import numpy as np
import pytest

from market_model import Node, PayoffSpec, ScenarioLattice, enumerate_paths, evaluate_payoff, load_model
from na_check import ArbitrageError
from superhedge_engine import HedgePlan, SuperhedgeEngine, SuperhedgeError


def _crr_oracle(payoff, s0=100.0, u=1.2, d=0.8, horizon=3):
    q = (1.0 - d) / (u - d)
    return sum(
        math.comb(horizon, k) * q ** k * (1 - q) ** (horizon - k) * payoff(s0 * u ** k * d ** (horizon - k))
        for k in range(horizon + 1)
    )


def _running_min_lattice():
    nodes = [Node('r', 0, (2.0,), ('a', 'b', 'c')),
             Node('a', 1, (0.0,)), Node('b', 1, (2.0,)), Node('c', 1, (4.0,))]
    return ScenarioLattice(1, 1, nodes)


def _two_asset_lattice():
    square = [(0.0, 0.0), (2.0, 0.0), (0.0, 2.0), (2.0, 2.0)]
    nodes = [Node('r', 0, (1.0, 1.0), tuple(f"y{i}" for i in range(4)))]
    nodes += [Node(f"y{i}", 1, p) for i, p in enumerate(square)]
    return ScenarioLattice(1, 2, nodes)


def _random_lattice(rng, horizon=2, branching=3):
    """Tree with multiplicative factors straddling 1 at every node."""
    nodes = {'0': {'time': 0, 'price': 1.0, 'successors': []}}
    frontier = ['0']
    for t in range(1, horizon + 1):
        next_frontier = []
        for parent_id in frontier:
            factors = np.sort(np.concatenate([[rng.uniform(0.6, 0.95), rng.uniform(1.05, 1.5)],
                                              rng.uniform(0.7, 1.3, branching - 2)]))
            for k, factor in enumerate(factors):
                child_id = f"{parent_id}.{k}"
                nodes[child_id] = {'time': t, 'price': nodes[parent_id]['price'] * factor, 'successors': []}
                nodes[parent_id]['successors'].append(child_id)
                next_frontier.append(child_id)
        frontier = next_frontier
    return ScenarioLattice(horizon, 1, [
        Node(node_id, raw['time'], (raw['price'],), tuple(raw['successors'])) for node_id, raw in nodes.items()
    ])


def _absorbing_running_min_lattice():
    nodes = [Node('r', 0, (2.0,), ('a', 'b', 'c')),
             Node('a', 1, (0.0,), ('a2',)), Node('b', 1, (2.0,), ('b2',)), Node('c', 1, (4.0,), ('c2',)),
             Node('a2', 2, (0.0,)), Node('b2', 2, (2.0,)), Node('c2', 2, (4.0,))]
    return ScenarioLattice(2, 1, nodes)


# widest fan-out per horizon keeping at most 200 paths
MAX_BRANCHING = {1: 6, 2: 6, 3: 5, 4: 3}


def _random_market(rng):
    """
    Random tree with 1-3 assets, horizon 1-4 and 2-6 successors per node.

    Relative moves z_k are drawn and the last one is placed so that a
    strictly positive combination of all moves vanishes, which keeps zero
    in the relative interior of every one-step support.
    """
    dimension = int(rng.integers(1, 4))
    horizon = int(rng.integers(1, 5))
    nodes = {'0': {'time': 0, 'price': np.ones(dimension), 'successors': []}}
    frontier = ['0']
    for t in range(1, horizon + 1):
        next_frontier = []
        for parent_id in frontier:
            n = int(rng.integers(2, MAX_BRANCHING[horizon] + 1))
            moves = rng.uniform(-0.3, 0.3, (n - 1, dimension))
            weights = rng.uniform(0.5, 1.5, n - 1)
            last = -(weights @ moves) / weights.sum()
            moves = np.vstack([moves, last])
            for k, move in enumerate(moves):
                child_id = f"{parent_id}.{k}"
                price = nodes[parent_id]['price'] * (1.0 + move)
                nodes[child_id] = {'time': t, 'price': price, 'successors': []}
                nodes[parent_id]['successors'].append(child_id)
                next_frontier.append(child_id)
        frontier = next_frontier
    lattice = ScenarioLattice(horizon, dimension, [
        Node(node_id, raw['time'], tuple(float(p) for p in raw['price']), tuple(raw['successors']))
        for node_id, raw in nodes.items()
    ])
    payoff = PayoffSpec('table', values={leaf.id: float(rng.uniform(-1.0, 3.0)) for leaf in lattice.leaves()})
    return lattice, payoff


class TestSuperhedgeEngineInit:
    """Test cases for engine configuration."""

    def test_bad_tolerance(self):
        """Test that non-positive tolerances are rejected."""
        with pytest.raises(ValueError, match="Tolerances must be positive"):
            SuperhedgeEngine(tol=0.0)

    def test_bad_threads(self):
        """Test that a zero thread count is rejected."""
        with pytest.raises(ValueError, match="Thread count must be at least 1"):
            SuperhedgeEngine(threads=0)


class TestPricing:
    """Test cases for price surfaces."""

    def setup_method(self):
        """Set up test fixtures before each test method."""
        self.engine = SuperhedgeEngine()

    @pytest.mark.parametrize("kind,claim", [
        ('call', lambda s: max(s - 100.0, 0.0)),
        ('put', lambda s: max(100.0 - s, 0.0)),
        ('straddle', lambda s: abs(s - 100.0)),
    ])
    def test_crr_oracle(self, kind, claim):
        """Test binomial prices against the risk-neutral closed form."""
        model = load_model({'generator': 'crr', 'T': 3, 'u': 1.2, 'd': 0.8, 's0': 100,
                            'payoff': {'kind': kind, 'params': {'strike': 100}}})
        surface = self.engine.price(model.lattice, model.payoff)

        assert surface.pi0 == pytest.approx(_crr_oracle(claim), abs=1e-9)
        assert surface.max_gap() <= 1e-7

    def test_recombining_matches_tree(self):
        """Test that the recombining lattice gives the tree price with far fewer nodes."""
        document = {'generator': 'crr', 'T': 6, 'u': 1.1, 'd': 0.9, 's0': 100,
                    'payoff': {'kind': 'call', 'params': {'strike': 100}}}
        tree = load_model(document)
        recombining = load_model(dict(document, recombine=True))

        tree_price = self.engine.price(tree.lattice, tree.payoff).pi0
        recombining_price = SuperhedgeEngine(threads=2).price(recombining.lattice, recombining.payoff).pi0

        assert recombining_price == pytest.approx(tree_price, abs=1e-9)
        assert len(recombining.lattice) == 28

    def test_running_minimum(self):
        """Test prices of the running minimum on the three-point step."""
        surface = self.engine.price(_running_min_lattice(), PayoffSpec('running_min'))

        assert surface.pi0 == pytest.approx(2.0, abs=1e-9)
        assert surface.pi == pytest.approx({'r': 2.0, 'a': 0.0, 'b': 2.0, 'c': 2.0}, abs=1e-9)
        assert 0.0 - 1e-9 <= surface.hedges['r'][0] <= 1.0 + 1e-9

    def test_two_asset_minimum(self):
        """Test the minimum of two assets on the square support."""
        surface = self.engine.price(_two_asset_lattice(), PayoffSpec('min'))

        assert surface.pi0 == pytest.approx(1.0, abs=1e-9)
        assert surface.hedges['r'].sum() == pytest.approx(1.0, abs=1e-8)

    def test_arbitrage_rejected(self):
        """Test that pricing an arbitrage lattice raises."""
        model = load_model({'generator': 'crr', 'T': 2, 'u': 1.2, 'd': 1.1, 's0': 1,
                            'payoff': {'kind': 'call', 'params': {'strike': 1}}})
        with pytest.raises(ArbitrageError, match="one-step arbitrage"):
            self.engine.price(model.lattice, model.payoff)

    def test_random_lattices(self):
        """Test primal/dual agreement and the enumerated dual on random incomplete trees."""
        rng = np.random.default_rng(3)
        payoff = PayoffSpec('call', {'strike': 1.0})
        for _ in range(10):
            lattice = _random_lattice(rng)
            surface = self.engine.price(lattice, payoff)
            enumerated = self.engine.dual_by_enumeration(lattice, payoff)

            assert surface.max_gap() <= 1e-7 * max(1.0, surface.pi0)
            assert enumerated.value == pytest.approx(surface.pi0, abs=1e-8)
            assert enumerated.expectation == pytest.approx(enumerated.value, abs=1e-10)

    def test_random_multi_asset_markets(self):
        """Test primal/dual agreement at every node and the enumerated dual on 50 random markets."""
        rng = np.random.default_rng(29)
        for _ in range(50):
            lattice, payoff = _random_market(rng)
            assert len(lattice.leaves()) <= 200

            surface = self.engine.price(lattice, payoff)
            enumerated = self.engine.dual_by_enumeration(lattice, payoff)

            for node in lattice:
                assert abs(surface.pi[node.id] - surface.dual[node.id]) <= 1e-7
            assert enumerated.value == pytest.approx(surface.pi0, abs=1e-6)
            assert sum(enumerated.path_probabilities.values()) == pytest.approx(1.0)


class TestPriceProperties:
    """Test cases for order properties of the superhedging price."""

    def setup_method(self):
        """Set up an incomplete two-period lattice."""
        self.engine = SuperhedgeEngine()
        self.lattice = load_model({'generator': 'interval', 'T': 2, 'u': 1.3, 'd': 0.8, 's0': 10,
                                   'points': 3}).lattice

    def _pi0(self, kind, **params):
        return self.engine.price(self.lattice, PayoffSpec(kind, params)).pi0

    def test_monotonicity(self):
        """Test that a dominating claim costs at least as much."""
        assert self._pi0('put', strike=11.0) >= self._pi0('put', strike=10.0) - 1e-12

    def test_translation(self):
        """Test that adding cash adds its amount to the price."""
        shifted = self._pi0('formula', expr='max(S1 - 10, 0) + 5')
        assert shifted == pytest.approx(self._pi0('call', strike=10.0) + 5.0, abs=1e-9)

    def test_positive_homogeneity(self):
        """Test that scaling a claim scales its price."""
        doubled = self._pi0('formula', expr='2 * max(S1 - 10, 0)')
        assert doubled == pytest.approx(2.0 * self._pi0('call', strike=10.0), abs=1e-9)

    def test_subadditivity(self):
        """Test that a straddle costs no more than a call and a put."""
        combined = self._pi0('call', strike=10.0) + self._pi0('put', strike=10.0)
        assert self._pi0('straddle', strike=10.0) <= combined + 1e-9

    def test_superhedging_brackets_linear_claim(self):
        """Test that the forward claim is priced at the current price."""
        assert self._pi0('linear', weights=[1.0]) == pytest.approx(10.0, abs=1e-9)

    def test_random_claim_pairs(self):
        """Test the order properties and the 1-Lipschitz bound over 1000 random claim pairs."""
        rng = np.random.default_rng(41)
        leaves = [leaf.id for leaf in self.lattice.leaves()]

        def price(values):
            return self.engine.price(self.lattice, PayoffSpec('table', values=dict(zip(leaves, values)))).pi0

        for _ in range(1000):
            xi = rng.uniform(-2.0, 5.0, len(leaves))
            eta = rng.uniform(-2.0, 5.0, len(leaves))
            cash = float(rng.uniform(-3.0, 3.0))
            scale = float(rng.uniform(0.1, 4.0))
            p_xi, p_eta = price(xi), price(eta)

            assert price(np.maximum(xi, eta)) >= max(p_xi, p_eta) - 1e-8
            assert price(xi + cash) == pytest.approx(p_xi + cash, abs=1e-8)
            assert price(scale * xi) == pytest.approx(scale * p_xi, abs=1e-8)
            assert price(xi + eta) <= p_xi + p_eta + 1e-8
            assert abs(p_xi - p_eta) <= float(np.max(np.abs(xi - eta))) + 1e-8

    def test_perturbed_superhedges_cost_more(self):
        """Test that wealth of any other superhedge stays above the price surface."""
        payoff = PayoffSpec('asian_call', {'strike': 9.5})
        surface = self.engine.price(self.lattice, payoff)
        plan = self.engine.minimal_strategy(self.lattice, payoff, surface)
        paths = enumerate_paths(self.lattice)
        claims = {path[-1]: evaluate_payoff(payoff, self.lattice, path) for path in paths}
        rng = np.random.default_rng(43)

        for _ in range(100):
            hedges = {k: h + rng.normal(0.0, 0.5, h.shape) for k, h in plan.hedges.items()}
            # cheapest capital making the perturbed positions superhedge without consumption
            capital = max(claims[path[-1]] - self.engine.wealth_path(self.lattice, 0.0, hedges, path)[-1]
                          for path in paths)

            assert capital >= surface.pi0 - 1e-9
            for path in paths:
                wealth = self.engine.wealth_path(self.lattice, capital, hedges, path)
                for node_id, value in zip(path, wealth):
                    assert value >= surface.pi[node_id] - 1e-9


class TestMinimalPlans:
    """Test cases for minimal plans on the binomial, running-minimum, two-asset and random markets."""

    def setup_method(self):
        """Set up test fixtures before each test method."""
        self.engine = SuperhedgeEngine()

    def _check_plan(self, lattice, payoff):
        surface = self.engine.price(lattice, payoff)
        plan = self.engine.minimal_strategy(lattice, payoff, surface)
        scale = 1.0 + max(abs(v) for v in surface.pi.values())
        for node in lattice:
            assert plan.wealth[node.id] == pytest.approx(surface.pi[node.id], abs=1e-9 * scale)
            assert plan.increments[node.id] >= -1e-9 * scale
        assert self.engine.verify_superhedge(lattice, payoff, plan.initial_capital, plan).passed
        return plan

    @pytest.mark.parametrize("kind", ['call', 'put', 'straddle'])
    def test_binomial_convex_claims_consume_nothing(self, kind):
        """Test that replication of convex claims in the binomial tree never consumes."""
        model = load_model({'generator': 'crr', 'T': 3, 'u': 1.2, 'd': 0.8, 's0': 100,
                            'payoff': {'kind': kind, 'params': {'strike': 100}}})
        plan = self._check_plan(model.lattice, model.payoff)

        for node in model.lattice:
            assert plan.increments[node.id] == pytest.approx(0.0, abs=1e-7)

    def test_absorbing_running_minimum(self):
        """Test price and consumption bands of the running minimum with absorbed time-1 prices."""
        lattice = _absorbing_running_min_lattice()
        payoff = PayoffSpec('running_min')
        plan = self._check_plan(lattice, payoff)
        surface = self.engine.price(lattice, payoff)
        hedge = plan.hedges['r'][0]

        assert surface.pi0 == pytest.approx(2.0, abs=1e-9)
        for node in lattice.nodes_at(1):
            assert surface.pi[node.id] == pytest.approx(min(node.price[0], 2.0), abs=1e-9)
        assert 0.0 <= plan.increments['c'] <= hedge * (4.0 - 2.0) + 1e-9
        assert 0.0 <= plan.increments['a'] <= (hedge - 1.0) * (0.0 - 2.0) + 1e-9
        for leaf_id in ('a2', 'b2', 'c2'):
            assert plan.increments[leaf_id] == pytest.approx(0.0, abs=1e-9)

    def test_two_asset_minimum(self):
        """Test the minimal plan of the two-asset minimum."""
        plan = self._check_plan(_two_asset_lattice(), PayoffSpec('min'))
        assert plan.hedges['r'].sum() == pytest.approx(1.0, abs=1e-8)

    def test_random_markets(self):
        """Test minimal plans on random multi-asset markets."""
        rng = np.random.default_rng(31)
        for _ in range(10):
            lattice, payoff = _random_market(rng)
            self._check_plan(lattice, payoff)


class TestMinimalStrategy:
    """Test cases for the minimal strategy and verification."""

    def setup_method(self):
        """Set up test fixtures before each test method."""
        self.engine = SuperhedgeEngine()
        self.model = load_model({'generator': 'interval', 'T': 2, 'u': 1.3, 'd': 0.8, 's0': 10, 'points': 3,
                                 'payoff': {'kind': 'asian_call', 'params': {'strike': 9.5}}})

    def test_wealth_equals_price(self):
        """Test that the minimal plan tracks the price surface with non-negative consumption."""
        lattice, payoff = self.model.lattice, self.model.payoff
        surface = self.engine.price(lattice, payoff)
        plan = self.engine.minimal_strategy(lattice, payoff, surface)

        assert isinstance(plan, HedgePlan)
        assert plan.initial_capital == pytest.approx(surface.pi0)
        for node in lattice:
            assert plan.wealth[node.id] == pytest.approx(surface.pi[node.id], abs=1e-9)
            assert plan.increments[node.id] >= -1e-10
        assert plan.increments[lattice.root_id] == 0.0

    def test_consumption_on_running_minimum(self):
        """Test that the edge into S1 = 4 consumes twice the hedge."""
        lattice = _running_min_lattice()
        plan = self.engine.minimal_strategy(lattice, PayoffSpec('running_min'))
        hedge = plan.hedges['r'][0]

        assert plan.increments['c'] == pytest.approx(2.0 * hedge, abs=1e-9)
        assert plan.increments['a'] == pytest.approx(2.0 - 2.0 * hedge, abs=1e-9)
        assert plan.consumption['b'] == pytest.approx(0.0, abs=1e-9)

    def test_verify_at_price_passes(self):
        """Test that the minimal plan superhedges from pi_0."""
        lattice, payoff = self.model.lattice, self.model.payoff
        plan = self.engine.minimal_strategy(lattice, payoff)
        report = self.engine.verify_superhedge(lattice, payoff, plan.initial_capital, plan)

        assert report.passed
        assert report.paths_checked == 9
        assert report.min_slack >= -1e-9
        assert report.consumption_ok
        assert report.verdict.startswith("PASS")

    def test_verify_below_price_fails(self):
        """Test that starting a cent short fails by exactly that cent."""
        lattice, payoff = self.model.lattice, self.model.payoff
        plan = self.engine.minimal_strategy(lattice, payoff)
        report = self.engine.verify_superhedge(lattice, payoff, plan.initial_capital - 0.01, plan)

        assert not report.passed
        assert report.min_slack == pytest.approx(-0.01, abs=1e-9)
        assert report.verdict.startswith("FAIL")
        assert report.worst_path[0] == lattice.root_id

    def test_verify_bare_hedges_without_consumption(self):
        """Test a position mapping without consumption keeps every surplus."""
        lattice, payoff = self.model.lattice, self.model.payoff
        plan = self.engine.minimal_strategy(lattice, payoff)
        report = self.engine.verify_superhedge(lattice, payoff, plan.initial_capital, dict(plan.hedges))

        assert report.passed
        assert report.min_consumption_increment == 0.0

    def test_negative_consumption_fails(self):
        """Test that a negative consumption increment fails verification."""
        lattice, payoff = self.model.lattice, self.model.payoff
        plan = self.engine.minimal_strategy(lattice, payoff)
        consumption = dict(plan.increments)
        first_child = lattice.root.successors[0]
        consumption[first_child] = -0.5

        report = self.engine.verify_superhedge(lattice, payoff, plan.initial_capital, plan, consumption)

        assert not report.consumption_ok
        assert not report.passed

    def test_wealth_path_with_mapping(self):
        """Test wealth along a path for a constant position."""
        lattice = _running_min_lattice()
        wealth = self.engine.wealth_path(lattice, 2.0, {'r': np.array([0.5])}, ['r', 'c'])

        assert wealth == pytest.approx([2.0, 3.0])

    def test_recombining_rejected(self):
        """Test that a minimal strategy needs a tree."""
        model = load_model({'generator': 'crr', 'T': 2, 'u': 1.2, 'd': 0.8, 's0': 1, 'recombine': True,
                            'payoff': {'kind': 'call', 'params': {'strike': 1}}})
        with pytest.raises(SuperhedgeError, match="needs a tree lattice"):
            self.engine.minimal_strategy(model.lattice, model.payoff)


class TestEnumeratedDual:
    """Test cases for the vertex-enumerated dual."""

    def test_running_minimum(self):
        """Test the enumerated dual of the running minimum."""
        result = SuperhedgeEngine().dual_by_enumeration(_running_min_lattice(), PayoffSpec('running_min'))

        assert result.value == pytest.approx(2.0)
        assert sum(result.path_probabilities.values()) == pytest.approx(1.0)
        assert set(result.path_probabilities) == {'r>a', 'r>b', 'r>c'}

    def test_two_asset_minimum(self):
        """Test that the best vertex charges the diagonal."""
        result = SuperhedgeEngine().dual_by_enumeration(_two_asset_lattice(), PayoffSpec('min'))

        assert result.value == pytest.approx(1.0)
        np.testing.assert_allclose(result.choices['r'], [0.5, 0.0, 0.0, 0.5], atol=1e-12)
