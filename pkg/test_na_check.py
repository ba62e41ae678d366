"""
Unit tests for the pointwise no-arbitrage check.
"""

import numpy as np
import pytest

from market_model import Node, ScenarioLattice, load_model
from na_check import (
    ArbitrageError, NaReport, check_lattice, check_node, interior_margin, separating_direction,
    verify_certificate
)


def _brute_force_ok(support, s):
    """One-dimensional rule: s strictly inside the support range, or a single point at s."""
    lo, hi = min(support), max(support)
    if lo == hi:
        return lo == s
    return lo < s < hi


class TestCheckNode:
    """Test cases for the single-node decision."""

    def test_interior_point(self):
        """Test that a price strictly inside the support passes."""
        ok, certificate = check_node([[0.0], [2.0], [4.0]], [2.0])
        assert ok
        assert certificate is None

    def test_boundary_point_fails(self):
        """Test that a price on the edge of the support fails with a certificate."""
        support = [[2.0], [4.0]]
        ok, certificate = check_node(support, [2.0])

        assert not ok
        assert certificate is not None
        assert certificate[0] > 0
        assert verify_certificate(certificate, support, [2.0])

    def test_outside_point_fails(self):
        """Test that a price below the support fails."""
        support = [[1.1], [1.2]]
        ok, certificate = check_node(support, [1.0])

        assert not ok
        assert verify_certificate(certificate, support, [1.0])

    def test_single_successor_at_current_price(self):
        """Test that a deterministic step without a price move passes."""
        ok, _ = check_node([[3.0]], [3.0])
        assert ok

    def test_two_assets(self):
        """Test a two-asset node with zero inside and on the face of the hull."""
        support = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]]
        assert check_node(support, [1.0, 1.0])[0]

        ok, certificate = check_node(support, [1.0, 0.0])
        assert not ok
        assert verify_certificate(certificate, support, [1.0, 0.0])

    def test_lower_dimensional_support(self):
        """Test that zero in the relative interior of a segment passes in two dimensions."""
        assert check_node([[0.0, 0.0], [2.0, 2.0]], [1.0, 1.0])[0]

    def test_empty_support(self):
        """Test that an empty support is rejected."""
        with pytest.raises(ValueError, match="non-empty"):
            check_node([], [1.0])

    def test_margin_sign(self):
        """Test the interior margin inside, on and outside the hull."""
        assert interior_margin([[0.0], [4.0]], [2.0]) > 0
        assert interior_margin([[2.0], [4.0]], [2.0]) == pytest.approx(0.0, abs=1e-10)
        assert interior_margin([[3.0], [4.0]], [2.0]) == -np.inf

    def test_no_direction_inside(self):
        """Test that no separating direction exists for an interior price."""
        assert separating_direction([[0.0], [4.0]], [2.0]) is None

    def test_certificate_rejects_wrong_direction(self):
        """Test that the arithmetic re-check rejects a losing direction."""
        assert not verify_certificate(np.array([-1.0]), [[2.0], [4.0]], [2.0])

    def test_brute_force_random(self):
        """Test 200 random one-dimensional nodes against the interval rule."""
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(1, 5))
            support = sorted(rng.choice(np.arange(6), size=n, replace=False).astype(float))
            s = float(rng.integers(0, 6))
            ok, certificate = check_node([[y] for y in support], [s])

            assert ok == _brute_force_ok(support, s)
            if not ok:
                assert verify_certificate(certificate, [[y] for y in support], [s])


class TestCheckLattice:
    """Test cases for lattice-wide checks."""

    def test_crr_passes(self):
        """Test that a binomial tree with d < 1 < u passes."""
        model = load_model({'generator': 'crr', 'T': 3, 'u': 1.2, 'd': 0.8, 's0': 100})
        report = check_lattice(model.lattice)

        assert report.global_ok
        assert report.checked_nodes == 7
        report.raise_if_failed()

    def test_crr_above_one_fails_everywhere(self):
        """Test that d > 1 gives an arbitrage at every non-terminal node."""
        model = load_model({'generator': 'crr', 'T': 2, 'u': 1.2, 'd': 1.1, 's0': 1})
        report = check_lattice(model.lattice, threads=2)

        assert not report.global_ok
        assert sorted(report.failed_nodes) == ['0', '0d', '0u']
        for failure in report.failures:
            node = model.lattice.node(failure.node_id)
            assert verify_certificate(failure.certificate, model.lattice.successor_prices(node.id), node.price)
            assert "outside" in failure.note

    def test_raise_if_failed(self):
        """Test that a failing report raises with the failing nodes attached."""
        nodes = [Node('r', 0, (2.0,), ('a', 'b')), Node('a', 1, (2.0,)), Node('b', 1, (4.0,))]
        report = check_lattice(ScenarioLattice(1, 1, nodes))

        with pytest.raises(ArbitrageError, match="one-step arbitrage at 1 node"):
            report.raise_if_failed()
        try:
            report.raise_if_failed()
        except ArbitrageError as e:
            assert [f.node_id for f in e.failures] == ['r']
            assert "relative boundary" in e.failures[0].note

    def test_empty_report(self):
        """Test the default report fields."""
        report = NaReport(global_ok=True)
        assert report.failed_nodes == []
