"""
CSV reporting module for superhedging and utility optimization runs.

This module exports per-node price surfaces, hedge plans, no-arbitrage
verdicts, dual weights, path verifications and optimal consumption
policies to CSV, writes the JSON run summary next to the table, and merges
node tables for the combined report. Column order is part of the external
contract (see REPORT_FORMAT_GUIDE.md); numbers are printed with 12
significant digits. Every file is written to a temporary sibling first and
moved into place.
"""

import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from market_model import ScenarioLattice
from na_check import NaReport
from superhedge_engine import EnumeratedDual, HedgePlan, PriceSurface, VerificationReport


class CSVReportError(Exception):
    """Custom exception for CSV reporting related errors."""
    pass


Table = Tuple[List[str], List[List[str]]]


class CSVReporter:
    """
    CSV reporter for lattice computations.

    Each ``generate_*`` method writes one table to the output path and
    returns that path; ``write_summary`` writes ``<stem>.summary.json``.
    """

    def __init__(self, output_path: str):
        """
        Initialize CSV reporter with output file path.

        Args:
            output_path: Path where the CSV file will be written

        Raises:
            CSVReportError: If output path is invalid
        """
        if not output_path:
            raise CSVReportError("Output path is required")

        self.output_path = Path(output_path)
        self.logger = logging.getLogger(__name__)

        self.output_path.parent.mkdir(parents=True, exist_ok=True)

    @property
    def summary_path(self) -> Path:
        return self.output_path.with_name(f"{self.output_path.stem}.summary.json")

    def get_output_path(self) -> str:
        """
        Get the output file path.

        Returns:
            Output file path as string
        """
        return str(self.output_path)

    def _atomic_write(self, path: Path, text: str) -> None:
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
        try:
            with os.fdopen(fd, 'w', newline='', encoding='utf-8') as handle:
                handle.write(text)
            os.replace(tmp_name, path)
        except Exception:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise

    def write_table(self, table: Table, description: str = "table") -> str:
        """
        Write headers and rows to the output path.

        Raises:
            CSVReportError: If writing fails
        """
        headers, rows = table
        try:
            buffer = io.StringIO()
            writer = csv.writer(buffer, lineterminator='\n')
            writer.writerow(headers)
            writer.writerows(rows)
            self._atomic_write(self.output_path, buffer.getvalue())
        except Exception as e:
            raise CSVReportError(f"Failed to generate CSV report: {e}")

        self.logger.info(f"Generated {description} CSV with {len(rows)} rows at {self.output_path}")
        return str(self.output_path)

    def write_summary(self, summary: Dict[str, Any]) -> str:
        """
        Write the JSON run summary beside the CSV.

        Raises:
            CSVReportError: If the summary lacks a command or status or cannot be written
        """
        for key in ('command', 'status'):
            if key not in summary:
                raise CSVReportError(f"Run summary must contain '{key}'")
        try:
            text = json.dumps(_jsonable(summary), indent=2, sort_keys=True) + '\n'
            self._atomic_write(self.summary_path, text)
        except Exception as e:
            raise CSVReportError(f"Failed to write run summary: {e}")
        self.logger.info(f"Wrote run summary to {self.summary_path}")
        return str(self.summary_path)

    # Table builders

    def _format_number(self, number: Optional[float]) -> str:
        """
        Format numeric values for CSV output.

        Args:
            number: Numeric value or None

        Returns:
            Number at 12 significant digits, or empty string
        """
        if number is None:
            return ""
        try:
            value = float(number)
        except (ValueError, TypeError):
            return ""
        if value == 0.0:
            value = 0.0
        return f"{value:.12g}"

    def _format_vector(self, values: Optional[Sequence[float]], size: int) -> List[str]:
        if values is None:
            return [""] * size
        return [self._format_number(v) for v in np.asarray(values, dtype=float).reshape(-1)]

    def _price_headers(self, dimension: int) -> List[str]:
        return [f"price_{k}" for k in range(1, dimension + 1)]

    def _node_prefix(self, node) -> List[str]:
        return [node.id, str(node.time)] + [self._format_number(p) for p in node.price]

    def price_table(self, lattice: ScenarioLattice, surface: PriceSurface) -> Table:
        headers = ['node_id', 'time'] + self._price_headers(lattice.dimension) + ['pi', 'dual']
        rows = [
            self._node_prefix(node) + [self._format_number(surface.pi[node.id]),
                                       self._format_number(surface.dual[node.id])]
            for node in lattice
        ]
        return headers, rows

    def hedge_table(self, lattice: ScenarioLattice, surface: PriceSurface, plan: HedgePlan) -> Table:
        d = lattice.dimension
        headers = (['node_id', 'time'] + self._price_headers(d) + ['pi']
                   + [f"H_{k}" for k in range(1, d + 1)] + ['V', 'C', 'dC'])
        rows = []
        for node in lattice:
            rows.append(
                self._node_prefix(node)
                + [self._format_number(surface.pi[node.id])]
                + self._format_vector(plan.hedges.get(node.id), d)
                + [self._format_number(plan.wealth.get(node.id)),
                   self._format_number(plan.consumption.get(node.id)),
                   self._format_number(plan.increments.get(node.id))]
            )
        return headers, rows

    def na_table(self, lattice: ScenarioLattice, report: NaReport) -> Table:
        d = lattice.dimension
        headers = (['node_id', 'time'] + self._price_headers(d) + ['ok', 'epsilon']
                   + [f"certificate_{k}" for k in range(1, d + 1)] + ['note'])
        failures = {f.node_id: f for f in report.failures}
        rows = []
        for node in lattice:
            if node.is_terminal:
                continue
            failure = failures.get(node.id)
            if failure is None:
                rows.append(self._node_prefix(node) + ['True', ''] + [''] * d + [''])
            else:
                rows.append(self._node_prefix(node) + ['False', self._format_number(failure.epsilon)]
                            + self._format_vector(failure.certificate, d) + [failure.note])
        return headers, rows

    def dual_table(self, lattice: ScenarioLattice, surface: PriceSurface,
                   enumerated: Optional[EnumeratedDual] = None) -> Table:
        headers = (['node_id', 'time'] + self._price_headers(lattice.dimension)
                   + ['dual', 'successors', 'weights', 'vertex_weights'])
        rows = []
        for node in lattice:
            weights = surface.weights.get(node.id)
            vertex = enumerated.choices.get(node.id) if enumerated is not None else None
            rows.append(
                self._node_prefix(node)
                + [self._format_number(surface.dual[node.id]),
                   ';'.join(node.successors),
                   ';'.join(self._format_vector(weights, 0)) if weights is not None else '',
                   ';'.join(self._format_vector(vertex, 0)) if vertex is not None else '']
            )
        return headers, rows

    def verify_table(self, report: VerificationReport) -> Table:
        headers = ['leaf_id', 'path', 'terminal_wealth', 'payoff', 'slack']
        rows = [
            [path[-1], '>'.join(path), self._format_number(wealth),
             self._format_number(claim), self._format_number(slack)]
            for path, wealth, claim, slack in report.rows
        ]
        return headers, rows

    def optimize_table(self, lattice: ScenarioLattice, result) -> Table:
        """Per-node policy rows; leaves carry their terminal consumption in ``c``."""
        d = lattice.dimension
        headers = (['node_id', 'time'] + self._price_headers(d)
                   + ['pi', 'x_lo', 'x_hi', 'wealth', 'U', 'c']
                   + [f"H_{k}" for k in range(1, d + 1)] + ['worst_index', 'worst_weights'])
        policy = result.policy
        rows = []
        for node in lattice:
            wealth = policy.wealth.get(node.id)
            surface = result.surfaces.get(node.id)
            if node.is_terminal:
                rows.append(
                    self._node_prefix(node)
                    + [self._format_number(result.prices.pi[node.id]), '', '', self._format_number(wealth), '',
                       self._format_number(policy.terminal_consumption.get(node.id))]
                    + [''] * d + ['', '']
                )
                continue
            weights = result.worst_case.mixtures.get(node.id)
            rows.append(
                self._node_prefix(node)
                + [self._format_number(result.prices.pi[node.id]),
                   self._format_number(surface.lower), self._format_number(surface.upper),
                   self._format_number(wealth),
                   self._format_number(surface(wealth) if wealth is not None else None),
                   self._format_number(policy.consumption.get(node.id))]
                + self._format_vector(policy.hedges.get(node.id), d)
                + [str(result.worst_case.indices.get(node.id, '')),
                   ';'.join(self._format_vector(weights, 0)) if weights is not None else '']
            )
        return headers, rows

    # Writers

    def generate_price_report(self, lattice: ScenarioLattice, surface: PriceSurface) -> str:
        return self.write_table(self.price_table(lattice, surface), "price")

    def generate_hedge_report(self, lattice: ScenarioLattice, surface: PriceSurface, plan: HedgePlan) -> str:
        return self.write_table(self.hedge_table(lattice, surface, plan), "hedge")

    def generate_na_report(self, lattice: ScenarioLattice, report: NaReport) -> str:
        return self.write_table(self.na_table(lattice, report), "no-arbitrage")

    def generate_dual_report(self, lattice: ScenarioLattice, surface: PriceSurface,
                             enumerated: Optional[EnumeratedDual] = None) -> str:
        return self.write_table(self.dual_table(lattice, surface, enumerated), "dual")

    def generate_verify_report(self, report: VerificationReport) -> str:
        return self.write_table(self.verify_table(report), "verification")

    def generate_optimize_report(self, lattice: ScenarioLattice, result) -> str:
        return self.write_table(self.optimize_table(lattice, result), "optimization")

    def generate_merged_report(self, tables: Dict[str, Table]) -> str:
        """
        Merge node tables on node_id into one CSV.

        Columns shared with an earlier table are taken from the earlier
        table; the remaining columns are prefixed with the table name.

        Raises:
            CSVReportError: If the tables do not cover the same node ids
        """
        if not tables:
            raise CSVReportError("At least one table is required for a merged report")

        merged: Optional[pd.DataFrame] = None
        node_ids = None
        for name, (headers, rows) in tables.items():
            frame = pd.DataFrame(rows, columns=headers, dtype=str)
            ids = set(frame['node_id'])
            if node_ids is None:
                node_ids = ids
            elif ids != node_ids:
                missing = sorted(node_ids.symmetric_difference(ids))[:5]
                raise CSVReportError(f"Table '{name}' covers different node ids: {missing}")
            if merged is None:
                merged = frame
                continue
            extra = [h for h in headers if h not in merged.columns or h == 'node_id']
            renamed = {h: f"{name}_{h}" for h in extra if h != 'node_id'}
            merged = merged.merge(frame[extra].rename(columns=renamed), on='node_id', how='outer', sort=False)

        try:
            text = merged.fillna('').to_csv(index=False, lineterminator='\n')
            self._atomic_write(self.output_path, text)
        except Exception as e:
            raise CSVReportError(f"Failed to generate merged report: {e}")
        self.logger.info(f"Generated merged report of {list(tables)} with {len(merged)} rows at {self.output_path}")
        return str(self.output_path)


def read_table(path: str) -> pd.DataFrame:
    """Read a report back with identifiers kept as strings."""
    return pd.read_csv(path, dtype={'node_id': str, 'leaf_id': str, 'path': str}, keep_default_na=False)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if not np.isfinite(value):
            return str(value)
        return float(f"{value:.12g}")
    return value
