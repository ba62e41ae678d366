#!/usr/bin/env python3
"""
Robust Superhedging Tool

This tool works on finite multi-prior scenario lattices:
- No-arbitrage check (check-na):
  * Pointwise one-step condition at every node, with certificates
- Superhedging (price, hedge, verify, dual):
  * Price surface by backward concave envelopes, checked against the
    martingale-measure dual at every node
  * Minimal superhedging strategy with consumption
  * Path-by-path verification of a strategy at a given capital
- Robust utility of consumption (optimize):
  * Max-min value recursion over the prior family, optimal policy and
    worst-case measure
- Combined node report (report)

Usage:
    python superhedge_cli.py --model model.json --cmd price --out price.csv [options]

Examples:
    python superhedge_cli.py --model crr.json --cmd price --out out/price.csv
    python superhedge_cli.py --model crr.json --cmd verify --x 9.5 --out out/verify.csv
    python superhedge_cli.py --model robust.json --cmd optimize --grid-n 257 --seed 3 --out out/opt.csv
"""

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from csv_reporter import CSVReporter, CSVReportError
from market_model import MarketModel, ModelValidationError, load_model
from na_check import ArbitrageError, check_lattice
from superhedge_engine import MAX_ENUMERATED_PATHS, SuperhedgeEngine
from utility_optimizer import UtilityOptimizationError, UtilityOptimizer, UtilityValidationError


COMMANDS = ('check-na', 'price', 'hedge', 'verify', 'dual', 'optimize', 'report')
TREE_COMMANDS = ('hedge', 'verify', 'optimize')

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_ARBITRAGE = 2
EXIT_VALIDATION = 3
EXIT_OPTIMIZER = 4


@dataclass
class RunConfig:
    """Everything one invocation needs; the seed fixes all optimizer randomness."""

    command: str
    model: str
    out: str
    tol: float = 1e-7
    grid_n: int = 129
    w_max: Optional[float] = None
    seed: int = 0
    threads: int = 1
    multistarts: int = 5
    x: Optional[float] = None
    consume: bool = False
    quiet: bool = False

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> 'RunConfig':
        return cls(
            command=args.cmd, model=args.model, out=args.out, tol=args.tol, grid_n=args.grid_n,
            w_max=args.wmax, seed=args.seed, threads=args.threads, multistarts=args.multistarts,
            x=args.x, consume=args.consume, quiet=args.quiet,
        )


@dataclass
class RunOutcome:
    """Exit code plus the summary written beside the CSV."""

    exit_code: int
    summary: Dict[str, Any] = field(default_factory=dict)
    output_file: Optional[str] = None


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the validation code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def setup_logging(level: str = "INFO", verbose: bool = False) -> None:
    """
    Configure logging for the application.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR)
        verbose: Enable verbose logging output
    """
    log_level = getattr(logging, level.upper(), logging.INFO)

    if verbose:
        log_format = '%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s'
    else:
        log_format = '%(asctime)s - %(levelname)s - %(message)s'

    logging.basicConfig(
        level=log_level,
        format=log_format,
        datefmt='%Y-%m-%d %H:%M:%S'
    )


def parse_arguments(argv=None) -> argparse.Namespace:
    """
    Parse command-line arguments.

    Returns:
        Parsed arguments namespace
    """
    parser = _ArgumentParser(
        description='Robust superhedging prices, strategies and max-min utility policies on scenario lattices',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # No-arbitrage check and superhedging price
  %(prog)s --model crr.json --cmd check-na --out out/na.csv
  %(prog)s --model crr.json --cmd price --out out/price.csv

  # Minimal strategy and verification at a given capital
  %(prog)s --model crr.json --cmd hedge --out out/hedge.csv
  %(prog)s --model crr.json --cmd verify --x 9.5 --out out/verify.csv

  # Robust utility optimization
  %(prog)s --model robust.json --cmd optimize --grid-n 257 --wmax 5 --seed 3 --out out/opt.csv

Exit codes:
  0 success, 1 unexpected failure, 2 arbitrage, 3 invalid input, 4 optimizer failure
        """
    )

    parser.add_argument('--model', required=True, help='Model document (JSON)')
    parser.add_argument('--cmd', required=True, choices=COMMANDS, help='Command to run')
    parser.add_argument('--out', required=True, help='Output CSV path (summary goes to <stem>.summary.json)')
    parser.add_argument('--tol', type=float, default=1e-7,
                        help='Primal/dual agreement and verification tolerance (default: 1e-7)')

    optimizer_group = parser.add_argument_group('utility optimization')
    optimizer_group.add_argument('--grid-n', type=int, default=129,
                                 help='Wealth grid points per node (default: 129)')
    optimizer_group.add_argument('--wmax', type=float, help='Width of the wealth grids (default: pi_0 + 10)')
    optimizer_group.add_argument('--seed', type=int, default=0, help='Seed for multi-start exploration (default: 0)')
    optimizer_group.add_argument('--multistarts', type=int, default=5,
                                 help='Starts per node for optimal-face exploration (default: 5)')

    parser.add_argument('--threads', type=int, default=1, help='Worker threads per time slice (default: 1)')
    parser.add_argument('--x', type=float,
                        help='Initial capital for verify, initial wealth for optimize (default: pi_0)')
    parser.add_argument('--consume', action='store_true',
                        help='verify: apply the minimal plan consumption along each path')
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable debug logging')
    parser.add_argument('--quiet', '-q', action='store_true', help='Only log warnings and errors, no summary')

    return parser.parse_args(argv)


def validate_inputs(args: argparse.Namespace) -> None:
    """
    Validate command-line inputs.

    Raises:
        ValueError: If inputs are invalid
    """
    model_path = Path(args.model)
    if not model_path.exists():
        raise ValueError(f"Model file not found: {args.model}")
    if model_path.is_dir():
        raise ValueError("Model path cannot be a directory")

    if args.tol <= 0:
        raise ValueError("Tolerance must be positive")
    if args.grid_n < 2:
        raise ValueError("Grid size must be at least 2")
    if args.threads < 1:
        raise ValueError("Thread count must be at least 1")
    if args.multistarts < 1:
        raise ValueError("Multistart count must be at least 1")
    if args.seed < 0:
        raise ValueError("Seed must be non-negative")
    if args.wmax is not None and args.wmax <= 0:
        raise ValueError("Wealth grid width must be positive")

    output_path = Path(args.out)
    if output_path.exists() and output_path.is_dir():
        raise ValueError("Output path cannot be a directory")
    output_dir = output_path.parent
    if not output_dir.exists():
        try:
            output_dir.mkdir(parents=True)
        except PermissionError:
            raise ValueError(f"Cannot create output directory: {output_dir}")


def _run_command(config: RunConfig, model: MarketModel, reporter: CSVReporter,
                 timings: Dict[str, float]) -> RunOutcome:
    lattice = model.lattice
    engine = SuperhedgeEngine(tol=config.tol, threads=config.threads, verify_tol=config.tol)
    command = config.command
    summary: Dict[str, Any] = {'command': command, 'status': 'ok'}

    if command in TREE_COMMANDS and lattice.recombining:
        raise ModelValidationError(f"'{command}' needs a tree lattice; recombining lattices support check-na, price, dual")

    if command == 'check-na':
        started = time.perf_counter()
        report = check_lattice(lattice, threads=config.threads)
        timings['check_na'] = time.perf_counter() - started
        reporter.generate_na_report(lattice, report)
        summary['diagnostics'] = {'checked_nodes': report.checked_nodes, 'failed_nodes': report.failed_nodes}
        if not report.global_ok:
            summary['status'] = 'arbitrage'
            for failure in report.failures:
                certificate = 'none' if failure.certificate is None else \
                    '[' + ', '.join(f"{v:.6g}" for v in failure.certificate) + ']'
                print(f"❌ Arbitrage at node '{failure.node_id}': {failure.note}; certificate {certificate}",
                      file=sys.stderr)
            return RunOutcome(EXIT_ARBITRAGE, summary)
        return RunOutcome(EXIT_OK, summary)

    payoff = model.require_payoff()
    started = time.perf_counter()
    surface = engine.price(lattice, payoff)
    timings['price'] = time.perf_counter() - started
    summary['pi0'] = surface.pi0
    summary['diagnostics'] = {'max_primal_dual_gap': surface.max_gap(), 'nodes': len(lattice)}

    if command == 'price':
        reporter.generate_price_report(lattice, surface)

    elif command == 'dual':
        summary['value'] = surface.dual0
        enumerated = None
        if not lattice.recombining and len(lattice.leaves()) <= min(200, MAX_ENUMERATED_PATHS):
            started = time.perf_counter()
            enumerated = engine.dual_by_enumeration(lattice, payoff)
            timings['enumeration'] = time.perf_counter() - started
            summary['diagnostics']['enumerated_value'] = enumerated.value
        reporter.generate_dual_report(lattice, surface, enumerated)

    elif command == 'hedge':
        plan = engine.minimal_strategy(lattice, payoff, surface)
        summary['diagnostics']['min_consumption_increment'] = min(plan.increments.values())
        reporter.generate_hedge_report(lattice, surface, plan)

    elif command == 'verify':
        plan = engine.minimal_strategy(lattice, payoff, surface)
        capital = surface.pi0 if config.x is None else config.x
        consumption = plan.increments if config.consume else {}
        started = time.perf_counter()
        verification = engine.verify_superhedge(lattice, payoff, capital, plan.hedges, consumption)
        timings['verify'] = time.perf_counter() - started
        summary['status'] = verification.verdict
        summary['value'] = verification.min_slack
        summary['diagnostics'].update({
            'capital': capital, 'paths_checked': verification.paths_checked,
            'worst_path': '>'.join(verification.worst_path),
            'min_consumption_increment': verification.min_consumption_increment,
            'with_consumption': config.consume,
        })
        reporter.generate_verify_report(verification)

    elif command == 'optimize':
        result = _optimize(config, model, timings)
        summary.update({'value': result.value, 'gap': result.diagnostics.get('max_gap')})
        summary['diagnostics'].update(result.diagnostics)
        summary['diagnostics']['robust_policy_value'] = result.robust_value
        reporter.generate_optimize_report(lattice, result)

    elif command == 'report':
        tables = {'price': reporter.price_table(lattice, surface)}
        if not lattice.recombining:
            plan = engine.minimal_strategy(lattice, payoff, surface)
            tables['hedge'] = reporter.hedge_table(lattice, surface, plan)
            if model.priors is not None and model.utilities is not None:
                result = _optimize(config, model, timings)
                summary.update({'value': result.value, 'gap': result.diagnostics.get('max_gap')})
                tables['optimize'] = reporter.optimize_table(lattice, result)
        summary['diagnostics']['tables'] = list(tables)
        reporter.generate_merged_report(tables)

    return RunOutcome(EXIT_OK, summary)


def _optimize(config: RunConfig, model: MarketModel, timings: Dict[str, float]):
    if model.priors is None or model.utilities is None:
        raise ModelValidationError("optimize needs 'priors_u' and 'utility' in the model")
    optimizer = UtilityOptimizer(grid_n=config.grid_n, w_max=config.w_max, multistarts=config.multistarts,
                                 seed=config.seed, threads=config.threads, tol=config.tol)
    started = time.perf_counter()
    result = optimizer.value_recursion(model.lattice, model.require_payoff(), model.priors,
                                       model.utilities, x0=config.x)
    timings['optimize'] = time.perf_counter() - started
    return result


def run(config: RunConfig) -> RunOutcome:
    """
    Execute one command and write its reports.

    Args:
        config: Run configuration

    Returns:
        RunOutcome with the exit code (0 ok, 1 unexpected failure,
        2 arbitrage, 3 invalid input, 4 optimizer failure)
    """
    logger = logging.getLogger(__name__)
    timings: Dict[str, float] = {}
    summary: Dict[str, Any] = {'command': config.command, 'status': 'error'}
    reporter = None

    try:
        reporter = CSVReporter(config.out)
        started = time.perf_counter()
        model = load_model(config.model)
        timings['load'] = time.perf_counter() - started
        logger.info(f"Loaded model with {len(model.lattice)} nodes, horizon {model.lattice.horizon}")

        outcome = _run_command(config, model, reporter, timings)
        outcome.output_file = reporter.get_output_path()
        summary = outcome.summary

    except ArbitrageError as e:
        logger.error(f"Arbitrage: {e}")
        print(f"❌ Arbitrage: {e}", file=sys.stderr)
        for failure in e.failures:
            if failure.certificate is not None:
                print(f"   node '{failure.node_id}' certificate {list(failure.certificate)}", file=sys.stderr)
        summary['status'] = 'arbitrage'
        outcome = RunOutcome(EXIT_ARBITRAGE, summary)

    except (ModelValidationError, UtilityValidationError, ValueError) as e:
        logger.error(f"Invalid input: {e}")
        print(f"❌ Invalid input: {e}", file=sys.stderr)
        outcome = RunOutcome(EXIT_VALIDATION, summary)

    except UtilityOptimizationError as e:
        logger.error(f"Optimizer failure: {e}")
        print(f"❌ Optimizer failure: {e}", file=sys.stderr)
        outcome = RunOutcome(EXIT_OPTIMIZER, summary)

    except CSVReportError as e:
        logger.error(f"Report failure: {e}")
        print(f"❌ Report failure: {e}", file=sys.stderr)
        return RunOutcome(EXIT_FAILURE, summary)

    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        print(f"❌ Unexpected error occurred: {e}", file=sys.stderr)
        outcome = RunOutcome(EXIT_FAILURE, summary)

    if reporter is not None:
        summary['timings'] = timings
        try:
            reporter.write_summary(summary)
        except CSVReportError as e:
            logger.error(f"Report failure: {e}")
            print(f"❌ Report failure: {e}", file=sys.stderr)
            return RunOutcome(EXIT_FAILURE, summary)
    outcome.summary = summary
    return outcome


def print_summary(outcome: RunOutcome) -> None:
    """
    Print run summary to stdout.

    Args:
        outcome: Outcome of ``run``
    """
    summary = outcome.summary
    command = summary.get('command', '')

    print(f"\nRobust Superhedging Results: {command}")
    print("=" * (29 + len(command)))
    print(f"Status: {summary.get('status')}")
    print()

    print("📊 Summary Statistics:")
    if summary.get('pi0') is not None:
        print(f"  Superhedging price pi_0: {summary['pi0']:.12g}")
    if summary.get('value') is not None:
        print(f"  Value: {summary['value']:.12g}")
    if summary.get('gap') is not None:
        print(f"  Minimax gap: {summary['gap']:.3e}")
    for key, value in sorted(summary.get('diagnostics', {}).items()):
        if isinstance(value, float):
            print(f"  {key}: {value:.6g}")
    print()

    if outcome.output_file:
        print(f"📄 Detailed results saved to: {outcome.output_file}")


def main() -> int:
    """
    Main application entry point.

    Returns:
        Exit code
    """
    try:
        args = parse_arguments()

        if args.verbose:
            log_level = "DEBUG"
        elif args.quiet:
            log_level = "WARNING"
        else:
            log_level = "INFO"
        setup_logging(log_level, args.verbose)
        logger = logging.getLogger(__name__)

        try:
            validate_inputs(args)
        except ValueError as e:
            print(f"❌ Error: {e}", file=sys.stderr)
            return EXIT_VALIDATION

        outcome = run(RunConfig.from_args(args))

        if not args.quiet:
            print_summary(outcome)
            if outcome.exit_code == EXIT_OK:
                print("✅ Done")

        logger.info(f"Command '{args.cmd}' finished with exit code {outcome.exit_code}")
        return outcome.exit_code

    except KeyboardInterrupt:
        print("\n\n⚠️  Run interrupted by user", file=sys.stderr)
        return EXIT_FAILURE

    except Exception as e:
        logger = logging.getLogger(__name__)
        logger.error(f"Unexpected error: {e}", exc_info=True)
        print(f"\n❌ Unexpected error occurred: {e}", file=sys.stderr)
        print("Run with --verbose for detailed error information", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
