#!/usr/bin/env python3
"""
reranking-laws - failure-rate laws for generate-then-rerank pipelines
Main entry point for the command-line interface
"""

import argparse
import csv
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from channel_sim import SimConfig, load_curve, save_curve, simulate_curve
from empirical import STRATEGIES, Subsampling, empirical_failure_curve, load_dataset
from error_laws import BetaGenerator, GeneratorSpec, IndependentGenerator
from fit import FitReport, fit_law, holdout_residuals
from predict import LawQuery, evaluate_law, min_n_for_target
from rank_models import (
    ExplicitReranker, MallowsReranker, PerfectReranker, PolynomialReranker, RandomReranker,
    RerankerSpec, ZipfMandelbrotReranker, lambda_from_e_neg, marginals_for,
)
from utils import (
    LOGGER_NAME, RerankingLawError, get_run_logger, get_setting, load_config, setup_logging,
)

logger = logging.getLogger(LOGGER_NAME)


# ---------------------------------------------------------------------------
# Spec strings
# ---------------------------------------------------------------------------

def _floats(text: str, count: int, what: str) -> List[float]:
    parts = text.split(',')
    if len(parts) != count:
        raise argparse.ArgumentTypeError(f"{what} expects {count} comma-separated number(s), got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what}: not a number in {text!r}")


def parse_generator(text: str) -> GeneratorSpec:
    """`indep:<eps>` or `beta:<alpha>,<beta>`."""
    kind, _, rest = text.partition(':')
    try:
        if kind == 'indep':
            (eps,) = _floats(rest, 1, 'indep')
            return IndependentGenerator(epsilon=eps)
        if kind == 'beta':
            a, b = _floats(rest, 2, 'beta')
            return BetaGenerator(alpha=a, beta=b)
    except ValidationError as e:
        raise argparse.ArgumentTypeError(f"invalid generator {text!r}: {e.errors()[0]['msg']}")
    raise argparse.ArgumentTypeError(f"unknown generator {text!r}; use indep:<eps> or beta:<alpha>,<beta>")


def _read_explicit_marginals(path: str) -> Tuple[float, ...]:
    try:
        with open(path, newline='') as f:
            reader = csv.DictReader(f)
            if 'eta' not in (reader.fieldnames or []):
                raise argparse.ArgumentTypeError(f"{path}: no 'eta' column")
            return tuple(float(row['eta']) for row in reader)
    except (OSError, ValueError) as e:
        raise argparse.ArgumentTypeError(f"cannot read marginals from {path}: {e}")


def parse_reranker(text: str) -> RerankerSpec:
    """`perfect`, `random`, `mallows:<e^-lambda>`, `zipf:<e^-lambda>,<gamma>`, `poly:<r>`, `explicit:<path>`."""
    kind, _, rest = text.partition(':')
    try:
        if kind == 'perfect' and not rest:
            return PerfectReranker()
        if kind == 'random' and not rest:
            return RandomReranker()
        if kind == 'mallows':
            (e_neg,) = _floats(rest, 1, 'mallows')
            if e_neg == 0:
                return PerfectReranker()
            return MallowsReranker(lam=lambda_from_e_neg(e_neg))
        if kind == 'zipf':
            e_neg, gamma = _floats(rest, 2, 'zipf')
            if e_neg == 0:
                return PerfectReranker()
            return ZipfMandelbrotReranker(lam=lambda_from_e_neg(e_neg), gamma=gamma)
        if kind == 'poly':
            try:
                r = int(rest)
            except ValueError:
                raise argparse.ArgumentTypeError(f"poly expects an integer degree, got {rest!r}")
            return PolynomialReranker(r=r)
        if kind == 'explicit' and rest:
            return ExplicitReranker(marginals=_read_explicit_marginals(rest))
    except (ValidationError, RerankingLawError) as e:
        msg = e.errors()[0]['msg'] if isinstance(e, ValidationError) else str(e)
        raise argparse.ArgumentTypeError(f"invalid reranker {text!r}: {msg}")
    raise argparse.ArgumentTypeError(f"unknown reranker {text!r}")


def parse_n_grid(text: str) -> Tuple[int, ...]:
    """`a..b` (inclusive) or a comma list."""
    try:
        if '..' in text:
            a, b = text.split('..', 1)
            grid = tuple(range(int(a), int(b) + 1))
        else:
            grid = tuple(int(x) for x in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad N grid {text!r}; use a..b or a comma list")
    if not grid or grid[0] < 1 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise argparse.ArgumentTypeError(f"N grid {text!r} must be strictly increasing positive integers")
    return grid


def parse_subsample(text: str) -> Tuple[str, int]:
    """`prefix` or `bootstrap:<B>`."""
    if text == 'prefix':
        return 'prefix', 1
    kind, _, rest = text.partition(':')
    if kind == 'bootstrap':
        try:
            samples = int(rest)
        except ValueError:
            samples = 0
        if samples >= 1:
            return 'bootstrap', samples
    raise argparse.ArgumentTypeError(f"bad subsampling {text!r}; use prefix or bootstrap:<B>")


def _unit_interval(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"{text} must lie strictly between 0 and 1")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _write_json(data: Dict[str, Any], output: str) -> None:
    text = json.dumps(data, indent=2) + '\n'
    if output == '-':
        sys.stdout.write(text)
    else:
        with open(output, 'w') as f:
            f.write(text)
        logger.info(f"Wrote {output}")


def _threads(args: argparse.Namespace, config: Dict[str, Any], section: str) -> int:
    return int(args.threads or get_setting(config, ['settings', section, 'threads'], 1))


def run_curve(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    save_curve(evaluate_law(args.generator, args.reranker, args.n), args.output)


def run_simulate(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    sim = SimConfig(
        generator=args.generator, reranker=args.reranker, n_grid=args.n, trials=args.trials,
        seed=args.seed,
        ci_level=args.ci_level or get_setting(config, ['settings', 'simulation', 'ci_level'], 0.99),
        chunk_size=int(get_setting(config, ['settings', 'simulation', 'chunk_size'], 65536)),
        threads=_threads(args, config, 'simulation'),
        work_budget=float(get_setting(config, ['settings', 'simulation', 'work_budget'], 5e9)),
        sampler=args.sampler,
    )
    save_curve(simulate_curve(sim), args.output)


def run_empirical(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    dataset = load_dataset(args.records, args.utilities, args.threshold)
    mode, samples = args.subsample
    curve = empirical_failure_curve(
        dataset, args.strategy, args.n,
        subsampling=Subsampling(mode=mode, samples=samples, seed=args.seed),
        ci_level=args.ci_level or get_setting(config, ['settings', 'empirical', 'ci_level'], 0.99),
        include_self=args.mbr_include_self, split=args.split, group=args.group,
    )
    save_curve(curve, args.output)


def run_fit(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    oracle = load_curve(args.oracle)
    imperfect = load_curve(args.imperfect) if args.imperfect else None
    report = fit_law(
        oracle, imperfect, weighted=args.weighted,
        max_iterations=int(get_setting(config, ['settings', 'fit', 'max_iterations'], 500)),
        threads=_threads(args, config, 'fit'),
    )
    if args.test_oracle or args.test_imperfect:
        report = report.model_copy(update={'holdout': holdout_residuals(
            report,
            load_curve(args.test_oracle) if args.test_oracle else None,
            load_curve(args.test_imperfect) if args.test_imperfect else None,
        )})
    _write_json(report.to_json_dict(), args.output)


def run_predict(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    if args.params:
        with open(args.params) as f:
            generator, reranker = FitReport.from_json_dict(json.load(f)).params.to_specs()
    else:
        generator, reranker = args.generator, args.reranker
    query = LawQuery(
        generator=generator, reranker=reranker, target=args.target,
        n_cap=args.n_cap or int(get_setting(config, ['settings', 'predict', 'n_cap'], 100_000)),
    )
    _write_json(min_n_for_target(query).model_dump(), args.output)


def run_marginals(args: argparse.Namespace, config: Dict[str, Any]) -> None:
    marginals = marginals_for(args.reranker, args.n)

    def emit(stream) -> None:
        writer = csv.writer(stream, lineterminator='\n')
        writer.writerow(['j', 'eta'])
        for j, eta in enumerate(marginals.eta.tolist(), start=1):
            writer.writerow([j, repr(eta)])

    if args.output == '-':
        emit(sys.stdout)
    else:
        with open(args.output, 'w', newline='') as f:
            emit(f)


COMMANDS: Dict[str, Tuple[Callable[[argparse.Namespace, Dict[str, Any]], None], Sequence[str]]] = {
    'curve': (run_curve, ('generator', 'reranker', 'n')),
    'simulate': (run_simulate, ('generator', 'reranker', 'n', 'trials')),
    'empirical': (run_empirical, ('records', 'n')),
    'fit': (run_fit, ('oracle',)),
    'predict': (run_predict, ('target',)),
    'marginals': (run_marginals, ('reranker', 'n')),
}


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog='reranking-laws',
        description='Failure-rate laws for generate-then-rerank pipelines',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s curve --generator indep:0.3 --reranker mallows:0.5 --n 1..50
  %(prog)s simulate --generator beta:0.1,0.46 --reranker perfect --n 1..50 --trials 100000 -o oracle.csv
  %(prog)s empirical --records hyps.jsonl --strategy mbr --utilities utils.jsonl --n 1..20
  %(prog)s fit --oracle oracle.csv --imperfect mbr.csv -o law.json
  %(prog)s predict --params law.json --target 0.01
  %(prog)s marginals --reranker zipf:0.1,0.5 --n 10
        """
    )
    parser.add_argument('--json-errors', action='store_true', help='Print errors as JSON objects')
    parser.add_argument('--threads', type=_positive_int, default=None,
                        help='Worker threads for simulate/fit (results do not depend on it)')
    parser.add_argument('--config', default=None, help='JSON file supplying default values for flags')
    parser.add_argument('--settings', default='config.yaml', help='Settings YAML (default: config.yaml)')
    parser.add_argument('--log-level', default=None, help='Override settings.logging.level')

    subparsers = parser.add_subparsers(dest='command', help='Available commands')
    subs: Dict[str, argparse.ArgumentParser] = {}

    def output_flag(p: argparse.ArgumentParser) -> None:
        p.add_argument('-o', '--output', default='-', help="Output path, '-' for stdout (default)")

    p = subparsers.add_parser('curve', help='Analytic failure curve as CSV')
    p.add_argument('--generator', type=parse_generator, help='indep:<eps> | beta:<alpha>,<beta>')
    p.add_argument('--reranker', type=parse_reranker, help='perfect | random | mallows:<e> | zipf:<e>,<g> | poly:<r> | explicit:<csv>')
    p.add_argument('--n', type=parse_n_grid, help='N grid: a..b or comma list')
    output_flag(p)
    subs['curve'] = p

    p = subparsers.add_parser('simulate', help='Monte-Carlo failure curve as CSV')
    p.add_argument('--generator', type=parse_generator)
    p.add_argument('--reranker', type=parse_reranker)
    p.add_argument('--n', type=parse_n_grid)
    p.add_argument('--trials', type=_positive_int, help='Simulated queries per grid point')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--ci-level', type=_unit_interval, default=None)
    p.add_argument('--sampler', choices=['marginal', 'permutation'], default='marginal')
    output_flag(p)
    subs['simulate'] = p

    p = subparsers.add_parser('empirical', help='Failure curve replayed from hypothesis records')
    p.add_argument('--records', help='JSONL hypothesis records')
    p.add_argument('--utilities', default=None, help='JSONL utility matrices')
    p.add_argument('--threshold', type=float, default=None, help='acceptable = oracle_score >= threshold')
    p.add_argument('--strategy', choices=STRATEGIES, default='oracle')
    p.add_argument('--n', type=parse_n_grid)
    p.add_argument('--subsample', type=parse_subsample, default='prefix', help='prefix | bootstrap:<B>')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--mbr-include-self', action='store_true')
    p.add_argument('--split', default=None)
    p.add_argument('--group', default=None)
    p.add_argument('--ci-level', type=_unit_interval, default=None)
    output_flag(p)
    subs['empirical'] = p

    p = subparsers.add_parser('fit', help='Two-stage fit of a reranking law')
    p.add_argument('--oracle', help='Perfect-reranker curve CSV')
    p.add_argument('--imperfect', default=None, help='Imperfect-reranker curve CSV')
    p.add_argument('--weighted', action='store_true', help='Weight residuals by sqrt(trials)')
    p.add_argument('--test-oracle', default=None, help='Held-out perfect-reranker curve CSV')
    p.add_argument('--test-imperfect', default=None, help='Held-out imperfect-reranker curve CSV')
    output_flag(p)
    subs['fit'] = p

    p = subparsers.add_parser('predict', help='Smallest N reaching a target failure rate')
    p.add_argument('--params', default=None, help='FitReport JSON from the fit command')
    p.add_argument('--generator', type=parse_generator, default=None)
    p.add_argument('--reranker', type=parse_reranker, default=None)
    p.add_argument('--target', type=_unit_interval)
    p.add_argument('--n-cap', type=_positive_int, default=None)
    output_flag(p)
    subs['predict'] = p

    p = subparsers.add_parser('marginals', help='Top-1 marginals of a reranker as CSV')
    p.add_argument('--reranker', type=parse_reranker)
    p.add_argument('--n', type=_positive_int)
    output_flag(p)
    subs['marginals'] = p

    return parser, subs


def _apply_config_file(path: str, sub: argparse.ArgumentParser) -> None:
    """Use a JSON object of flag destinations as defaults for the chosen subcommand."""
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        sub.error(f"--config {path}: expected a JSON object")
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(data) - known)
    if unknown:
        sub.error(f"--config {path}: unknown flags {unknown}")
    defaults = {}
    for k, v in data.items():
        # strings go through each flag's type converter, like command-line values
        if isinstance(v, list):
            v = ','.join(str(x) for x in v)
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            v = str(v)
        defaults[k] = v
    sub.set_defaults(**defaults)


def dispatch(argv: Sequence[str]) -> int:
    """Run one command; returns the process exit code."""
    parser, subs = build_parser()
    argv = list(argv)
    json_errors = '--json-errors' in argv
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            sys.stderr.write(f"{parser.prog}: error: a command is required\n")
            return 2
        sub = subs[args.command]
        if args.config:
            _apply_config_file(args.config, sub)
            args = parser.parse_args(argv)
        handler, required = COMMANDS[args.command]
        missing = [f"--{name.replace('_', '-')}" for name in required if getattr(args, name, None) is None]
        if missing:
            sub.error(f"the following arguments are required: {', '.join(missing)}")
        if args.command == 'predict' and not args.params and (args.generator is None or args.reranker is None):
            sub.error("predict needs --params or both --generator and --reranker")
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else (0 if e.code is None else 2)
    except (OSError, ValueError) as e:
        return _report_error(e, json_errors)

    config = load_config(args.settings)
    setup_logging(config, level=args.log_level)
    run_log = get_run_logger(config)
    try:
        handler(args, config)
    except (RerankingLawError, ValueError, OSError) as e:
        if run_log:
            run_log.log_failure(args.command, e)
            run_log.close()
        return _report_error(e, json_errors)
    if run_log:
        arguments = {k: (v.model_dump() if hasattr(v, 'model_dump') else v) for k, v in vars(args).items()}
        run_log.log_command(args.command, arguments, getattr(args, 'output', None), getattr(args, 'seed', None))
        run_log.close()
    return 0


def _report_error(error: BaseException, json_errors: bool) -> int:
    if json_errors:
        sys.stderr.write(json.dumps({'error': type(error).__name__, 'message': str(error)}) + '\n')
    else:
        sys.stderr.write(f"error: {error}\n")
    return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
