"""
Monte-Carlo simulation of generate-then-rerank failure curves

Each trial is one query: draw the shared error rate tau, the number K of
unacceptable hypotheses among N, and the oracle rank j of the reranker's
pick.  The pick fails iff j > N - K (unacceptable hypotheses occupy the
bottom K oracle ranks).
"""

import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, Iterable, List, Literal, Optional, TextIO, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.stats import norm

from error_laws import BetaGenerator, GeneratorSpec
from rank_models import (
    MallowsReranker, PerfectReranker, Permutation, RandomReranker, RerankerSpec,
    TopOneMarginals, marginals_for_grid,
)
from utils import LOGGER_NAME, DatasetParseError, InvalidArgumentError, ResourceLimitError

logger = logging.getLogger(LOGGER_NAME)

_U64 = (1 << 64) - 1
PERMUTATION_MAX_N = 64
CURVE_COLUMNS = ['n', 'failure_rate', 'trials', 'ci_low', 'ci_high', 'log10_failure_rate']
_LN10 = math.log(10.0)


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    generator: GeneratorSpec
    reranker: RerankerSpec
    n_grid: Tuple[int, ...]
    trials: int = Field(ge=1)
    seed: int = 0
    ci_level: float = Field(default=0.99, gt=0, lt=1)
    chunk_size: int = Field(default=65536, ge=1)
    threads: int = Field(default=1, ge=1)
    work_budget: float = Field(default=5e9, gt=0)
    # 'permutation' draws full Mallows rankings and takes their top item
    sampler: Literal['marginal', 'permutation'] = 'marginal'

    @field_validator('n_grid')
    @classmethod
    def _check_grid(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v:
            raise ValueError("n_grid must not be empty")
        if v[0] < 1 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("n_grid must be strictly increasing positive integers")
        return v

    @model_validator(mode='after')
    def _check_sampler(self) -> 'SimConfig':
        if self.sampler == 'permutation':
            if not isinstance(self.reranker, (MallowsReranker, PerfectReranker, RandomReranker)):
                raise ValueError("the permutation sampler supports Mallows-family rerankers only")
            if self.n_grid[-1] > PERMUTATION_MAX_N:
                raise ValueError(f"the permutation sampler is limited to n <= {PERMUTATION_MAX_N}")
        return self


class CurvePoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: int = Field(ge=1)
    failure_rate: float = Field(ge=0, le=1)
    trials: int = Field(ge=0)
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    # natural log; set when failure_rate underflows or comes from an analytic law
    log_failure_rate: Optional[float] = None

    @model_validator(mode='after')
    def _check_interval(self) -> 'CurvePoint':
        if self.ci_low is not None and not 0.0 <= self.ci_low <= self.failure_rate:
            raise ValueError(f"ci_low={self.ci_low} outside [0, failure_rate] at n={self.n}")
        if self.ci_high is not None and not self.failure_rate <= self.ci_high <= 1.0:
            raise ValueError(f"ci_high={self.ci_high} outside [failure_rate, 1] at n={self.n}")
        return self

    @property
    def log_value(self) -> float:
        if self.log_failure_rate is not None:
            return self.log_failure_rate
        return math.log(self.failure_rate) if self.failure_rate > 0 else -math.inf


class FailureCurve(BaseModel):
    points: List[CurvePoint]
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @field_validator('points')
    @classmethod
    def _check_increasing(cls, v: List[CurvePoint]) -> List[CurvePoint]:
        if any(b.n <= a.n for a, b in zip(v, v[1:])):
            raise ValueError("curve points must have strictly increasing n")
        return v

    @property
    def ns(self) -> np.ndarray:
        return np.array([p.n for p in self.points], dtype=int)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.failure_rate for p in self.points], dtype=float)

    @property
    def log_rates(self) -> np.ndarray:
        return np.array([p.log_value for p in self.points], dtype=float)

    @property
    def trials(self) -> np.ndarray:
        return np.array([p.trials for p in self.points], dtype=int)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def substream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, keys...); independent of call order."""
    entropy = [int(seed) & _U64] + [int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def sample_top1_indices(marginals: TopOneMarginals, rng: np.random.Generator, size: int) -> np.ndarray:
    """Oracle ranks in 1..N drawn from eta by inverting the suffix sums."""
    v = 1.0 - rng.random(size)
    return marginals.n - np.searchsorted(marginals.suffix, v, side='left') + 1


def sample_top1_index(marginals: TopOneMarginals, rng: np.random.Generator) -> int:
    return int(sample_top1_indices(marginals, rng, 1)[0])


def sample_mallows_permutations(lam: float, n: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """Rows of Mallows rankings (position -> oracle rank) by repeated insertion.

    Item i is inserted at slot s in 0..i-1; the i-1-s items after it are all
    smaller, so the slot is drawn with weight exp(-lambda (i-1-s)).
    """
    if math.isnan(lam) or lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    if n > PERMUTATION_MAX_N:
        raise ResourceLimitError(f"permutation sampling refused for n={n} > {PERMUTATION_MAX_N}")
    if math.isinf(lam):
        return np.tile(np.arange(1, n + 1, dtype=np.int64), (size, 1))
    perms = np.zeros((size, n), dtype=np.int64)
    cols = np.arange(n)
    for i in range(1, n + 1):
        cdf = np.cumsum(np.exp(-lam * (i - 1 - np.arange(i, dtype=float))))
        cdf /= cdf[-1]
        slot = np.minimum(np.searchsorted(cdf, rng.random(size), side='right'), i - 1)[:, None]
        shifted = np.concatenate([np.zeros((size, 1), dtype=np.int64), perms[:, :-1]], axis=1)
        perms = np.where(cols < slot, perms, np.where(cols == slot, i, shifted))
    return perms


def sample_mallows_permutation(lam: float, n: int, rng: np.random.Generator) -> Permutation:
    return tuple(int(x) for x in sample_mallows_permutations(lam, n, rng, 1)[0])


def _permutation_lambda(reranker: RerankerSpec) -> float:
    if isinstance(reranker, PerfectReranker):
        return math.inf
    if isinstance(reranker, RandomReranker):
        return 0.0
    assert isinstance(reranker, MallowsReranker)
    return reranker.lam


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def wilson_interval(failures: int, trials: int, level: float) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion, clamped to contain the rate."""
    if not 0.0 < level < 1.0:
        raise InvalidArgumentError(f"confidence level must lie in (0, 1), got {level}")
    if trials == 0:
        return 0.0, 1.0
    if not 0 <= failures <= trials:
        raise InvalidArgumentError(f"failures={failures} outside [0, {trials}]")
    z = float(norm.ppf((1.0 + level) / 2.0))
    p = failures / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    centre = (p + z2 / (2.0 * trials)) / denom
    half = z * math.sqrt(p * (1.0 - p) / trials + z2 / (4.0 * trials * trials)) / denom
    low = min(max(0.0, centre - half), p)
    high = max(min(1.0, centre + half), p)
    return low, high


def _chunks(trials: int, chunk_size: int) -> List[Tuple[int, int]]:
    full, rest = divmod(trials, chunk_size)
    out = [(c, chunk_size) for c in range(full)]
    if rest:
        out.append((full, rest))
    return out


def _count_failures(config: SimConfig, marginals: Optional[TopOneMarginals],
                    n: int, chunk: int, size: int) -> int:
    rng = substream(config.seed, n, chunk)
    gen = config.generator
    if isinstance(gen, BetaGenerator):
        tau = rng.beta(gen.alpha, gen.beta, size)
    else:
        tau = gen.epsilon
    k = rng.binomial(n, tau, size)
    if marginals is None:
        picks = sample_mallows_permutations(_permutation_lambda(config.reranker), n, rng, size)[:, 0]
    else:
        picks = sample_top1_indices(marginals, rng, size)
    return int(np.count_nonzero(picks > n - k))


def simulate_curve(config: SimConfig) -> FailureCurve:
    """Simulated failure rate with a Wilson interval at every N of the grid."""
    work = config.trials * sum(config.n_grid)
    if work > config.work_budget:
        raise ResourceLimitError(
            f"simulation needs trials*sum(n) = {work:.3g} > work budget {config.work_budget:.3g}")

    if config.sampler == 'permutation':
        marginals: Dict[int, Optional[TopOneMarginals]] = {n: None for n in config.n_grid}
    else:
        marginals = dict(marginals_for_grid(config.reranker, config.n_grid))

    tasks = [(n, c, size) for n in config.n_grid for c, size in _chunks(config.trials, config.chunk_size)]
    logger.info(f"Simulating {len(config.n_grid)} grid points x {config.trials} trials "
                f"in {len(tasks)} chunks on {config.threads} thread(s)")

    def run(task: Tuple[int, int, int]) -> int:
        n, c, size = task
        return _count_failures(config, marginals[n], n, c, size)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            counts = list(pool.map(run, tasks))
    else:
        counts = [run(t) for t in tasks]

    failures: Dict[int, int] = {n: 0 for n in config.n_grid}
    for (n, _, _), f in zip(tasks, counts):
        failures[n] += f

    points = []
    for n in config.n_grid:
        low, high = wilson_interval(failures[n], config.trials, config.ci_level)
        rate = failures[n] / config.trials
        logger.debug(f"n={n}: {failures[n]}/{config.trials} failures")
        points.append(CurvePoint(n=n, failure_rate=rate, trials=config.trials, ci_low=low, ci_high=high))

    return FailureCurve(points=points, metadata={
        'source': 'simulation',
        'generator': config.generator.model_dump(),
        'reranker': config.reranker.model_dump(),
        'seed': config.seed,
        'trials': config.trials,
        'ci_level': config.ci_level,
        'chunk_size': config.chunk_size,
        'sampler': config.sampler,
    })


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

def _fmt(x: Optional[float]) -> str:
    return '' if x is None else repr(float(x))


def write_curve_csv(curve: FailureCurve, stream: TextIO) -> None:
    """Write the curve with shortest round-trip floats; missing interval cells stay empty."""
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(CURVE_COLUMNS)
    for p in curve.points:
        writer.writerow([p.n, _fmt(p.failure_rate), p.trials, _fmt(p.ci_low), _fmt(p.ci_high),
                         _fmt(p.log_value / _LN10)])


def _parse_float(cell: Optional[str], column: str, line: int) -> Optional[float]:
    if cell is None or cell.strip() == '':
        return None
    try:
        return float(cell)
    except ValueError:
        raise DatasetParseError(f"column {column!r}: not a number: {cell!r}", line)


def read_curve_csv(stream: TextIO) -> FailureCurve:
    reader = csv.DictReader(stream)
    missing = [c for c in CURVE_COLUMNS[:5] if c not in (reader.fieldnames or [])]
    if missing:
        raise DatasetParseError(f"curve CSV is missing columns {missing}", 1)
    points = []
    for row in reader:
        line = reader.line_num
        try:
            n = int(row['n'])
            trials = int(row['trials'])
        except (TypeError, ValueError):
            raise DatasetParseError(f"bad integer cell in row {row}", line)
        rate = _parse_float(row['failure_rate'], 'failure_rate', line)
        if rate is None:
            raise DatasetParseError("failure_rate is empty", line)
        log10_rate = _parse_float(row.get('log10_failure_rate'), 'log10_failure_rate', line)
        log_rate = None
        if rate == 0.0 and log10_rate is not None and math.isfinite(log10_rate):
            log_rate = log10_rate * _LN10
        try:
            points.append(CurvePoint(
                n=n, failure_rate=rate, trials=trials,
                ci_low=_parse_float(row['ci_low'], 'ci_low', line),
                ci_high=_parse_float(row['ci_high'], 'ci_high', line),
                log_failure_rate=log_rate,
            ))
        except ValueError as e:
            raise DatasetParseError(str(e), line)
    try:
        return FailureCurve(points=points)
    except ValueError as e:
        raise DatasetParseError(str(e))


def metadata_path(csv_path: str) -> str:
    return f"{csv_path}.meta.json"


def save_curve(curve: FailureCurve, path: str) -> None:
    """Write the CSV to `path` ('-' for stdout) plus a metadata sidecar for files."""
    if path == '-':
        write_curve_csv(curve, sys.stdout)
        return
    with open(path, 'w', newline='') as f:
        write_curve_csv(curve, f)
    if curve.metadata:
        with open(metadata_path(path), 'w') as f:
            json.dump(curve.metadata, f, indent=2, sort_keys=True, default=str)
    logger.info(f"Wrote {len(curve.points)} curve points to {path}")


def load_curve(path: str) -> FailureCurve:
    with open(path, newline='') as f:
        curve = read_curve_csv(f)
    meta = metadata_path(path)
    if os.path.exists(meta):
        with open(meta) as f:
            curve = curve.model_copy(update={'metadata': json.load(f)})
    return curve


def curve_from_log_values(ns: Iterable[int], log_values: Iterable[float],
                          metadata: Optional[Dict[str, Any]] = None) -> FailureCurve:
    """Analytic curve: exact log values, no trials and no interval."""
    points = [CurvePoint(n=int(n), failure_rate=min(1.0, math.exp(v)), trials=0, log_failure_rate=float(v))
              for n, v in zip(ns, log_values)]
    return FailureCurve(points=points, metadata=metadata or {})
