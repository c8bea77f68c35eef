"""
Evaluate reranking laws on an N grid and invert them for a target failure rate
"""

import logging
import math
from typing import Callable, Dict, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field

from channel_sim import FailureCurve, curve_from_log_values
from error_laws import (
    BetaGenerator, GeneratorSpec, IndependentGenerator, LogProb, p_err_generic_beta, p_err_generic_indep,
    p_err_mallows_indep, p_err_perfect_beta, p_err_perfect_indep, p_err_random,
)
from rank_models import (
    MallowsReranker, PerfectReranker, RandomReranker, RerankerSpec, TopOneMarginals,
    marginals_for, marginals_for_grid,
)
from utils import LOGGER_NAME, InvalidArgumentError

logger = logging.getLogger(LOGGER_NAME)

LOG_COMPARE_TOL = 1e-12


def law_log_p(generator: GeneratorSpec, reranker: RerankerSpec, n: int,
              marginals: Optional[TopOneMarginals] = None) -> LogProb:
    """P_err(n) for a generator/reranker pair, closed forms where they exist."""
    if isinstance(generator, IndependentGenerator):
        eps = generator.epsilon
        if isinstance(reranker, PerfectReranker):
            return p_err_perfect_indep(eps, n)
        if isinstance(reranker, RandomReranker):
            return p_err_random(eps)
        if isinstance(reranker, MallowsReranker):
            return p_err_mallows_indep(eps, reranker.lam, n)
        return p_err_generic_indep(eps, marginals or marginals_for(reranker, n))
    if isinstance(generator, BetaGenerator):
        if isinstance(reranker, PerfectReranker):
            return p_err_perfect_beta(generator.alpha, generator.beta, n)
        return p_err_generic_beta(generator.alpha, generator.beta, marginals or marginals_for(reranker, n))
    raise InvalidArgumentError(f"unknown generator spec {generator!r}")


def _needs_marginals(generator: GeneratorSpec, reranker: RerankerSpec) -> bool:
    if isinstance(reranker, PerfectReranker):
        return False
    if isinstance(generator, IndependentGenerator):
        return not isinstance(reranker, (RandomReranker, MallowsReranker))
    return True


def evaluate_law(generator: GeneratorSpec, reranker: RerankerSpec, n_grid: Sequence[int]) -> FailureCurve:
    """Analytic failure curve: exact log values, linear values derived from them."""
    ns = [int(n) for n in n_grid]
    marginals: Dict[int, TopOneMarginals] = (
        marginals_for_grid(reranker, ns) if _needs_marginals(generator, reranker) else {})
    values = [law_log_p(generator, reranker, n, marginals.get(n)).value for n in ns]
    return curve_from_log_values(ns, values, metadata={
        'source': 'analytic',
        'generator': generator.model_dump(),
        'reranker': reranker.model_dump(),
    })


class LawQuery(BaseModel):
    model_config = ConfigDict(frozen=True)

    generator: GeneratorSpec
    reranker: RerankerSpec
    target: float = Field(gt=0, lt=1)
    n_cap: int = Field(default=100_000, ge=1)


class PredictionResult(BaseModel):
    reachable: bool
    n: Optional[int]
    p_err_at_n: float
    n_cap: int


def _meets(log_value: float, log_target: float) -> bool:
    return log_value <= log_target + LOG_COMPARE_TOL * max(1.0, abs(log_target))


def scan_min_n(log_p: Callable[[int], float], target: float, start: int, n_cap: int) -> Optional[int]:
    """First n in [start, n_cap] with P_err(n) <= target, by linear scan."""
    log_target = math.log(target)
    for n in range(start, n_cap + 1):
        if _meets(log_p(n), log_target):
            return n
    return None


def min_n_for_target(query: LawQuery) -> PredictionResult:
    """Smallest n <= n_cap with P_err(n) <= target.

    Exponential expansion brackets the answer and binary search narrows it.
    The probed values are then checked for monotonicity; on a violation the
    answer is recomputed by a linear scan from the last verified point.
    """
    cache: Dict[int, float] = {}

    def log_p(n: int) -> float:
        if n not in cache:
            cache[n] = law_log_p(query.generator, query.reranker, n).value
        return cache[n]

    log_target = math.log(query.target)
    cap = query.n_cap
    answer: Optional[int] = None
    if _meets(log_p(1), log_target):
        answer = 1
    else:
        lo, hi = 1, 1
        while hi < cap:
            lo, hi = hi, min(2 * hi, cap)
            if _meets(log_p(hi), log_target):
                break
        if _meets(log_p(hi), log_target):
            # invariant: P(lo) > target >= P(hi)
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if _meets(log_p(mid), log_target):
                    hi = mid
                else:
                    lo = mid
            answer = hi

    probed: List[int] = sorted(cache)
    violation = next((i for i in range(1, len(probed))
                      if cache[probed[i]] > cache[probed[i - 1]] + LOG_COMPARE_TOL), None)
    if violation is not None:
        start = probed[violation - 1]
        logger.warning(f"P_err is not monotone between n={start} and n={probed[violation]}; "
                       f"falling back to a linear scan from n={start}")
        answer = scan_min_n(log_p, query.target, start, cap)

    if answer is None:
        value = log_p(cap)
        logger.info(f"Target {query.target} not reached by n_cap={cap} (P_err={math.exp(value):.3g})")
        return PredictionResult(reachable=False, n=None, p_err_at_n=math.exp(value), n_cap=cap)
    return PredictionResult(reachable=True, n=answer, p_err_at_n=math.exp(log_p(answer)), n_cap=cap)
