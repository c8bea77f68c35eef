"""
Failure probabilities P_err(N) of generator/reranker pairs

Every law is returned as a LogProb.  Sums over the number K of unacceptable
hypotheses are carried out in log space so curves stay accurate far below
the double-precision range of linear probabilities.
"""

import logging
import math
from dataclasses import dataclass
from typing import Annotated, Literal, Tuple, Union

import numpy as np
from pydantic import Field, TypeAdapter
from scipy.special import gammaln, logsumexp
from scipy.stats import binom

from rank_models import SpecModel, TopOneMarginals
from utils import LOGGER_NAME, InvalidArgumentError

logger = logging.getLogger(LOGGER_NAME)

LOG_SLACK = 1e-12
LINEAR_PMF_FLOOR = 1e-280


class IndependentGenerator(SpecModel):
    """Each hypothesis is unacceptable independently with probability epsilon."""
    kind: Literal['indep'] = 'indep'
    epsilon: float = Field(ge=0, le=1)


class BetaGenerator(SpecModel):
    """Per-query error rate tau ~ Beta(alpha, beta), hypotheses i.i.d. given tau."""
    kind: Literal['beta'] = 'beta'
    alpha: float = Field(gt=0, allow_inf_nan=False)
    beta: float = Field(gt=0, allow_inf_nan=False)

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


GeneratorSpec = Annotated[Union[IndependentGenerator, BetaGenerator], Field(discriminator='kind')]
generator_adapter: TypeAdapter = TypeAdapter(GeneratorSpec)


@dataclass(frozen=True)
class LogProb:
    """Natural log of a probability."""

    value: float

    def __post_init__(self):
        v = float(self.value)
        if math.isnan(v) or v > LOG_SLACK:
            raise InvalidArgumentError(f"not a log-probability: {self.value!r}")
        object.__setattr__(self, 'value', min(v, 0.0))

    @property
    def linear(self) -> float:
        return math.exp(self.value)

    @property
    def log10(self) -> float:
        return self.value / math.log(10.0)

    @classmethod
    def from_linear(cls, p: float) -> 'LogProb':
        if p == 0:
            return cls(-math.inf)
        return cls(math.log(p))


ZERO = LogProb(-math.inf)
ONE = LogProb(0.0)


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidArgumentError(f"epsilon must lie in [0, 1], got {epsilon}")


def _check_n(n: int) -> None:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"n must be a positive integer, got {n!r}")


def _check_beta_params(alpha: float, beta: float) -> None:
    if not (alpha > 0 and beta > 0 and math.isfinite(alpha) and math.isfinite(beta)):
        raise InvalidArgumentError(f"alpha and beta must be positive reals, got ({alpha}, {beta})")


def _log1mexp(x: float) -> float:
    """log(1 - e^x) for x <= 0."""
    if x == 0:
        return -math.inf
    if x > -math.log(2.0):
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def _log_suffix(marginals: TopOneMarginals) -> np.ndarray:
    with np.errstate(divide='ignore'):
        return np.log(marginals.suffix)


def log_binomial_coefficients(n: int) -> np.ndarray:
    k = np.arange(n + 1, dtype=float)
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def binomial_logpmf(epsilon: float, n: int) -> np.ndarray:
    """log P(K = k) for K ~ Binomial(n, epsilon), k = 0..n, with epsilon in (0, 1).

    Entries the linear pmf can represent come from scipy's saddle-point pmf;
    log-Gamma coefficients lose ~1e-11 to cancellation at n ~ 1e4 and are only
    used where the pmf underflows.
    """
    k = np.arange(n + 1)
    linear = binom.pmf(k, n, epsilon)
    with np.errstate(divide='ignore'):
        out = np.log(linear)
    tiny = linear < LINEAR_PMF_FLOOR
    if tiny.any():
        kf = k[tiny].astype(float)
        out[tiny] = (log_binomial_coefficients(n)[tiny]
                     + kf * math.log(epsilon) + (n - kf) * math.log1p(-epsilon))
    return out


# ---------------------------------------------------------------------------
# Independent generator
# ---------------------------------------------------------------------------

def p_err_perfect_indep(epsilon: float, n: int) -> LogProb:
    """Perfect reranker: fails only if all n hypotheses are wrong, eps^n."""
    _check_epsilon(epsilon)
    _check_n(n)
    if epsilon == 0:
        return ZERO
    if epsilon == 1:
        return ONE
    return LogProb(n * math.log(epsilon))


def p_err_random(epsilon: float) -> LogProb:
    """Random reranker: same error as the generator alone, for every N."""
    _check_epsilon(epsilon)
    return LogProb.from_linear(epsilon)


def p_err_generic_indep(epsilon: float, marginals: TopOneMarginals) -> LogProb:
    """sum_K C(n,K) eps^K (1-eps)^{n-K} * suffix_mass(marginals, K)."""
    _check_epsilon(epsilon)
    if epsilon == 0:
        return ZERO
    if epsilon == 1:
        return ONE
    terms = binomial_logpmf(epsilon, marginals.n) + _log_suffix(marginals)
    return LogProb(float(logsumexp(terms)))


def mallows_rate(epsilon: float, lam: float) -> float:
    """A = e^{-lambda}(1-eps) + eps, the per-step decay of the Mallows law."""
    _check_epsilon(epsilon)
    if math.isnan(lam) or lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    return math.exp(-lam) * (1.0 - epsilon) + epsilon


def mallows_convergence_rate(epsilon: float, lam: float) -> float:
    """lambda_eps = -ln A: slope of the log failure curve for large N."""
    return -math.log(mallows_rate(epsilon, lam))


def p_err_mallows_indep(epsilon: float, lam: float, n: int) -> LogProb:
    """Closed form ([A]^n - e^{-lambda n}) / (1 - e^{-lambda n}), evaluated in log space."""
    _check_epsilon(epsilon)
    _check_n(n)
    if math.isnan(lam) or lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    if epsilon == 0:
        return ZERO
    if epsilon == 1:
        return ONE
    if lam == 0:
        return LogProb(math.log(epsilon))
    if math.isinf(lam):
        return LogProb(n * math.log(epsilon))
    # A e^{lambda} = 1 + eps expm1(lambda), exact for small lambda where log A ~ -lambda
    log_ratio = -math.log1p(epsilon * math.expm1(lam))
    log_a = -lam - log_ratio
    value = n * log_a + _log1mexp(n * log_ratio) - _log1mexp(-lam * n)
    return LogProb(value)


def polynomial_r1_closed_form(epsilon: float, n: int) -> LogProb:
    """(eps(1-eps) + n eps^2 + eps) / (n+1), the linear polynomial reranker."""
    _check_epsilon(epsilon)
    _check_n(n)
    return LogProb.from_linear((epsilon * (1.0 - epsilon) + n * epsilon ** 2 + epsilon) / (n + 1))


def polynomial_asymptote(epsilon: float, r: int) -> float:
    """Large-N limit eps^{r+1} of the degree-r polynomial reranker."""
    _check_epsilon(epsilon)
    if r < 1:
        raise InvalidArgumentError(f"r must be >= 1, got {r}")
    return epsilon ** (r + 1)


# ---------------------------------------------------------------------------
# Beta-coupled generator
# ---------------------------------------------------------------------------

def beta_binomial_logpmf(alpha: float, beta: float, n: int) -> np.ndarray:
    """log P(K = k), k = 0..n, for K ~ BetaBinomial(n, alpha, beta).

    Rising factorials are accumulated as running log sums instead of Gamma
    ratios, which keeps small alpha accurate.
    """
    _check_beta_params(alpha, beta)
    if isinstance(n, bool) or n < 0:
        raise InvalidArgumentError(f"n must be >= 0, got {n}")
    i = np.arange(n, dtype=float)
    log_rise_a = np.concatenate(([0.0], np.cumsum(np.log(alpha + i))))
    log_rise_b = np.concatenate(([0.0], np.cumsum(np.log(beta + i))))
    log_rise_ab = float(np.sum(np.log(alpha + beta + i)))
    k = np.arange(n + 1)
    return log_binomial_coefficients(n) + log_rise_a[k] + log_rise_b[n - k] - log_rise_ab


def beta_binomial_pmf(alpha: float, beta: float, n: int, k: int) -> float:
    if not 0 <= k <= n:
        raise InvalidArgumentError(f"k must lie in [0, {n}], got {k}")
    return float(np.exp(beta_binomial_logpmf(alpha, beta, n)[k]))


def p_err_perfect_beta_curve(alpha: float, beta: float, n_max: int) -> np.ndarray:
    """log P_err for n = 1..n_max: cumulative log of (alpha+i-1)/(alpha+beta+i-1)."""
    _check_beta_params(alpha, beta)
    _check_n(n_max)
    i = np.arange(n_max, dtype=float)
    return np.cumsum(np.log1p(-beta / (alpha + beta + i)))


def p_err_perfect_beta(alpha: float, beta: float, n: int) -> LogProb:
    """Perfect reranker under Beta coupling: prod_{i<n} (alpha+i)/(alpha+beta+i)."""
    return LogProb(float(p_err_perfect_beta_curve(alpha, beta, n)[-1]))


def p_err_generic_beta(alpha: float, beta: float, marginals: TopOneMarginals) -> LogProb:
    """sum_K BetaBinomial(K; n, alpha, beta) * suffix_mass(marginals, K)."""
    terms = beta_binomial_logpmf(alpha, beta, marginals.n) + _log_suffix(marginals)
    return LogProb(float(logsumexp(terms)))


def gautschi_bounds(alpha: float, beta: float, n: int) -> Tuple[float, float]:
    """Power-law bracket on p_err_perfect_beta for 0 < beta < 1.

    c (alpha+beta+n)^{-beta} < P(n) < c (alpha+beta+n-1)^{-beta},
    c = Gamma(alpha+beta) / Gamma(alpha).
    """
    if not 0.0 < beta < 1.0:
        raise InvalidArgumentError(f"the power-law bounds need 0 < beta < 1, got {beta}")
    _check_beta_params(alpha, beta)
    _check_n(n)
    log_c = float(gammaln(alpha + beta) - gammaln(alpha))
    low = math.exp(log_c - beta * math.log(alpha + beta + n))
    high = math.exp(log_c - beta * math.log(alpha + beta + n - 1))
    return low, high


def beta_from_mean(epsilon: float, alpha: float) -> float:
    """beta such that Beta(alpha, beta) has mean epsilon."""
    if not 0.0 < epsilon < 1.0:
        raise InvalidArgumentError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not alpha > 0:
        raise InvalidArgumentError(f"alpha must be positive, got {alpha}")
    return (1.0 / epsilon - 1.0) * alpha
