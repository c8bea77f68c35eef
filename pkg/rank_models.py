"""
Reranker models: top-1 marginal distributions and permutation utilities

A reranker is described only through the distribution of the oracle rank of
the hypothesis it puts on top (the vector eta).  The oracle ranking is always
the identity; callers relabel hypotheses to express any other ground truth.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Annotated, Dict, List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, field_validator

from utils import LOGGER_NAME, ConvergenceError, InvalidArgumentError, ResourceLimitError

logger = logging.getLogger(LOGGER_NAME)

# position -> oracle rank, a bijection on 1..N
Permutation = Tuple[int, ...]

MARGINAL_SUM_TOL = 1e-10
GAMMA_SOFTMAX_TOL = 1e-6
ENTMAX_SUM_TOL = 1e-12
ENTMAX_MAX_ITER = 200
BRUTE_FORCE_MAX_N = 8
POLYNOMIAL_MAX_N = 10**6
POLYNOMIAL_MAX_R = 8


# ---------------------------------------------------------------------------
# Reranker models
# ---------------------------------------------------------------------------

class SpecModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')


class PerfectReranker(SpecModel):
    kind: Literal['perfect'] = 'perfect'


class RandomReranker(SpecModel):
    kind: Literal['random'] = 'random'


class MallowsReranker(SpecModel):
    kind: Literal['mallows'] = 'mallows'
    lam: float = Field(ge=0, allow_inf_nan=False, description="Mallows scale lambda")

    @property
    def e_neg_lambda(self) -> float:
        return math.exp(-self.lam)


class ZipfMandelbrotReranker(SpecModel):
    kind: Literal['zipf'] = 'zipf'
    lam: float = Field(gt=0, allow_inf_nan=False, description="score scale lambda")
    gamma: float = Field(gt=0, le=1, description="entmax gamma; 1 recovers Mallows")

    @property
    def e_neg_lambda(self) -> float:
        return math.exp(-self.lam)


class PolynomialReranker(SpecModel):
    kind: Literal['poly'] = 'poly'
    r: int = Field(ge=1, description="eta_j proportional to (N-j+1)^r")


class ExplicitReranker(SpecModel):
    kind: Literal['explicit'] = 'explicit'
    marginals: Tuple[float, ...]

    @field_validator('marginals')
    @classmethod
    def _check_marginals(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if not v:
            raise ValueError("explicit marginals must be non-empty")
        if any(not math.isfinite(x) or x < 0 for x in v):
            raise ValueError("explicit marginals must be finite and non-negative")
        if abs(math.fsum(v) - 1.0) > MARGINAL_SUM_TOL:
            raise ValueError(f"explicit marginals sum to {math.fsum(v)!r}, not 1")
        return v


RerankerSpec = Annotated[
    Union[PerfectReranker, RandomReranker, MallowsReranker,
          ZipfMandelbrotReranker, PolynomialReranker, ExplicitReranker],
    Field(discriminator='kind'),
]
reranker_adapter: TypeAdapter = TypeAdapter(RerankerSpec)


def lambda_from_e_neg(e_neg_lambda: float) -> float:
    """Map the e^{-lambda} quality scale to lambda (0 -> inf, 1 -> 0)."""
    if not 0.0 <= e_neg_lambda <= 1.0:
        raise InvalidArgumentError(f"e^-lambda must lie in [0, 1], got {e_neg_lambda}")
    if e_neg_lambda == 0.0:
        return math.inf
    return -math.log(e_neg_lambda)


def e_neg_from_lambda(lam: float) -> float:
    return math.exp(-lam)


# ---------------------------------------------------------------------------
# Marginals
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TopOneMarginals:
    """eta[j-1] = probability that the reranker's pick has oracle rank j."""

    eta: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float)
        if eta.ndim != 1 or eta.size == 0:
            raise InvalidArgumentError("marginals must be a non-empty vector")
        if not np.all(np.isfinite(eta)) or np.any(eta < 0):
            raise InvalidArgumentError("marginals must be finite and non-negative")
        total = math.fsum(eta.tolist())
        if abs(total - 1.0) > MARGINAL_SUM_TOL:
            raise InvalidArgumentError(f"marginals sum to {total!r}, not 1")
        eta.setflags(write=False)
        object.__setattr__(self, 'eta', eta)

    @property
    def n(self) -> int:
        return int(self.eta.size)

    def __len__(self) -> int:
        return self.n

    @cached_property
    def suffix(self) -> np.ndarray:
        """suffix[k] = mass of the last k entries, for k = 0..N, summed from the tail."""
        out = np.concatenate(([0.0], np.cumsum(self.eta[::-1])))
        out = np.minimum(out, 1.0)
        out[-1] = 1.0
        out.setflags(write=False)
        return out


def suffix_mass(marginals: TopOneMarginals, k: int) -> float:
    """Probability that the pick is among the last k oracle ranks."""
    if not 0 <= k <= marginals.n:
        raise InvalidArgumentError(f"k must lie in [0, {marginals.n}], got {k}")
    return float(marginals.suffix[k])


def _check_n(n: int) -> None:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"n must be a positive integer, got {n!r}")


def _check_lambda(lam: float) -> None:
    if math.isnan(lam) or lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")


def perfect_top1_marginals(n: int) -> TopOneMarginals:
    _check_n(n)
    eta = np.zeros(n)
    eta[0] = 1.0
    return TopOneMarginals(eta)


def random_top1_marginals(n: int) -> TopOneMarginals:
    _check_n(n)
    return TopOneMarginals(np.full(n, 1.0 / n))


def mallows_partition(lam: float, n: int) -> float:
    """Z(lambda) = prod_j (1 - e^{-lambda j}) / (1 - e^{-lambda}); n! at lambda = 0."""
    _check_n(n)
    _check_lambda(lam)
    if lam == 0:
        return float(math.factorial(n))
    if math.isinf(lam):
        return 1.0
    j = np.arange(1, n + 1, dtype=float)
    return float(np.prod(np.expm1(-lam * j) / math.expm1(-lam)))


def mallows_top1_marginals(lam: float, n: int) -> TopOneMarginals:
    """Softmax of -lambda * (0, 1, ..., n-1), via the closed geometric normalizer."""
    _check_n(n)
    _check_lambda(lam)
    if lam == 0:
        return random_top1_marginals(n)
    if math.isinf(lam):
        return perfect_top1_marginals(n)
    # eta_1 = (1 - e^{-lambda}) / (1 - e^{-lambda n}); stays finite for any lambda*n
    head = math.expm1(-lam) / math.expm1(-lam * n)
    eta = head * np.exp(-lam * np.arange(n, dtype=float))
    return TopOneMarginals(eta)


def _enumerate_mallows(lam: float, n: int) -> Tuple[np.ndarray, float]:
    _check_n(n)
    _check_lambda(lam)
    if n > BRUTE_FORCE_MAX_N:
        raise ResourceLimitError(f"brute-force enumeration refused for n={n} > {BRUTE_FORCE_MAX_N}")
    identity = tuple(range(1, n + 1))
    weights: List[List[float]] = [[] for _ in range(n)]
    for perm in itertools.permutations(identity):
        w = math.exp(-lam * kendall_tau_distance(perm, identity))
        weights[perm[0] - 1].append(w)
    mass = np.array([math.fsum(ws) for ws in weights])
    return mass, math.fsum(mass.tolist())


def brute_force_mallows_marginals(lam: float, n: int) -> TopOneMarginals:
    """Top-1 marginals by summing exp(-lambda d(pi, id)) over all n! rankings."""
    mass, total = _enumerate_mallows(lam, n)
    return TopOneMarginals(mass / total)


def brute_force_mallows_partition(lam: float, n: int) -> float:
    return _enumerate_mallows(lam, n)[1]


def polynomial_top1_marginals(r: int, n: int) -> TopOneMarginals:
    """eta_j = (n-j+1)^r / sum_k k^r, accumulated in extended precision."""
    _check_n(n)
    if isinstance(r, bool) or not isinstance(r, (int, np.integer)) or r < 1:
        raise InvalidArgumentError(f"r must be a positive integer, got {r!r}")
    if n > POLYNOMIAL_MAX_N or r > POLYNOMIAL_MAX_R:
        raise InvalidArgumentError(
            f"polynomial marginals limited to n <= {POLYNOMIAL_MAX_N}, r <= {POLYNOMIAL_MAX_R}")
    w = np.arange(n, 0, -1, dtype=np.longdouble) ** int(r)
    return TopOneMarginals((w / w.sum()).astype(float))


# ---------------------------------------------------------------------------
# gamma-entmax and the Zipf-Mandelbrot reranker
# ---------------------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _entmax_rows(scores: np.ndarray, mask: np.ndarray, gamma: float) -> np.ndarray:
    """gamma-entmax (gamma < 1) of every masked row, thresholds solved jointly by bisection.

    Output entries are [1 + (gamma-1)(z - tau)]^{1/(gamma-1)}, written as
    exp(-p log1p((tau - z)/p)) with p = 1/(1-gamma).  Scores are shifted so the
    row maximum is 0; the row sum is strictly decreasing in tau, equals >= 1 at
    tau = 0 and <= 1 at tau = p(n^{1/p} - 1).
    """
    p = 1.0 / (1.0 - gamma)
    top = np.where(mask, scores, -np.inf).max(axis=1)
    z = np.where(mask, scores - top[:, None], 0.0)
    counts = mask.sum(axis=1).astype(float)

    def row_mass(tau: np.ndarray) -> np.ndarray:
        t = np.exp(-p * np.log1p((tau[:, None] - z) / p))
        return np.where(mask, t, 0.0)

    lo = np.zeros(z.shape[0])
    hi = p * np.expm1(np.log(counts) / p)
    f_lo = row_mass(lo).sum(axis=1)
    f_hi = row_mass(hi).sum(axis=1)
    for _ in range(64):
        need_lo = f_lo < 1.0
        need_hi = f_hi > 1.0
        if not (need_lo.any() or need_hi.any()):
            break
        # lo moves toward the domain edge -p, hi grows
        lo = np.where(need_lo, 0.5 * (lo - p), lo)
        hi = np.where(need_hi, 2.0 * hi + 1.0, hi)
        f_lo = row_mass(lo).sum(axis=1)
        f_hi = row_mass(hi).sum(axis=1)
    else:
        raise ConvergenceError("entmax threshold could not be bracketed")

    tau = 0.5 * (lo + hi)
    active = np.ones(z.shape[0], dtype=bool)
    iterations = 0
    for iterations in range(1, ENTMAX_MAX_ITER + 1):
        mid = 0.5 * (lo + hi)
        f_mid = row_mass(mid).sum(axis=1)
        tau = np.where(active, mid, tau)
        done = np.abs(f_mid - 1.0) <= ENTMAX_SUM_TOL
        above = f_mid > 1.0
        lo = np.where(active & above, mid, lo)
        hi = np.where(active & ~above, mid, hi)
        active &= ~done
        if not active.any():
            break
    if active.any():
        logger.debug(f"entmax bisection stopped after {iterations} iterations on {int(active.sum())} rows")

    out = row_mass(tau)
    return out / out.sum(axis=1, keepdims=True)


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma <= 1.0:
        raise InvalidArgumentError(f"gamma must lie in (0, 1], got {gamma}")


def entmax(scores: Sequence[float], gamma: float) -> np.ndarray:
    """gamma-entmax of a score vector; softmax when gamma is within 1e-6 of 1."""
    z = np.asarray(scores, dtype=float)
    if z.ndim != 1 or z.size == 0:
        raise InvalidArgumentError("scores must be a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("scores must be finite")
    _check_gamma(gamma)
    if abs(gamma - 1.0) < GAMMA_SOFTMAX_TOL:
        return _softmax(z)
    return _entmax_rows(z[None, :], np.ones((1, z.size), dtype=bool), gamma)[0]


def zipf_mandelbrot_marginals_grid(lam: float, gamma: float, ns: Sequence[int]) -> List[TopOneMarginals]:
    """Zipf-Mandelbrot marginals for several N at once.

    For gamma < 1 the result has the power-law form eta_j = b^{-p} (a + j)^{-p}
    with p = 1/(1-gamma), b = lambda/p and a = (p + tau)/lambda - 1, tau being
    the entmax threshold.
    """
    if not lam > 0 or math.isinf(lam):
        raise InvalidArgumentError(f"lambda must be a positive real, got {lam}")
    _check_gamma(gamma)
    ns = [int(n) for n in ns]
    for n in ns:
        _check_n(n)
    if abs(gamma - 1.0) < GAMMA_SOFTMAX_TOL:
        return [mallows_top1_marginals(lam, n) for n in ns]
    if not ns:
        return []
    width = max(ns)
    scores = np.tile(-lam * np.arange(width, dtype=float), (len(ns), 1))
    mask = np.arange(width)[None, :] < np.asarray(ns)[:, None]
    rows = _entmax_rows(scores, mask, gamma)
    return [TopOneMarginals(rows[i, :n]) for i, n in enumerate(ns)]


def zipf_mandelbrot_top1_marginals(lam: float, gamma: float, n: int) -> TopOneMarginals:
    """entmax(-lambda * (0, 1, ..., n-1), gamma): a heavy-tailed Mallows generalization."""
    return zipf_mandelbrot_marginals_grid(lam, gamma, [n])[0]


def marginals_for(spec: RerankerSpec, n: int) -> TopOneMarginals:
    """Top-1 marginals of a reranker spec at N = n."""
    if isinstance(spec, PerfectReranker):
        return perfect_top1_marginals(n)
    if isinstance(spec, RandomReranker):
        return random_top1_marginals(n)
    if isinstance(spec, MallowsReranker):
        return mallows_top1_marginals(spec.lam, n)
    if isinstance(spec, ZipfMandelbrotReranker):
        return zipf_mandelbrot_top1_marginals(spec.lam, spec.gamma, n)
    if isinstance(spec, PolynomialReranker):
        return polynomial_top1_marginals(spec.r, n)
    if isinstance(spec, ExplicitReranker):
        if n != len(spec.marginals):
            raise InvalidArgumentError(
                f"explicit marginals have length {len(spec.marginals)}, cannot evaluate at n={n}")
        return TopOneMarginals(np.asarray(spec.marginals, dtype=float))
    raise InvalidArgumentError(f"unknown reranker spec {spec!r}")


def marginals_for_grid(spec: RerankerSpec, ns: Sequence[int]) -> Dict[int, TopOneMarginals]:
    """marginals_for over a grid of N; Zipf-Mandelbrot rows are solved in one batch."""
    if isinstance(spec, ZipfMandelbrotReranker):
        rows = zipf_mandelbrot_marginals_grid(spec.lam, spec.gamma, ns)
        return {int(n): m for n, m in zip(ns, rows)}
    return {int(n): marginals_for(spec, int(n)) for n in ns}


# ---------------------------------------------------------------------------
# Permutations
# ---------------------------------------------------------------------------

def _as_permutation(p: Sequence[int], name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=np.int64)
    if arr.ndim != 1 or sorted(arr.tolist()) != list(range(1, arr.size + 1)):
        raise InvalidArgumentError(f"{name} is not a permutation of 1..{arr.size}")
    return arr


def kendall_tau_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Number of discordant pairs (adjacent transpositions turning a into b)."""
    if len(a) != len(b):
        raise InvalidArgumentError(f"permutation lengths differ: {len(a)} != {len(b)}")
    x = _as_permutation(a, 'a')
    y = _as_permutation(b, 'b')
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    return int(np.triu(dx * dy < 0, k=1).sum())
