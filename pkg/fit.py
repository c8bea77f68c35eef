"""
Two-stage least-squares fitting of reranking laws

Stage 1 fits the Beta generator (alpha, beta) to the perfect-reranker curve.
Stage 2 freezes (alpha, beta) and fits a Zipf-Mandelbrot reranker
(gamma, e^-lambda) to an imperfect-reranker curve.  Residuals are differences
of natural-log failure rates.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.optimize
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, logit, logsumexp

from channel_sim import FailureCurve
from error_laws import BetaGenerator, beta_binomial_logpmf, p_err_perfect_beta_curve
from rank_models import (
    GAMMA_SOFTMAX_TOL, MallowsReranker, PerfectReranker, RerankerSpec, ZipfMandelbrotReranker,
    lambda_from_e_neg, zipf_mandelbrot_marginals_grid,
)
from utils import LOGGER_NAME, FitError, InvalidArgumentError, RerankingLawError, UnderdeterminedFitError

logger = logging.getLogger(LOGGER_NAME)

ResidualFn = Callable[[np.ndarray], np.ndarray]

BAD_RESIDUAL = 1e10
BOUNDARY_TOL = 1e-6
SNAP_FRACTION = 1e-3

STAGE1_NAMES = ('alpha', 'beta')
STAGE1_GRID = [(a, b) for a in (0.05, 0.1, 0.5, 1.0) for b in (0.1, 0.3, 0.5, 1.0)]
STAGE1_LOWER = (1e-4, 1e-4)
STAGE1_UPPER = (1e2, 1e2)

STAGE2_NAMES = ('gamma', 'e_neg_lambda')
STAGE2_GRID = [(g, e) for g in (0.01, 0.2, 0.5, 0.99) for e in (0.001, 0.01, 0.1, 0.5)]
STAGE2_LOWER = (1e-3, 1e-6)
STAGE2_UPPER = (1.0, 1.0 - 1e-6)


# ---------------------------------------------------------------------------
# Bounded Levenberg-Marquardt
# ---------------------------------------------------------------------------

class _BoxMap:
    """Smooth map between unconstrained internal and bounded external parameters."""

    def __init__(self, lower: Sequence[float], upper: Sequence[float]):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise InvalidArgumentError("bounds must satisfy lower < upper elementwise")
        self.has_lo = np.isfinite(self.lower)
        self.has_hi = np.isfinite(self.upper)

    def to_external(self, u: np.ndarray) -> np.ndarray:
        x = np.array(u, dtype=float)
        both = self.has_lo & self.has_hi
        lo_only = self.has_lo & ~self.has_hi
        hi_only = ~self.has_lo & self.has_hi
        x[both] = self.lower[both] + (self.upper[both] - self.lower[both]) * expit(u[both])
        x[lo_only] = self.lower[lo_only] + np.exp(u[lo_only])
        x[hi_only] = self.upper[hi_only] - np.exp(u[hi_only])
        return x

    def to_internal(self, x: np.ndarray) -> np.ndarray:
        u = np.array(x, dtype=float)
        for i in range(u.size):
            lo, hi = self.lower[i], self.upper[i]
            if self.has_lo[i] and self.has_hi[i]:
                # starting points on a bound are nudged inside
                frac = np.clip((x[i] - lo) / (hi - lo), 1e-9, 1 - 1e-9)
                u[i] = logit(frac)
            elif self.has_lo[i]:
                u[i] = math.log(max(x[i] - lo, 1e-12))
            elif self.has_hi[i]:
                u[i] = math.log(max(hi - x[i], 1e-12))
        return u


@dataclass(frozen=True)
class LeastSquaresResult:
    solution: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int
    message: str = ''


def _norm(fn: ResidualFn, x: np.ndarray) -> float:
    try:
        r = np.asarray(fn(x), dtype=float)
    except RerankingLawError:
        return math.inf
    return float(np.linalg.norm(r)) if np.all(np.isfinite(r)) else math.inf


def least_squares(residual_fn: ResidualFn, initial: Sequence[float], lower: Sequence[float],
                  upper: Sequence[float], max_iterations: int = 500) -> LeastSquaresResult:
    """Minimize sum(residual_fn(x)**2) subject to lower <= x <= upper.

    Levenberg-Marquardt with forward-difference Jacobians runs on internal
    parameters (logit for two-sided bounds, log for one-sided).  Coordinates
    that finish close to a bound are snapped onto it when that does not
    increase the residual norm.
    """
    box = _BoxMap(lower, upper)
    x0 = np.asarray(initial, dtype=float)
    if x0.shape != box.lower.shape:
        raise InvalidArgumentError("initial point and bounds have different lengths")
    if np.any(x0 < box.lower) or np.any(x0 > box.upper):
        raise InvalidArgumentError(f"initial point {x0.tolist()} lies outside the bounds")

    r0 = np.asarray(residual_fn(x0), dtype=float)
    if not np.all(np.isfinite(r0)):
        raise FitError(f"residuals are not finite at the initial point {x0.tolist()}")

    def internal(u: np.ndarray) -> np.ndarray:
        try:
            r = np.asarray(residual_fn(box.to_external(u)), dtype=float)
        except RerankingLawError:
            return np.full(r0.shape, BAD_RESIDUAL)
        return np.where(np.isfinite(r), r, BAD_RESIDUAL)

    k = x0.size
    res = scipy.optimize.least_squares(
        internal, box.to_internal(x0), method='lm', xtol=1e-10, ftol=1e-12, gtol=1e-12,
        diff_step=1e-7, max_nfev=max_iterations * (k + 1),
    )
    x = box.to_external(res.x)
    best = _norm(residual_fn, x)

    span = box.upper - box.lower
    for i in range(k):
        if not (box.has_lo[i] and box.has_hi[i]):
            continue
        frac = (x[i] - box.lower[i]) / span[i]
        for bound, near in ((box.lower[i], frac < SNAP_FRACTION), (box.upper[i], frac > 1 - SNAP_FRACTION)):
            if not near:
                continue
            trial = x.copy()
            trial[i] = bound
            norm = _norm(residual_fn, trial)
            if norm <= best:
                x, best = trial, norm

    return LeastSquaresResult(solution=x, residual_norm=best, converged=bool(res.status > 0),
                              iterations=int(res.nfev), message=str(res.message))


@dataclass(frozen=True)
class StartResult:
    index: int
    initial: Tuple[float, ...]
    solution: Optional[np.ndarray]
    residual_norm: float
    converged: bool
    iterations: int
    error: Optional[str] = None


def run_multistart(residual_fn: ResidualFn, grid: Sequence[Sequence[float]], lower: Sequence[float],
                   upper: Sequence[float], max_iterations: int = 500, threads: int = 1) -> List[StartResult]:
    """least_squares from every grid point, results in grid order."""

    def one(item: Tuple[int, Sequence[float]]) -> StartResult:
        index, start = item
        try:
            r = least_squares(residual_fn, start, lower, upper, max_iterations=max_iterations)
        except FitError as e:
            return StartResult(index, tuple(start), None, math.inf, False, 0, str(e))
        return StartResult(index, tuple(start), r.solution, r.residual_norm, r.converged, r.iterations)

    items = list(enumerate(grid))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, items))
    return [one(item) for item in items]


def best_start(results: Sequence[StartResult]) -> StartResult:
    ok = [r for r in results if r.solution is not None]
    if not ok:
        raise FitError(f"every multistart failed; first error: {results[0].error if results else 'no starts'}")
    return min(ok, key=lambda r: (r.residual_norm, r.index))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class StageDiagnostics(BaseModel):
    residual_norm: float = Field(default=0.0, ge=0)
    iterations: int = 0
    converged: bool = False
    n_points_used: int = 0
    n_points_dropped: int = 0
    boundary_hits: List[str] = Field(default_factory=list)
    multistart_index: Optional[int] = None
    ran: bool = True


class LawParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(gt=0)
    beta: float = Field(gt=0)
    gamma: float = Field(gt=0, le=1)
    e_neg_lambda: float = Field(ge=0, lt=1)

    def to_specs(self) -> Tuple[BetaGenerator, RerankerSpec]:
        """Generator and reranker specs; e^-lambda = 0 is the perfect reranker, gamma = 1 is Mallows."""
        generator = BetaGenerator(alpha=self.alpha, beta=self.beta)
        if self.e_neg_lambda == 0:
            return generator, PerfectReranker()
        lam = lambda_from_e_neg(self.e_neg_lambda)
        if abs(self.gamma - 1.0) < GAMMA_SOFTMAX_TOL:
            return generator, MallowsReranker(lam=lam)
        return generator, ZipfMandelbrotReranker(lam=lam, gamma=self.gamma)


class FitReport(BaseModel):
    params: LawParams
    stage1: StageDiagnostics
    stage2: StageDiagnostics
    multistart_best_index: int
    holdout: Optional[Dict[str, float]] = None

    def to_json_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = dict(self.params.model_dump())
        out['stage1'] = self.stage1.model_dump()
        out['stage2'] = self.stage2.model_dump()
        out['multistart_best_index'] = self.multistart_best_index
        if self.holdout is not None:
            out['holdout'] = self.holdout
        return out

    @classmethod
    def from_json_dict(cls, data: Dict[str, Any]) -> 'FitReport':
        params = LawParams(**{k: data[k] for k in ('alpha', 'beta', 'gamma', 'e_neg_lambda')})
        return cls(params=params, stage1=StageDiagnostics(**data.get('stage1', {})),
                   stage2=StageDiagnostics(**data.get('stage2', {'ran': False})),
                   multistart_best_index=data.get('multistart_best_index', 0),
                   holdout=data.get('holdout'))


# ---------------------------------------------------------------------------
# Stage objectives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Points:
    ns: np.ndarray
    log_rates: np.ndarray
    weights: np.ndarray
    dropped: int


def _usable_points(curve: FailureCurve, weighted: bool) -> _Points:
    logs = curve.log_rates
    keep = np.isfinite(logs)
    dropped = int((~keep).sum())
    if keep.sum() < 2:
        raise UnderdeterminedFitError(
            f"need at least 2 curve points with failure_rate > 0, got {int(keep.sum())}")
    trials = curve.trials[keep]
    weights = np.sqrt(trials.astype(float)) if weighted and np.all(trials > 0) else np.ones(int(keep.sum()))
    if dropped:
        logger.warning(f"Dropped {dropped} zero-failure points from the fit")
    return _Points(ns=curve.ns[keep], log_rates=logs[keep], weights=weights, dropped=dropped)


def stage1_residual_fn(ns: np.ndarray, log_rates: np.ndarray,
                       weights: Optional[np.ndarray] = None) -> ResidualFn:
    """Residuals log P_perfect-beta(alpha, beta; n_i) - log f_i."""
    ns = np.asarray(ns, dtype=int)
    w = np.ones(ns.size) if weights is None else np.asarray(weights, dtype=float)
    n_max = int(ns.max())

    def fn(x: np.ndarray) -> np.ndarray:
        curve = p_err_perfect_beta_curve(float(x[0]), float(x[1]), n_max)
        return w * (curve[ns - 1] - log_rates)

    return fn


def law_log_curve(alpha: float, beta: float, gamma: float, e_neg_lambda: float,
                  ns: Sequence[int]) -> np.ndarray:
    """log P_err of the Beta generator with a Zipf-Mandelbrot reranker at each n."""
    ns = [int(n) for n in ns]
    logpmfs = {n: beta_binomial_logpmf(alpha, beta, n) for n in ns}
    return _zipf_beta_logs(logpmfs, gamma, e_neg_lambda, ns)


def _zipf_beta_logs(logpmfs: Dict[int, np.ndarray], gamma: float, e_neg_lambda: float,
                    ns: Sequence[int]) -> np.ndarray:
    if e_neg_lambda == 0:
        return np.array([logpmfs[n][n] for n in ns])
    marginals = zipf_mandelbrot_marginals_grid(lambda_from_e_neg(e_neg_lambda), gamma, ns)
    out = np.empty(len(ns))
    with np.errstate(divide='ignore'):
        for i, (n, m) in enumerate(zip(ns, marginals)):
            out[i] = logsumexp(logpmfs[n] + np.log(m.suffix))
    return out


def stage2_residual_fn(ns: np.ndarray, log_rates: np.ndarray, alpha: float, beta: float,
                       weights: Optional[np.ndarray] = None) -> ResidualFn:
    """Residuals of the Beta/Zipf-Mandelbrot law over (gamma, e^-lambda), Beta-binomial terms cached."""
    ns_list = [int(n) for n in ns]
    w = np.ones(len(ns_list)) if weights is None else np.asarray(weights, dtype=float)
    logpmfs = {n: beta_binomial_logpmf(alpha, beta, n) for n in ns_list}

    def fn(x: np.ndarray) -> np.ndarray:
        return w * (_zipf_beta_logs(logpmfs, float(x[0]), float(x[1]), ns_list) - log_rates)

    return fn


def _boundary_hits(names: Sequence[str], x: np.ndarray, lower: Sequence[float], upper: Sequence[float]) -> List[str]:
    hits = []
    for name, v, lo, hi in zip(names, x, lower, upper):
        if abs(v - lo) <= BOUNDARY_TOL * max(1.0, abs(lo)) or abs(v - hi) <= BOUNDARY_TOL * max(1.0, abs(hi)):
            hits.append(name)
    return hits


def _run_stage(label: str, fn: ResidualFn, points: _Points, names: Sequence[str], grid, lower, upper,
               max_iterations: int, threads: int) -> Tuple[np.ndarray, StageDiagnostics]:
    results = run_multistart(fn, grid, lower, upper, max_iterations=max_iterations, threads=threads)
    best = best_start(results)
    assert best.solution is not None
    hits = _boundary_hits(names, best.solution, lower, upper)
    if hits:
        logger.warning(f"{label}: parameters {hits} ended on a bound")
    logger.info(f"{label}: {dict(zip(names, best.solution.tolist()))} "
                f"residual={best.residual_norm:.3g} from start {best.index}")
    return best.solution, StageDiagnostics(
        residual_norm=best.residual_norm, iterations=best.iterations, converged=best.converged,
        n_points_used=int(points.ns.size), n_points_dropped=points.dropped,
        boundary_hits=hits, multistart_index=best.index,
    )


def fit_stage1(oracle_curve: FailureCurve, weighted: bool = False, max_iterations: int = 500,
               threads: int = 1) -> Tuple[float, float, StageDiagnostics]:
    """Fit (alpha, beta) to the perfect-reranker curve."""
    points = _usable_points(oracle_curve, weighted)
    fn = stage1_residual_fn(points.ns, points.log_rates, points.weights)
    x, diag = _run_stage('stage 1', fn, points, STAGE1_NAMES, STAGE1_GRID, STAGE1_LOWER, STAGE1_UPPER,
                         max_iterations, threads)
    return float(x[0]), float(x[1]), diag


def fit_stage2(imperfect_curve: FailureCurve, alpha: float, beta: float, weighted: bool = False,
               max_iterations: int = 500, threads: int = 1) -> Tuple[float, float, StageDiagnostics]:
    """Fit (gamma, e^-lambda) with (alpha, beta) frozen."""
    BetaGenerator(alpha=alpha, beta=beta)
    points = _usable_points(imperfect_curve, weighted)
    fn = stage2_residual_fn(points.ns, points.log_rates, alpha, beta, points.weights)
    x, diag = _run_stage('stage 2', fn, points, STAGE2_NAMES, STAGE2_GRID, STAGE2_LOWER, STAGE2_UPPER,
                         max_iterations, threads)
    return float(x[0]), float(x[1]), diag


def fit_law(oracle_curve: FailureCurve, imperfect_curve: Optional[FailureCurve] = None,
            weighted: bool = False, max_iterations: int = 500, threads: int = 1) -> FitReport:
    """Stage 1 on the oracle curve, then stage 2 on the imperfect curve when given."""
    alpha, beta, stage1 = fit_stage1(oracle_curve, weighted, max_iterations, threads)
    if imperfect_curve is None:
        params = LawParams(alpha=alpha, beta=beta, gamma=1.0, e_neg_lambda=0.0)
        return FitReport(params=params, stage1=stage1, stage2=StageDiagnostics(ran=False),
                         multistart_best_index=stage1.multistart_index or 0)
    gamma, e_neg, stage2 = fit_stage2(imperfect_curve, alpha, beta, weighted, max_iterations, threads)
    params = LawParams(alpha=alpha, beta=beta, gamma=gamma, e_neg_lambda=e_neg)
    return FitReport(params=params, stage1=stage1, stage2=stage2,
                     multistart_best_index=stage2.multistart_index or 0)


def holdout_residuals(report: FitReport, oracle_curve: Optional[FailureCurve] = None,
                      imperfect_curve: Optional[FailureCurve] = None) -> Dict[str, float]:
    """Unweighted log-residual norms of the fitted law on held-out curves."""
    p = report.params
    out: Dict[str, float] = {}
    if oracle_curve is not None:
        pts = _usable_points(oracle_curve, weighted=False)
        out['oracle_residual_norm'] = float(np.linalg.norm(
            stage1_residual_fn(pts.ns, pts.log_rates)(np.array([p.alpha, p.beta]))))
    if imperfect_curve is not None:
        pts = _usable_points(imperfect_curve, weighted=False)
        fn = stage2_residual_fn(pts.ns, pts.log_rates, p.alpha, p.beta)
        out['imperfect_residual_norm'] = float(np.linalg.norm(fn(np.array([p.gamma, p.e_neg_lambda]))))
    return out
