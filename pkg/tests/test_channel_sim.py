import io
import itertools
import math
import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import chisquare

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from channel_sim import (
    CurvePoint,
    FailureCurve,
    SimConfig,
    curve_from_log_values,
    load_curve,
    metadata_path,
    read_curve_csv,
    sample_mallows_permutation,
    sample_mallows_permutations,
    sample_top1_index,
    sample_top1_indices,
    save_curve,
    simulate_curve,
    substream,
    wilson_interval,
    write_curve_csv,
)
from error_laws import (
    BetaGenerator,
    IndependentGenerator,
    p_err_generic_beta,
    p_err_mallows_indep,
    p_err_perfect_beta,
)
from rank_models import (
    MallowsReranker,
    PerfectReranker,
    RandomReranker,
    ZipfMandelbrotReranker,
    kendall_tau_distance,
    mallows_partition,
    mallows_top1_marginals,
    perfect_top1_marginals,
    random_top1_marginals,
    zipf_mandelbrot_top1_marginals,
)
from predict import evaluate_law
from utils import DatasetParseError, InvalidArgumentError, ResourceLimitError


def _within_sigma(observed: float, expected: float, trials: int, k: float = 5.0) -> bool:
    sigma = math.sqrt(max(expected * (1.0 - expected), 1e-12) / trials)
    return abs(observed - expected) <= k * sigma + 1e-9


def test_same_keys_same_draws():
    a = substream(7, 3, 0).random(5)
    b = substream(7, 3, 0).random(5)
    assert np.array_equal(a, b)


def test_keys_separate_streams():
    a = substream(7, 3, 0).random(5)
    b = substream(7, 3, 1).random(5)
    c = substream(8, 3, 0).random(5)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_negative_seed_accepted():
    assert substream(-1, 1).random() == substream(-1, 1).random()


def test_perfect_always_picks_rank_one():
    picks = sample_top1_indices(perfect_top1_marginals(10), substream(0), 1000)
    assert np.all(picks == 1)


def test_indices_in_range():
    m = zipf_mandelbrot_top1_marginals(0.5, 0.5, 12)
    picks = sample_top1_indices(m, substream(1), 5000)
    assert picks.min() >= 1
    assert picks.max() <= 12


@pytest.mark.parametrize("marginals", [
    mallows_top1_marginals(0.7, 6),
    zipf_mandelbrot_top1_marginals(1.0, 0.4, 6),
])
def test_frequencies_match_marginals(marginals):
    size = 40000
    picks = sample_top1_indices(marginals, substream(11), size)
    counts = np.bincount(picks, minlength=marginals.n + 1)[1:]
    for j in range(marginals.n):
        assert _within_sigma(counts[j] / size, float(marginals.eta[j]), size)


def test_zero_mass_ranks_never_drawn():
    m = zipf_mandelbrot_top1_marginals(5.0, 0.2, 30)
    picks = sample_top1_indices(m, substream(2), 20000)
    zero = set(np.flatnonzero(np.asarray(m.eta) == 0.0) + 1)
    assert zero
    assert not zero.intersection(set(picks.tolist()))


def test_single_draw():
    assert sample_top1_index(perfect_top1_marginals(3), substream(0)) == 1


def test_rows_are_permutations():
    perms = sample_mallows_permutations(0.8, 7, substream(3), 200)
    assert perms.shape == (200, 7)
    for row in perms:
        assert sorted(row.tolist()) == list(range(1, 8))


def test_infinite_lambda_is_identity():
    assert sample_mallows_permutation(math.inf, 5, substream(0)) == (1, 2, 3, 4, 5)


def test_top_item_follows_closed_form():
    lam, n, size = 0.6, 5, 40000
    perms = sample_mallows_permutations(lam, n, substream(4), size)
    eta = mallows_top1_marginals(lam, n).eta
    counts = np.bincount(perms[:, 0], minlength=n + 1)[1:]
    for j in range(n):
        assert _within_sigma(counts[j] / size, float(eta[j]), size)


def test_mean_distance_shrinks_with_lambda():
    def mean_distance(lam):
        perms = sample_mallows_permutations(lam, 6, substream(5), 2000)
        return np.mean([kendall_tau_distance(tuple(row), tuple(range(1, 7))) for row in perms])

    assert mean_distance(2.0) < mean_distance(0.5) < mean_distance(0.0)


def _permutation_counts(perms):
    counts = {}
    for row in perms:
        key = tuple(int(x) for x in row)
        counts[key] = counts.get(key, 0) + 1
    return counts


def test_uniform_top1_passes_chi_square():
    size = 1_000_000
    picks = sample_top1_indices(random_top1_marginals(4), substream(12), size)
    counts = np.bincount(picks, minlength=5)[1:]
    assert chisquare(counts).pvalue > 0.001


def test_permutation_pmf_matches_mallows_weights():
    lam, n, size = 1.0, 3, 100000
    counts = _permutation_counts(sample_mallows_permutations(lam, n, substream(13), size))
    z = mallows_partition(lam, n)
    identity = tuple(range(1, n + 1))
    for perm in itertools.permutations(identity):
        p = math.exp(-lam * kendall_tau_distance(perm, identity)) / z
        se = math.sqrt(p * (1.0 - p) / size)
        assert abs(counts.get(perm, 0) / size - p) <= 4 * se, perm


def test_lambda_zero_permutations_are_uniform():
    size = 60000
    counts = _permutation_counts(sample_mallows_permutations(0.0, 3, substream(14), size))
    observed = [counts.get(perm, 0) for perm in itertools.permutations((1, 2, 3))]
    assert sum(observed) == size
    assert chisquare(observed).pvalue > 0.001


def test_large_lambda_is_almost_always_identity():
    size = 20000
    perms = sample_mallows_permutations(20.0, 5, substream(15), size)
    identity = np.arange(1, 6)
    assert np.mean(np.all(perms == identity, axis=1)) >= 0.999


def test_permutation_guards():
    with pytest.raises(ResourceLimitError):
        sample_mallows_permutations(1.0, 65, substream(0), 1)
    with pytest.raises(InvalidArgumentError):
        sample_mallows_permutations(-1.0, 3, substream(0), 1)


def test_wilson_zero_failures():
    low, high = wilson_interval(0, 10, 0.95)
    assert low == 0.0
    assert high == pytest.approx(0.2775, abs=1e-4)


def test_wilson_symmetry():
    low, high = wilson_interval(3, 10, 0.99)
    low2, high2 = wilson_interval(7, 10, 0.99)
    assert low == pytest.approx(1.0 - high2)
    assert high == pytest.approx(1.0 - low2)


def test_wilson_contains_rate():
    for f in range(0, 21):
        low, high = wilson_interval(f, 20, 0.99)
        assert 0.0 <= low <= f / 20 <= high <= 1.0


def test_wilson_no_trials():
    assert wilson_interval(0, 0, 0.99) == (0.0, 1.0)


def test_wilson_bad_level():
    with pytest.raises(InvalidArgumentError):
        wilson_interval(1, 2, 1.0)


def test_mallows_matches_closed_form():
    config = SimConfig(generator=IndependentGenerator(epsilon=0.3), reranker=MallowsReranker(lam=1.0),
                       n_grid=(1, 2, 4, 8), trials=20000, seed=1)
    curve = simulate_curve(config)
    assert curve.ns.tolist() == [1, 2, 4, 8]
    for p in curve.points:
        expected = p_err_mallows_indep(0.3, 1.0, p.n).linear
        assert _within_sigma(p.failure_rate, expected, p.trials)
        assert p.ci_low <= p.failure_rate <= p.ci_high


def test_beta_generator_matches_laws():
    gen = BetaGenerator(alpha=0.5, beta=0.5)
    config = SimConfig(generator=gen, reranker=PerfectReranker(), n_grid=(1, 5, 20), trials=20000, seed=2)
    for p in simulate_curve(config).points:
        assert _within_sigma(p.failure_rate, p_err_perfect_beta(0.5, 0.5, p.n).linear, p.trials)

    zipf = ZipfMandelbrotReranker(lam=1.0, gamma=0.5)
    config = SimConfig(generator=gen, reranker=zipf, n_grid=(4, 16), trials=20000, seed=3)
    for p in simulate_curve(config).points:
        expected = p_err_generic_beta(0.5, 0.5, zipf_mandelbrot_top1_marginals(1.0, 0.5, p.n)).linear
        assert _within_sigma(p.failure_rate, expected, p.trials)


def test_degenerate_generators():
    never = simulate_curve(SimConfig(generator=IndependentGenerator(epsilon=0.0), reranker=RandomReranker(),
                                     n_grid=(1, 3), trials=500))
    always = simulate_curve(SimConfig(generator=IndependentGenerator(epsilon=1.0), reranker=PerfectReranker(),
                                      n_grid=(1, 3), trials=500))
    assert never.rates.tolist() == [0.0, 0.0]
    assert always.rates.tolist() == [1.0, 1.0]


def test_identical_across_threads_and_runs():
    base = dict(generator=IndependentGenerator(epsilon=0.4), reranker=MallowsReranker(lam=0.5),
                n_grid=(1, 2, 3, 10), trials=5000, seed=9, chunk_size=700)
    one = simulate_curve(SimConfig(**base))
    again = simulate_curve(SimConfig(**base))
    many = simulate_curve(SimConfig(**base, threads=4))
    assert one.rates.tolist() == again.rates.tolist() == many.rates.tolist()


def test_seed_changes_draws():
    base = dict(generator=IndependentGenerator(epsilon=0.5), reranker=RandomReranker(),
                n_grid=(5,), trials=5000)
    a = simulate_curve(SimConfig(**base, seed=1)).rates
    b = simulate_curve(SimConfig(**base, seed=2)).rates
    assert a.tolist() != b.tolist()


def test_permutation_sampler_agrees():
    config = SimConfig(generator=IndependentGenerator(epsilon=0.3), reranker=MallowsReranker(lam=0.8),
                       n_grid=(2, 6), trials=20000, seed=4, sampler='permutation')
    curve = simulate_curve(config)
    assert curve.metadata['sampler'] == 'permutation'
    for p in curve.points:
        assert _within_sigma(p.failure_rate, p_err_mallows_indep(0.3, 0.8, p.n).linear, p.trials)


def test_simulation_metadata():
    curve = simulate_curve(SimConfig(generator=IndependentGenerator(epsilon=0.2), reranker=PerfectReranker(),
                                     n_grid=(1,), trials=10, seed=5))
    assert curve.metadata['source'] == 'simulation'
    assert curve.metadata['seed'] == 5
    assert curve.metadata['reranker'] == {'kind': 'perfect'}


def test_work_budget():
    config = SimConfig(generator=IndependentGenerator(epsilon=0.2), reranker=PerfectReranker(),
                       n_grid=(1000,), trials=10, work_budget=100)
    with pytest.raises(ResourceLimitError):
        simulate_curve(config)


def test_config_validation():
    gen = IndependentGenerator(epsilon=0.2)
    with pytest.raises(ValidationError):
        SimConfig(generator=gen, reranker=PerfectReranker(), n_grid=(3, 2), trials=1)
    with pytest.raises(ValidationError):
        SimConfig(generator=gen, reranker=PerfectReranker(), n_grid=(), trials=1)
    with pytest.raises(ValidationError):
        SimConfig(generator=gen, reranker=PerfectReranker(), n_grid=(1,), trials=0)
    with pytest.raises(ValidationError):
        SimConfig(generator=gen, reranker=ZipfMandelbrotReranker(lam=1.0, gamma=0.5),
                  n_grid=(2,), trials=1, sampler='permutation')
    with pytest.raises(ValidationError):
        SimConfig(generator=gen, reranker=MallowsReranker(lam=1.0),
                  n_grid=(100,), trials=1, sampler='permutation')


@pytest.mark.slow
def test_large_mallows_run():
    config = SimConfig(generator=IndependentGenerator(epsilon=0.1), reranker=MallowsReranker(lam=2.0),
                       n_grid=(1, 10, 100), trials=1_000_000, seed=6, threads=4)
    for p in simulate_curve(config).points:
        assert _within_sigma(p.failure_rate, p_err_mallows_indep(0.1, 2.0, p.n).linear, p.trials, k=4.0)


@pytest.mark.slow
def test_wilson_intervals_cover_analytic_laws():
    half = -math.log(0.5)
    cases = [
        (IndependentGenerator(epsilon=0.3), PerfectReranker()),
        (IndependentGenerator(epsilon=0.3), MallowsReranker(lam=half)),
        (IndependentGenerator(epsilon=0.3), ZipfMandelbrotReranker(lam=half, gamma=0.5)),
        (BetaGenerator(alpha=1.0, beta=1.0), PerfectReranker()),
    ]
    grid = (1, 3, 5, 10, 20)
    covered = total = 0
    for seed, (gen, rer) in enumerate(cases):
        config = SimConfig(generator=gen, reranker=rer, n_grid=grid, trials=1_000_000, seed=seed,
                           ci_level=0.99, threads=4)
        expected = evaluate_law(gen, rer, grid).rates
        for p, value in zip(simulate_curve(config).points, expected):
            covered += int(p.ci_low <= value <= p.ci_high)
            total += 1
    assert covered >= 0.95 * total


def test_curve_csv_round_trip():
    curve = FailureCurve(points=[
        CurvePoint(n=1, failure_rate=0.1, trials=100, ci_low=0.05, ci_high=0.2),
        CurvePoint(n=4, failure_rate=1 / 3, trials=300, ci_low=0.25, ci_high=0.4),
    ])
    buf = io.StringIO()
    write_curve_csv(curve, buf)
    back = read_curve_csv(io.StringIO(buf.getvalue()))
    assert back.points == curve.points


def test_curve_csv_header():
    buf = io.StringIO()
    write_curve_csv(curve_from_log_values([1], [math.log(0.5)]), buf)
    assert buf.getvalue().splitlines()[0] == 'n,failure_rate,trials,ci_low,ci_high,log10_failure_rate'


def test_underflowed_rate_keeps_log():
    curve = curve_from_log_values([1, 2], [-1.0, -800.0])
    assert curve.points[1].failure_rate == 0.0
    buf = io.StringIO()
    write_curve_csv(curve, buf)
    back = read_curve_csv(io.StringIO(buf.getvalue()))
    assert back.points[1].log_value == pytest.approx(-800.0, rel=1e-12)
    assert back.points[0].log_value == pytest.approx(-1.0, rel=1e-12)


def test_missing_column():
    with pytest.raises(DatasetParseError):
        read_curve_csv(io.StringIO("n,failure_rate\n1,0.5\n"))


def test_bad_cell_reports_line():
    text = "n,failure_rate,trials,ci_low,ci_high\n1,0.5,10,,\n2,abc,10,,\n"
    with pytest.raises(DatasetParseError) as exc:
        read_curve_csv(io.StringIO(text))
    assert exc.value.line_number == 3


def test_decreasing_n_rejected():
    text = "n,failure_rate,trials,ci_low,ci_high\n2,0.5,10,,\n1,0.5,10,,\n"
    with pytest.raises(DatasetParseError):
        read_curve_csv(io.StringIO(text))


def test_save_and_load_with_metadata(tmp_path):
    path = str(tmp_path / "curve.csv")
    curve = curve_from_log_values([1, 2], [math.log(0.5), math.log(0.25)], metadata={'source': 'analytic'})
    save_curve(curve, path)
    assert os.path.exists(metadata_path(path))
    back = load_curve(path)
    assert back.metadata == {'source': 'analytic'}
    assert back.rates.tolist() == pytest.approx([0.5, 0.25])


def test_save_to_stdout(capsys):
    save_curve(curve_from_log_values([3], [math.log(0.125)]), '-')
    fields = capsys.readouterr().out.splitlines()[1].split(',')
    assert fields[0] == '3'
    assert float(fields[1]) == pytest.approx(0.125)
    assert fields[2:5] == ['0', '', '']
    assert float(fields[5]) == pytest.approx(math.log10(0.125))
