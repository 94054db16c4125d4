"""
End-to-end reproductions of the benchmark experiments

All tests are marked slow; run them with `pytest -m slow`.
"""

import math

import numpy as np
import pytest

from src.core import posttest
from src.core.hierarchy import TadCall, call_tads_hierarchical, match_call_sets
from src.core.lpopt import (CandidateGrid, LpSolution, ModelParams, ObjectiveCoefficients, alpha_hat,
                            alternate_maximize, log_likelihood, objective_coefficients, saturation_curve,
                            solve_interval_lp)
from src.data.contact_data import BinaryAdjacency, ContactMatrix, CovariateVector, IntervalPrefixSums
from src.sim.simulate import (DEFAULT_R_VALUES, DecaySpec, boundary_covariates, chromosome_decay_spec,
                              is_contiguous, nested_decay_spec, planted_block_spec, run_snr_sweep,
                              sample_block_adjacency, sample_decay_matrix, selection_to_labels, snr_sweep_spec,
                              spectral_cluster, three_tad_spec)
from src.utils.sweep_tracker import SweepTracker

pytestmark = pytest.mark.slow


def peaks_at(n: int, positions) -> CovariateVector:
    peaks = np.zeros(n, dtype=np.int8)
    peaks[list(positions)] = 1
    return CovariateVector(peaks)


def best_disjoint_total(values, grid: CandidateGrid, K: int) -> float:
    intervals = grid.intervals
    best = 0.0

    def search(first: int, last_end: int, k: int, total: float) -> None:
        nonlocal best
        best = max(best, total)
        if k == K:
            return
        for i in range(first, len(intervals)):
            a, b = intervals[i]
            if a > last_end:
                search(i + 1, b, k + 1, total + values[i])

    search(0, -1, 0, 0.0)
    return best


def test_lp_is_integral_and_optimal_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        n = int(rng.integers(6, 31))
        count = int(rng.integers(2, min(11, n) + 1))
        grid = CandidateGrid.from_covariates(peaks_at(n, np.sort(rng.choice(n, size=count, replace=False))))
        assert len(grid) <= 60
        values = rng.normal(0.0, 1.0, size=len(grid))
        K = int(rng.integers(1, 6))
        expected = best_disjoint_total(values, grid, K)
        for method in ("dp", "linprog"):
            solution = solve_interval_lp(ObjectiveCoefficients(values), grid, K, method=method)
            assert set(np.unique(solution.pi)) <= {0.0, 1.0}
            assert len(solution.selected) <= K
            assert solution.objective_value == pytest.approx(expected, abs=1e-9 if method == "dp" else 1e-7)


def test_saturation_at_seven():
    spec = three_tad_spec(seed=4)
    curve = saturation_curve(sample_block_adjacency(spec), boundary_covariates(spec), range(1, 31))
    counts = [count for _, count in curve]
    assert counts == sorted(counts)
    assert all(count == 7 for K, count in curve if K >= 7)


def test_beta_recovery_improves_with_n():
    medians = []
    for n in (120, 240, 480):
        errors = []
        for seed in range(50):
            spec = planted_block_spec(n, alpha=0.3, beta=0.05, seed=seed)
            result = alternate_maximize(sample_block_adjacency(spec), boundary_covariates(spec), K=30)
            errors.append(abs(result.params.beta - 0.05))
        median = float(np.median(errors))
        assert median < 3 / math.sqrt(n)
        medians.append(median)
    assert medians[0] > medians[1] > medians[2]


def test_beta_recovery_with_a_site_at_every_bin():
    for n in (120, 240):
        errors = []
        for seed in range(20):
            spec = planted_block_spec(n, alpha=0.3, beta=0.05, seed=seed)
            result = alternate_maximize(sample_block_adjacency(spec), CovariateVector.all_ones(n), K=30)
            assert (0, n - 1) not in result.solution.selected
            errors.append(abs(result.params.beta - 0.05))
        assert float(np.median(errors)) < 3 / math.sqrt(n)


def test_sweep_with_a_site_at_every_bin():
    tracker = SweepTracker()
    run_snr_sweep((1.0, 10.0), range(10), K=5, threads=4, tracker=tracker, sites="all")
    summary = tracker.summary().pivot(index="r", columns="method", values="mean").sort_index()
    assert summary.loc[10.0, "lp-opt"] > 0.9
    assert summary.loc[1.0, "lp-opt"] < summary.loc[10.0, "lp-opt"]


def test_lp_beats_spectral_across_signal_ratios():
    tracker = SweepTracker()
    run_snr_sweep(DEFAULT_R_VALUES, range(30), K=5, threads=4, tracker=tracker)
    summary = tracker.summary().pivot(index="r", columns="method", values="mean").sort_index()

    largest = summary.iloc[-1]
    assert largest["lp-opt"] > 0.9
    assert largest["spectral"] > 0.9

    reliable = summary[summary["lp-opt"] >= 0.8]
    assert not reliable.empty
    first = reliable.iloc[0]
    assert first["lp-opt"] - first["spectral"] >= 0.1


def test_lp_selections_are_contiguous():
    broken = 0
    for seed in range(30):
        for r in (1.0, 1.5, 2.0):
            spec = snr_sweep_spec(r, seed=seed)
            A = sample_block_adjacency(spec)
            selection = alternate_maximize(A, boundary_covariates(spec), K=5).solution
            labels = selection_to_labels(selection.selected, spec.n)
            assert is_contiguous(labels, background=len(selection.selected))
            if r == 1.5 and not is_contiguous(spectral_cluster(A, 5, seed=seed)):
                broken += 1
    assert broken >= 15


def test_post_test_calibration():
    exact = posttest.wilcoxon_rank_sum([5, 4, 3], [2, 1, 0])
    assert exact.pvalue == pytest.approx(0.05)

    rejections = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        noise = np.triu(rng.normal(0.0, 1.0, size=(120, 120)))
        weights = np.maximum(5.0 + noise + np.triu(noise, k=1).T, 0.0)
        if posttest.test_tad(ContactMatrix(weights), TadCall(a=40, b=79)).pvalue < 0.05:
            rejections += 1
    assert 0.03 <= rejections / 1000 <= 0.07

    d = np.arange(120)
    significant = 0
    for seed in range(100):
        spec = DecaySpec(n=120, background=2.0 / (1 + d), domains=((40, 79, 10.0 / (1 + d)),), noise_sd=0.5,
                         seed=seed)
        if posttest.test_tad(sample_decay_matrix(spec), TadCall(a=40, b=79)).pvalue < 0.05:
            significant += 1
    assert significant >= 95


def test_coefficient_equals_likelihood_gain():
    rng = np.random.default_rng(7)
    pairs = 0
    while pairs < 1000:
        n = 30
        upper = np.triu(rng.random((n, n)) < rng.uniform(0.05, 0.3), k=1)
        start = int(rng.integers(0, 15))
        block = np.triu(rng.random((12, 12)) < rng.uniform(0.3, 0.8), k=1)
        upper[start:start + 12, start:start + 12] |= block
        A = BinaryAdjacency((upper | upper.T).astype(np.int8))
        prefix = IntervalPrefixSums.build(A)

        grid = CandidateGrid.from_covariates(peaks_at(n, np.sort(rng.choice(n, size=7, replace=False))))
        beta = float(rng.uniform(0.05, 0.4))
        coefficients = objective_coefficients(prefix, grid, beta).as_dict(grid)
        baseline = log_likelihood(A, LpSolution.empty(len(grid)), ModelParams(beta=beta))
        for (a, b), c in coefficients.items():
            pi = np.zeros(len(grid))
            pi[grid.index_of(a, b)] = 1.0
            solution = LpSolution(pi=pi, selected=((a, b),), objective_value=0.0)
            params = ModelParams(beta=beta, alphas={(a, b): alpha_hat(prefix, a, b)})
            assert log_likelihood(A, solution, params) - baseline == pytest.approx(c, abs=1e-9)
            pairs += 1


def test_hierarchy_is_recovered_across_seeds():
    recovered = 0
    for seed in range(20):
        spec, Y = nested_decay_spec(seed=seed)
        tree = call_tads_hierarchical(sample_decay_matrix(spec), Y)
        roots = [c.interval for c in tree.roots]
        children = [[c.interval for c in root.children] for root in tree.roots]
        assert all(call.pvalue < 0.05 for call in tree.iter_calls())
        if roots == [(50, 109), (180, 239)] and children == [[(65, 94)], [(195, 224)]]:
            recovered += 1
    assert recovered >= 18


def test_calls_are_stable_across_threshold_quantiles():
    spec, Y = chromosome_decay_spec(n=2000, seed=11)
    M = sample_decay_matrix(spec)
    strict = call_tads_hierarchical(M, Y, levels=1, qs=[0.9])
    loose = call_tads_hierarchical(M, Y, levels=1, qs=[0.85])
    summary = match_call_sets([c.interval for c in strict.roots], [c.interval for c in loose.roots], 0.7)
    assert summary.n_a > 10
    assert summary.fraction >= 0.8
