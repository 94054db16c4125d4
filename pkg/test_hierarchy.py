"""
Hierarchical calling tests: windows, reconciliation, nesting and classification
"""

import numpy as np
import pytest

from src.core.hierarchy import (TadCall, TadTree, call_tads_hierarchical, call_tads_joint, classify_conserved,
                                classify_specific, jaccard, match_call_sets, plan_windows, resolve_overlaps)
from src.data.contact_data import ContactMatrix, CovariateVector
from src.sim.simulate import DecaySpec, chromosome_decay_spec, nested_decay_spec, sample_decay_matrix
from src.utils.errors import ValidationError
from src.utils.run_logger import SolveLogger


def peaks_at(n: int, positions) -> CovariateVector:
    peaks = np.zeros(n, dtype=np.int8)
    peaks[list(positions)] = 1
    return CovariateVector(peaks)


def planted(n: int, tads, seed: int, noise_sd: float = 0.5) -> ContactMatrix:
    d = np.arange(n)
    profile = 5.0 * np.exp(-d / 300.0)
    spec = DecaySpec(n=n, background=4.0 * np.exp(-d / 3.0), domains=tuple((a, b, profile) for a, b in tads),
                     noise_sd=noise_sd, seed=seed)
    return sample_decay_matrix(spec)


def ends_of(tads):
    return [x for interval in tads for x in interval]


def intervals(calls):
    return [c.interval for c in calls]


# ---------------------------------------------------------------------------
# Calls and trees
# ---------------------------------------------------------------------------

def test_tad_call_validation():
    with pytest.raises(ValidationError):
        TadCall(a=5, b=5)
    with pytest.raises(ValidationError):
        TadCall(a=1, b=5, level=0)


def test_tree_records_follow_preorder():
    child = TadCall(a=12, b=15, level=2, pvalue=0.01)
    tree = TadTree(roots=[TadCall(a=30, b=39, pvalue=0.02), TadCall(a=10, b=19, pvalue=0.001, children=[child])])
    tree.validate()
    assert len(tree) == 3
    records = tree.to_records("chr2", 10000, 1000000)
    assert [r.id for r in records] == [1, 2, 3]
    assert [(r.start_bp, r.end_bp) for r in records] == [(1100000, 1200000), (1120000, 1160000),
                                                         (1300000, 1400000)]
    assert [r.parent_id for r in records] == [None, 1, None]
    assert [r.level for r in records] == [1, 2, 1]
    assert tree.level_calls(2) == [child]


def test_tree_validation_errors():
    with pytest.raises(ValidationError):
        TadTree(roots=[TadCall(a=0, b=10), TadCall(a=10, b=20)]).validate()
    with pytest.raises(ValidationError):
        TadTree(roots=[TadCall(a=0, b=10, children=[TadCall(a=5, b=15, level=2)])]).validate()
    with pytest.raises(ValidationError):
        TadTree(roots=[TadCall(a=0, b=10, children=[TadCall(a=2, b=5, level=3)])]).validate()
    with pytest.raises(ValidationError):
        TadTree(roots=[TadCall(a=0, b=10, children=[TadCall(a=0, b=10, level=2)])]).validate()


# ---------------------------------------------------------------------------
# Windows and Jaccard
# ---------------------------------------------------------------------------

def test_plan_windows_two_windows():
    plan = plan_windows(550, 300, 50)
    assert plan.windows == ((0, 300), (250, 550))


def test_plan_windows_short_region():
    assert plan_windows(200, 300, 50).windows == ((0, 200),)


def test_plan_windows_long_region():
    plan = plan_windows(4800, 300, 50)
    assert len(plan) == 19
    assert plan.windows[-1][1] == 4800
    for (s1, e1), (s2, e2) in zip(plan.windows, plan.windows[1:]):
        assert s2 == s1 + 250
        assert e1 - s2 == 50


def test_plan_windows_rejects_bad_overlap():
    with pytest.raises(ValidationError):
        plan_windows(1000, 300, 300)
    with pytest.raises(ValidationError):
        plan_windows(1000, 300, 0)


def test_jaccard():
    assert jaccard((3, 9), (3, 9)) == 1.0
    assert jaccard((0, 4), (5, 9)) == 0.0
    assert jaccard((0, 9), (5, 14)) == pytest.approx(1 / 3)
    assert jaccard(TadCall(a=0, b=9), (5, 14)) == pytest.approx(1 / 3)


# ---------------------------------------------------------------------------
# Window reconciliation
# ---------------------------------------------------------------------------

def test_identical_calls_collapse():
    Y = peaks_at(550, [260, 290])
    merged = resolve_overlaps([TadCall(a=260, b=290)], [TadCall(a=260, b=290, source_window=1)], Y, (250, 300))
    assert intervals(merged) == [(260, 290)]
    assert merged[0].source_window == 0


def test_nested_call_is_kept():
    Y = peaks_at(550, [100, 120, 180, 200, 400])
    merged = resolve_overlaps([TadCall(a=100, b=200, score=9.0)], [TadCall(a=120, b=180, score=1.0)], Y, (90, 300))
    assert intervals(merged) == [(120, 180)]


def test_edge_call_is_extended_to_next_site():
    Y = peaks_at(400, [100, 240, 260, 380])
    merged = resolve_overlaps([TadCall(a=100, b=240)], [], Y, (200, 255))
    assert intervals(merged) == [(100, 260)]


def test_window_two_call_is_extended_back():
    Y = peaks_at(550, [200, 260, 400])
    merged = resolve_overlaps([], [TadCall(a=260, b=400)], Y, (250, 300))
    assert intervals(merged) == [(200, 400)]


def test_extension_applies_before_containment():
    # unextended, the two calls only partly overlap and the higher score would win
    Y = peaks_at(550, [200, 255, 260, 290, 300, 500])
    w1 = [TadCall(a=200, b=290, score=10.0)]
    w2 = [TadCall(a=260, b=300, score=1.0)]
    assert intervals(resolve_overlaps(w1, w2, Y, (250, 300))) == [(260, 300)]


def test_large_overlap_becomes_intersection():
    Y = peaks_at(550, [260, 262, 297, 299, 500])
    w1 = [TadCall(a=260, b=297, score=2.0)]
    w2 = [TadCall(a=262, b=299, score=5.0)]
    merged = resolve_overlaps(w1, w2, Y, (250, 300))
    assert intervals(merged) == [(262, 297)]
    assert merged[0].score == 5.0


def test_small_overlap_keeps_higher_score():
    Y = peaks_at(550, [255, 260, 280, 295, 500])
    w1 = [TadCall(a=260, b=280, score=1.0)]
    w2 = [TadCall(a=270, b=295, score=3.0)]
    assert intervals(resolve_overlaps(w1, w2, Y, (250, 300))) == [(270, 295)]
    tied = [TadCall(a=270, b=295, score=1.0)]
    assert intervals(resolve_overlaps(w1, tied, Y, (250, 300))) == [(260, 280)]


def test_reconciled_calls_do_not_overlap():
    rng = np.random.default_rng(0)
    Y = peaks_at(550, range(0, 550, 5))
    for _ in range(100):
        w1, cursor = [], int(rng.integers(0, 20))
        while cursor < 280:
            b = min(cursor + int(rng.integers(1, 40)), 299)
            w1.append(TadCall(a=cursor, b=b, score=float(rng.random())))
            cursor = b + 1 + int(rng.integers(0, 10))
        w2, cursor = [], 250 + int(rng.integers(0, 20))
        while cursor < 530:
            b = min(cursor + int(rng.integers(1, 40)), 549)
            w2.append(TadCall(a=cursor, b=b, score=float(rng.random())))
            cursor = b + 1 + int(rng.integers(0, 10))
        merged = resolve_overlaps(w1, w2, Y, (250, 300))
        for left, right in zip(merged, merged[1:]):
            assert left.b < right.a


# ---------------------------------------------------------------------------
# Calling
# ---------------------------------------------------------------------------

def test_no_edges_gives_empty_tree():
    tree = call_tads_hierarchical(ContactMatrix(np.zeros((80, 80))), peaks_at(80, [5, 30, 60]))
    assert len(tree) == 0


def test_quantiles_must_match_levels():
    with pytest.raises(ValidationError):
        call_tads_hierarchical(ContactMatrix(np.zeros((80, 80))), peaks_at(80, [5, 30]), levels=2, qs=[0.9])


@pytest.mark.parametrize("seed", range(3))
def test_nested_tads_are_recovered(seed):
    spec, Y = nested_decay_spec(seed=seed)
    tree = call_tads_hierarchical(sample_decay_matrix(spec), Y)
    assert intervals(tree.roots) == [(50, 109), (180, 239)]
    assert [intervals(root.children) for root in tree.roots] == [[(65, 94)], [(195, 224)]]
    assert all(call.pvalue < 0.05 for call in tree.iter_calls())
    assert all(child.level == 2 for root in tree.roots for child in root.children)


def test_fdr_reports_adjusted_values_separately():
    spec, Y = nested_decay_spec(seed=0)
    M = sample_decay_matrix(spec)
    raw = call_tads_hierarchical(M, Y)
    adjusted = call_tads_hierarchical(M, Y, fdr=True)
    assert intervals(adjusted.roots) == intervals(raw.roots)
    assert [c.pvalue for c in adjusted.roots] == [c.pvalue for c in raw.roots]
    assert all(c.qvalue is None for c in raw.iter_calls())
    assert all(c.pvalue <= c.qvalue < 0.05 for c in adjusted.iter_calls())
    records = adjusted.to_records("chr1", 10000, 0)
    assert [r.qvalue for r in records] == [c.qvalue for c in adjusted.iter_calls()]


def test_solves_are_logged(tmp_path):
    spec, Y = nested_decay_spec(seed=7)
    solve_logger = SolveLogger(log_dir=str(tmp_path), run_id="test")
    call_tads_hierarchical(sample_decay_matrix(spec), Y, levels=2, qs=[0.9, 0.5], solve_logger=solve_logger)
    summary = solve_logger.summary()
    assert summary["solves"] == 3
    assert summary["non_converged"] == 0
    assert (tmp_path / "solves.csv").exists()


WINDOWED_TADS = [(20, 59), (80, 119), (140, 179), (190, 229), (310, 349), (370, 409), (430, 469), (490, 529)]


def test_windowing_leaves_interior_tads_unchanged():
    M = planted(550, WINDOWED_TADS, seed=1)
    Y = peaks_at(550, ends_of(WINDOWED_TADS))
    windowed = call_tads_hierarchical(M, Y, levels=1, qs=[0.9], window_len=300, overlap=50)
    single = call_tads_hierarchical(M, Y, levels=1, qs=[0.9], window_len=1000, overlap=50)
    assert intervals(windowed.roots) == WINDOWED_TADS
    assert intervals(single.roots) == WINDOWED_TADS
    assert [c.pvalue for c in windowed.roots] == [c.pvalue for c in single.roots]


def test_windowed_calling_is_deterministic():
    spec, Y = chromosome_decay_spec(n=700, seed=3)
    M = sample_decay_matrix(spec)
    first = call_tads_hierarchical(M, Y, levels=1, qs=[0.9])
    second = call_tads_hierarchical(M, Y, levels=1, qs=[0.9], threads=3)
    assert first.to_records("chr1", 10000, 0) == second.to_records("chr1", 10000, 0)
    assert len(first) > 0


def test_joint_single_cell_matches_hierarchical():
    spec, Y = nested_decay_spec(seed=2)
    M = sample_decay_matrix(spec)
    single = call_tads_hierarchical(M, Y, levels=1, qs=[0.9])
    joint = call_tads_joint([M], [Y], levels=1, qs=[0.9])
    assert intervals(joint.roots) == intervals(single.roots)
    assert [c.pvalue for c in joint.roots] == [c.pvalue for c in single.roots]
    assert all(c.cell_type == "joint" for c in joint.roots)


def test_joint_identical_matrices_match_single_run():
    spec, Y = nested_decay_spec(seed=3)
    M = sample_decay_matrix(spec)
    single = call_tads_hierarchical(M, Y, levels=2, qs=[0.9, 0.5])
    joint = call_tads_joint([M, M], [Y, Y], labels=["a", "b"], levels=2, qs=[0.9, 0.5])
    assert [c.interval for c in joint.iter_calls()] == [c.interval for c in single.iter_calls()]
    assert all(set(c.pvalues) == {"a", "b"} for c in joint.iter_calls())


def test_joint_keeps_only_shared_tad():
    n = 300
    shared, private_1, private_2 = (40, 89), (120, 159), (160, 199)
    Y = peaks_at(n, ends_of([shared, private_1, private_2]))
    first = planted(n, [shared, private_1], seed=11)
    second = planted(n, [shared, private_2], seed=12)
    joint = call_tads_joint([first, second], [Y, Y], labels=["x", "y"], levels=1, qs=[0.9])
    assert intervals(joint.roots) == [shared]


def test_joint_intersects_covariates():
    n = 300
    tads = [(40, 89), (120, 159)]
    M = planted(n, tads, seed=13)
    full = peaks_at(n, ends_of(tads))
    partial = peaks_at(n, [40, 89, 120])
    joint = call_tads_joint([M, M], [full, partial], levels=1, qs=[0.9])
    assert intervals(joint.roots) == [(40, 89)]


def test_joint_input_errors():
    M = ContactMatrix(np.zeros((50, 50)))
    Y = peaks_at(50, [0, 49])
    with pytest.raises(ValidationError):
        call_tads_joint([], [])
    with pytest.raises(ValidationError):
        call_tads_joint([M, M], [Y])
    with pytest.raises(ValidationError):
        call_tads_joint([M, M], [Y, Y], labels=["a", "a"])


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def test_conserved_requires_every_cell_type():
    joint = [TadCall(a=0, b=9), TadCall(a=20, b=29)]
    per_cell = {"a": [TadCall(a=0, b=9), TadCall(a=20, b=29)], "b": [TadCall(a=0, b=9)]}
    assert intervals(classify_conserved(joint, per_cell)) == [(0, 9)]


def test_conserved_counts_matches():
    joint = [(20 * i, 20 * i + 9) for i in range(50)]
    per_cell = {
        "a": list(joint),
        "b": joint[:29] + [(a + 5, b + 5) for a, b in joint[29:]],
    }
    assert len(classify_conserved(joint, per_cell, 0.7)) == 29


def test_specific_calls():
    per_cell = {
        "a": [TadCall(a=0, b=9), TadCall(a=40, b=49)],
        "b": [TadCall(a=0, b=3), TadCall(a=40, b=49)],
        "c": [TadCall(a=100, b=120)],
    }
    specific = classify_specific(per_cell, 0.4)
    # jaccard((0, 9), (0, 3)) is exactly 0.4
    assert intervals(specific["a"]) == []
    assert intervals(specific["b"]) == []
    assert intervals(specific["c"]) == [(100, 120)]


def test_specific_needs_two_cell_types():
    with pytest.raises(ValidationError):
        classify_specific({"a": [TadCall(a=0, b=9)]})


def test_match_call_sets():
    summary = match_call_sets([(0, 9), (20, 29), (40, 49)], [(0, 9), (21, 29)], 0.7)
    assert (summary.n_a, summary.n_b, summary.matched) == (3, 2, 2)
    assert summary.fraction == pytest.approx(2 / 3)
    assert match_call_sets([], [(0, 9)]).fraction == 0.0
