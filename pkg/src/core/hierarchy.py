"""
Hierarchical TAD calling

Windows along the region are solved independently with the interval LP,
calls from adjacent windows are reconciled in genomic order, every call is
post-tested, and surviving calls are searched again for nested TADs.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core import posttest
from src.core.lpopt import joint_alternate_maximize
from src.data.contact_data import (ContactMatrix, CovariateVector, intersect_covariates,
                                   quantile_threshold, stack_contacts)
from src.utils.errors import InsufficientDistancesError, ValidationError
from src.utils.run_logger import SolveLogger
from src.utils.tad_io import TadRecord

logger = logging.getLogger("tadlp.hierarchy")

Interval = Tuple[int, int]


@dataclass
class TadCall:
    """
    A called TAD over region bins [a, b] (inclusive)

    score is the LP coefficient of the interval when it was selected;
    pvalues maps cell type to post-test p-value and pvalue is their maximum;
    qvalue is the Benjamini-Hochberg adjusted pvalue, set only when FDR
    control is on.
    """

    a: int
    b: int
    level: int = 1
    pvalue: Optional[float] = None
    source_window: int = 0
    cell_type: str = "joint"
    score: float = 0.0
    pvalues: Dict[str, float] = field(default_factory=dict)
    qvalue: Optional[float] = None
    children: List["TadCall"] = field(default_factory=list)

    def __post_init__(self):
        if self.a >= self.b:
            raise ValidationError(f"TAD call needs a < b, got [{self.a},{self.b}]")
        if self.level < 1:
            raise ValidationError(f"TAD level must be >= 1, got {self.level}")

    @property
    def interval(self) -> Interval:
        return (self.a, self.b)

    def contains(self, other: "TadCall") -> bool:
        return self.a <= other.a and other.b <= self.b

    def overlaps(self, other: "TadCall") -> bool:
        return self.a <= other.b and other.a <= self.b


@dataclass
class TadTree:
    """Forest of level-1 calls with nested children"""

    roots: List[TadCall] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(1 for _ in self.iter_calls())

    def iter_calls(self) -> Iterator[TadCall]:
        """Pre-order walk, siblings in genomic order"""
        stack = list(reversed(sorted(self.roots, key=lambda c: c.interval)))
        while stack:
            call = stack.pop()
            yield call
            stack.extend(reversed(sorted(call.children, key=lambda c: c.interval)))

    def level_calls(self, level: int) -> List[TadCall]:
        return [c for c in self.iter_calls() if c.level == level]

    def validate(self) -> None:
        """Raise ValidationError unless siblings are disjoint and children strictly nest"""
        def check_siblings(calls: List[TadCall]) -> None:
            ordered = sorted(calls, key=lambda c: c.interval)
            for left, right in zip(ordered, ordered[1:]):
                if left.overlaps(right):
                    raise ValidationError(f"sibling TADs {left.interval} and {right.interval} overlap")

        check_siblings(self.roots)
        for root in self.roots:
            if root.level != 1:
                raise ValidationError(f"root TAD {root.interval} has level {root.level}")
        for call in self.iter_calls():
            check_siblings(call.children)
            for child in call.children:
                if not call.contains(child) or child.interval == call.interval:
                    raise ValidationError(f"TAD {child.interval} is not nested in {call.interval}")
                if child.level != call.level + 1:
                    raise ValidationError(f"TAD {child.interval} has level {child.level} under level {call.level}")

    def to_records(self, chrom: str, resolution: int, offset: int) -> List[TadRecord]:
        """Numbered output rows; ids follow the pre-order walk starting at 1"""
        ids: Dict[int, int] = {}
        parents: Dict[int, int] = {}
        for call in self.iter_calls():
            for child in call.children:
                parents[id(child)] = id(call)

        records = []
        for number, call in enumerate(self.iter_calls(), start=1):
            ids[id(call)] = number
            parent = parents.get(id(call))
            records.append(TadRecord(
                chrom=chrom,
                start_bp=offset + call.a * resolution,
                end_bp=offset + (call.b + 1) * resolution,
                level=call.level,
                pvalue=call.pvalue,
                cell_type=call.cell_type,
                parent_id=None if parent is None else ids[parent],
                id=number,
                qvalue=call.qvalue,
            ))
        return records


@dataclass(frozen=True)
class WindowPlan:
    windows: Tuple[Tuple[int, int], ...]
    window_len: int
    overlap: int

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)


@dataclass(frozen=True)
class MatchSummary:
    """Calls in each set and calls of the first set matched in the second"""

    n_a: int
    n_b: int
    matched: int

    @property
    def fraction(self) -> float:
        return self.matched / self.n_a if self.n_a else 0.0


def plan_windows(n: int, window_len: int = 300, overlap: int = 50) -> WindowPlan:
    """
    Overlapping windows of window_len bins stepping by window_len - overlap

    The last window ends at n; a region no longer than one window is a
    single window [0, n).
    """
    if not 0 < overlap < window_len:
        raise ValidationError(f"need 0 < overlap < window_len, got overlap={overlap}, window_len={window_len}")
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if window_len >= n:
        return WindowPlan(((0, n),), window_len, overlap)

    step = window_len - overlap
    windows = []
    start = 0
    while start + window_len < n:
        windows.append((start, start + window_len))
        start += step
    windows.append((start, n))
    return WindowPlan(tuple(windows), window_len, overlap)


def _interval(call: Union[TadCall, Interval]) -> Interval:
    return call.interval if isinstance(call, TadCall) else (int(call[0]), int(call[1]))


def jaccard(s1: Union[TadCall, Interval], s2: Union[TadCall, Interval]) -> float:
    """Jaccard index of the bin sets of two inclusive intervals"""
    (a1, b1), (a2, b2) = _interval(s1), _interval(s2)
    inter = max(0, min(b1, b2) - max(a1, a2) + 1)
    union = (b1 - a1 + 1) + (b2 - a2 + 1) - inter
    return inter / union


# ---------------------------------------------------------------------------
# Window reconciliation
# ---------------------------------------------------------------------------

def _copy(call: TadCall, **changes) -> TadCall:
    values = dict(a=call.a, b=call.b, level=call.level, pvalue=call.pvalue, source_window=call.source_window,
                  cell_type=call.cell_type, score=call.score, pvalues=dict(call.pvalues),
                  qvalue=call.qvalue)
    values.update(changes)
    return TadCall(**values)


def resolve_overlaps(calls_w1: Sequence[TadCall], calls_w2: Sequence[TadCall], Y: CovariateVector,
                     window_boundary: Tuple[int, int], jaccard_merge: float = 0.8) -> List[TadCall]:
    """
    Reconcile the calls of two adjacent windows

    Calls made identically by both windows are kept once. The remaining
    calls go through the rules, in order:
      i.   a window-1 call reaching the overlap and ending at the last CTCF site
           before window 1 ends is extended to the next CTCF site; a window-2
           call starting at the first CTCF site of window 2 is extended back to
           the previous CTCF site
      ii.  if one call contains the other, the nested call is kept
      iii. calls with Jaccard index above jaccard_merge are replaced by their intersection
    Any overlap left keeps the call with the larger score (window 1 on ties).

    Args:
        calls_w1: Calls of the left window, region bins
        calls_w2: Calls of the right window, region bins
        Y: Region covariate vector
        window_boundary: (start of window 2, end of window 1), i.e. the
            half-open overlap region
        jaccard_merge: Merge threshold for rule iii

    Returns:
        Non-overlapping calls sorted by position
    """
    w2_start, w1_end = window_boundary
    peaks = Y.positions

    # a call made identically by both windows is settled before any rule
    shared = {c.interval for c in calls_w1} & {c.interval for c in calls_w2}
    settled = [_copy(c) for c in calls_w1 if c.interval in shared]
    left = [_copy(c) for c in calls_w1 if c.interval not in shared]
    right = [_copy(c) for c in calls_w2 if c.interval not in shared]

    before_end = peaks[peaks < w1_end]
    after_end = peaks[peaks >= w1_end]
    if before_end.size and after_end.size:
        last_site, next_site = int(before_end[-1]), int(after_end[0])
        left = [_copy(c, b=next_site) if c.b == last_site and c.b >= w2_start else c for c in left]

    from_start = peaks[peaks >= w2_start]
    before_start = peaks[peaks < w2_start]
    if from_start.size and before_start.size:
        first_site, previous_site = int(from_start[0]), int(before_start[-1])
        right = [_copy(c, a=previous_site) if c.a == first_site and c.a < w1_end else c for c in right]

    for call in settled:
        left = [c for c in left if not c.overlaps(call)]
        right = [c for c in right if not c.overlaps(call)]

    changed = True
    while changed:
        changed = False
        for i, c1 in enumerate(left):
            for j, c2 in enumerate(right):
                if not c1.overlaps(c2):
                    continue
                if c1.contains(c2) and c1.interval != c2.interval:
                    del left[i]
                elif c2.contains(c1):
                    del right[j]
                elif jaccard(c1, c2) > jaccard_merge:
                    left[i] = _copy(c1, a=max(c1.a, c2.a), b=min(c1.b, c2.b), score=max(c1.score, c2.score))
                    del right[j]
                elif c2.score > c1.score:
                    del left[i]
                else:
                    del right[j]
                changed = True
                break
            if changed:
                break

    return sorted(settled + left + right, key=lambda c: c.interval)


# ---------------------------------------------------------------------------
# Calling
# ---------------------------------------------------------------------------

def _solve_block(matrices: Sequence[ContactMatrix], Y: CovariateVector, start: int, end: int, q: float,
                 K: int, level: int, window: int, label: str, beta0: Optional[float],
                 tol: float, max_iter: int, solve_logger: Optional[SolveLogger]) -> List[TadCall]:
    """LP calls inside region bins [start, end), returned in region coordinates"""
    Y_block = Y.submatrix(start, end)
    if Y_block.positions.size < 2:
        logger.info(f"Level {level} block [{start},{end}) has fewer than two CTCF sites; no calls")
        return []

    adjacencies = [quantile_threshold(M.submatrix(start, end), q) for M in matrices]
    if all(A.edges.sum() == 0 for A in adjacencies):
        logger.warning(f"Level {level} block [{start},{end}) has no edges after thresholding; no calls")
        return []

    result = joint_alternate_maximize(adjacencies, Y_block, K, beta0s=[beta0] * len(adjacencies), tol=tol,
                                      max_iter=max_iter, max_len=end - start - 1)
    solution = result.solution
    if solve_logger is not None:
        solve_logger.log_solve(
            cell_type=label, level=level, window=window, start=start, end=end,
            grid_size=int(solution.pi.size), K=K, iterations=result.trace.iterations,
            converged=result.trace.converged, beta=[p.beta for p in result.params],
            objective=result.trace.objectives[-1] if result.trace.objectives else 0.0,
            selected=len(solution.selected),
        )
    return [
        TadCall(a=a + start, b=b + start, level=level, source_window=window, cell_type=label, score=score)
        for (a, b), score in zip(solution.selected, solution.scores)
    ]


def _post_test(matrices: Sequence[ContactMatrix], labels: Sequence[str], calls: List[TadCall],
               parent_bounds: Optional[Tuple[int, int]]) -> List[TadCall]:
    tested = []
    for call in calls:
        pvalues = {}
        try:
            for label, M in zip(labels, matrices):
                pvalues[label] = posttest.test_tad(M, call, parent_bounds).pvalue
        except InsufficientDistancesError as e:
            logger.debug(f"Dropping {call.interval}: {e}")
            continue
        call.pvalues = pvalues
        call.pvalue = max(pvalues.values())
        tested.append(call)
    return tested


def _filter(calls: List[TadCall], p_cutoff: float, fdr: bool) -> List[TadCall]:
    if fdr and calls:
        adjusted = posttest.adjust_pvalues([c.pvalue for c in calls])
        for call, q in zip(calls, adjusted):
            call.qvalue = float(q)
        return [c for c in calls if c.qvalue < p_cutoff]
    return [c for c in calls if c.pvalue < p_cutoff]


def _call_tads(matrices: Sequence[ContactMatrix], Y: CovariateVector, labels: Sequence[str], output_label: str,
               levels: int, qs: Sequence[float], K: int, p_cutoff: float, window_len: int, overlap: int,
               jaccard_merge: float, fdr: bool, beta0: Optional[float], tol: float, max_iter: int,
               threads: int, solve_logger: Optional[SolveLogger]) -> TadTree:
    if len(qs) != levels:
        raise ValidationError(f"need one quantile per level: levels={levels}, qs={list(qs)}")
    stack_contacts(list(matrices))
    n = matrices[0].n
    if Y.n != n:
        raise ValidationError(f"covariate vector has {Y.n} bins, contact matrix has {n}")

    solve_kwargs = dict(K=K, label=output_label, beta0=beta0, tol=tol, max_iter=max_iter, solve_logger=solve_logger)
    plan = plan_windows(n, window_len, overlap)
    logger.info(f"Calling level 1 over {len(plan)} windows of {n} bins")

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        def windowed(item):
            index, (start, end) = item
            return _solve_block(matrices, Y, start, end, qs[0], level=1, window=index, **solve_kwargs)

        per_window = list(executor.map(windowed, enumerate(plan.windows)))

        calls = per_window[0]
        for k in range(1, len(plan)):
            boundary = (plan.windows[k][0], plan.windows[k - 1][1])
            calls = resolve_overlaps(calls, per_window[k], Y, boundary, jaccard_merge)

        roots = _filter(_post_test(matrices, labels, calls, None), p_cutoff, fdr)
        logger.info(f"Level 1: {len(roots)} of {len(calls)} calls pass the post-test")

        parents = roots
        for level in range(2, levels + 1):
            def nested(item, level=level):
                index, parent = item
                found = _solve_block(matrices, Y, parent.a, parent.b + 1, qs[level - 1], level=level,
                                     window=index, **solve_kwargs)
                return _post_test(matrices, labels, found, (parent.a, parent.b))

            children_per_parent = list(executor.map(nested, enumerate(parents)))
            survivors = _filter([c for group in children_per_parent for c in group], p_cutoff, fdr)
            kept = {id(c) for c in survivors}
            for parent, children in zip(parents, children_per_parent):
                parent.children = [c for c in children if id(c) in kept]
            parents = survivors
            logger.info(f"Level {level}: {len(survivors)} nested calls pass the post-test")
            if not parents:
                break

    tree = TadTree(roots=roots)
    tree.validate()
    return tree


def call_tads_hierarchical(M: ContactMatrix, Y: CovariateVector, levels: int = 3,
                           qs: Sequence[float] = (0.9, 0.5, 0.5), K: int = 30, p_cutoff: float = 0.05,
                           window_len: int = 300, overlap: int = 50, jaccard_merge: float = 0.8,
                           fdr: bool = False, beta0: Optional[float] = None, tol: float = 1e-6,
                           max_iter: int = 50, threads: int = 1, solve_logger: Optional[SolveLogger] = None,
                           cell_type: str = "sample") -> TadTree:
    """
    Multi-level TAD calling on one contact matrix

    Level 1 thresholds each window at qs[0]; level l > 1 re-thresholds each
    surviving level-(l-1) TAD at qs[l-1] and searches it for strictly
    smaller intervals, with the post-test surround clipped to the parent.

    Args:
        M: Region contact matrix (usually balanced)
        Y: Region CTCF indicator
        levels: Number of levels
        qs: Threshold quantile per level
        K: Cardinality bound per solve
        p_cutoff: Post-test retention cutoff
        window_len: Window length in bins
        overlap: Window overlap in bins
        jaccard_merge: Rule iii threshold for window reconciliation
        fdr: Retain by Benjamini-Hochberg adjusted p-values (reported as qvalue)
        beta0: Starting beta; None uses the default heuristic per solve
        tol: Ascent tolerance on |delta beta|
        max_iter: Ascent iteration cap
        threads: Worker threads for independent windows / parents
        solve_logger: Optional per-solve log
        cell_type: Label carried on every call

    Returns:
        Validated TadTree
    """
    return _call_tads([M], Y, [cell_type], cell_type, levels, qs, K, p_cutoff, window_len, overlap,
                      jaccard_merge, fdr, beta0, tol, max_iter, threads, solve_logger)


def call_tads_joint(Ms: Sequence[ContactMatrix], Ys: Sequence[CovariateVector], labels: Optional[Sequence[str]] = None,
                    levels: int = 3, qs: Sequence[float] = (0.9, 0.5, 0.5), K: int = 30, p_cutoff: float = 0.05,
                    window_len: int = 300, overlap: int = 50, jaccard_merge: float = 0.8, fdr: bool = False,
                    beta0: Optional[float] = None, tol: float = 1e-6, max_iter: int = 50, threads: int = 1,
                    solve_logger: Optional[SolveLogger] = None) -> TadTree:
    """
    Conserved TAD calling across cell types

    Same pipeline as call_tads_hierarchical on the intersected CTCF sites,
    with one shared interval selection per solve. A call survives only if
    its post-test p-value is below the cutoff in every cell type; its
    pvalue is the largest of them.
    """
    if not Ms:
        raise ValidationError("need at least one contact matrix")
    if len(Ms) != len(Ys):
        raise ValidationError(f"got {len(Ms)} matrices but {len(Ys)} covariate vectors")
    labels = list(labels) if labels is not None else [f"cell{i + 1}" for i in range(len(Ms))]
    if len(labels) != len(Ms) or len(set(labels)) != len(labels):
        raise ValidationError("need one distinct label per cell type")
    Y = intersect_covariates(list(Ys))
    return _call_tads(list(Ms), Y, labels, "joint", levels, qs, K, p_cutoff, window_len, overlap,
                      jaccard_merge, fdr, beta0, tol, max_iter, threads, solve_logger)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def _best_jaccard(call, others) -> float:
    return max((jaccard(call, other) for other in others), default=0.0)


def classify_conserved(joint_calls: Sequence, per_cell_calls: Dict[str, Sequence],
                       j_threshold: float = 0.7) -> List:
    """Joint calls matched above j_threshold by some call in every cell type"""
    return [
        call for call in joint_calls
        if all(_best_jaccard(call, calls) > j_threshold for calls in per_cell_calls.values())
    ]


def classify_specific(per_cell_calls: Dict[str, Sequence], j_threshold: float = 0.4) -> Dict[str, List]:
    """Per cell type, the calls whose best Jaccard against every other cell type is below j_threshold"""
    if len(per_cell_calls) < 2:
        raise ValidationError("cell-type-specific calls need at least two cell types")
    specific = {}
    for label, calls in per_cell_calls.items():
        others = [other for other_label, other in per_cell_calls.items() if other_label != label]
        specific[label] = [
            call for call in calls
            if all(_best_jaccard(call, other) < j_threshold for other in others)
        ]
    return specific


def match_call_sets(calls_a: Sequence, calls_b: Sequence, j_threshold: float = 0.7) -> MatchSummary:
    """Count calls of calls_a with a partner in calls_b at Jaccard above j_threshold"""
    matched = int(np.sum([_best_jaccard(call, calls_b) > j_threshold for call in calls_a])) if calls_a else 0
    return MatchSummary(n_a=len(calls_a), n_b=len(calls_b), matched=matched)
