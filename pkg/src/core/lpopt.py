"""
Interval likelihood optimization

This module holds the block-model likelihood over contiguous intervals, the
plug-in alpha estimates, the beta update, the integral interval LP and the
alternating maximization (single and multi-cell-type).

The LP over interval indicators has a consecutive-ones coverage matrix, so its
vertices are integral; the default solver is the equivalent exact dynamic
program (cardinality-constrained weighted interval scheduling).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import xlogy

from src.data.contact_data import BinaryAdjacency, CovariateVector, IntervalPrefixSums
from src.utils.errors import DegenerateSelectionError, TadlpError, ValidationError

logger = logging.getLogger("tadlp.lpopt")

EPS = 1e-6

Interval = Tuple[int, int]


def clamp_probability(p):
    """Clamp probabilities into [EPS, 1 - EPS]"""
    return np.clip(p, EPS, 1.0 - EPS)


@dataclass(frozen=True, eq=False)
class CandidateGrid:
    """
    Candidate intervals (a, b), a < b, with a CTCF peak at both ends

    Intervals are stored as parallel start/end arrays in lexicographic order.
    """

    n: int
    starts: np.ndarray
    ends: np.ndarray

    @classmethod
    def from_covariates(cls, covariates: CovariateVector, max_len: Optional[int] = None) -> "CandidateGrid":
        """
        Build the grid of peak-to-peak intervals

        Args:
            covariates: Peak indicator Y
            max_len: Longest allowed interval in bins (b - a + 1); None for no cap
        """
        positions = covariates.positions.astype(np.int64)
        i, j = np.triu_indices(positions.size, k=1)
        starts, ends = positions[i], positions[j]
        if max_len is not None:
            keep = ends - starts + 1 <= max_len
            starts, ends = starts[keep], ends[keep]
        starts.setflags(write=False)
        ends.setflags(write=False)
        return cls(n=covariates.n, starts=starts, ends=ends)

    def __len__(self) -> int:
        return int(self.starts.size)

    @property
    def intervals(self) -> List[Interval]:
        return list(zip(self.starts.tolist(), self.ends.tolist()))

    @property
    def pair_counts(self) -> np.ndarray:
        """Ordered off-diagonal pairs m(m-1) per interval"""
        m = self.ends - self.starts + 1
        return m * (m - 1)

    def index_of(self, a: int, b: int) -> int:
        lo = np.searchsorted(self.starts, a, side="left")
        hi = np.searchsorted(self.starts, a, side="right")
        pos = lo + np.searchsorted(self.ends[lo:hi], b)
        if pos >= hi or self.ends[pos] != b:
            raise KeyError(f"interval ({a},{b}) is not a candidate")
        return int(pos)


def background_grid(covariates: CovariateVector, max_len: Optional[int] = None) -> CandidateGrid:
    """
    Candidate grid for the alternating maximization

    Intervals are capped at n - 1 bins so that every selection leaves
    background pairs for the beta update; a smaller max_len caps further.
    """
    cap = covariates.n - 1 if max_len is None else min(max_len, covariates.n - 1)
    return CandidateGrid.from_covariates(covariates, max_len=cap)


@dataclass
class ModelParams:
    """Background probability and per-interval connectivities"""

    beta: float
    alphas: Dict[Interval, float] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class ObjectiveCoefficients:
    """Coefficient c_ab of pi_ab in the likelihood, aligned with a CandidateGrid"""

    values: np.ndarray

    def as_dict(self, grid: CandidateGrid) -> Dict[Interval, float]:
        return dict(zip(grid.intervals, self.values.tolist()))


@dataclass(frozen=True, eq=False)
class LpSolution:
    """pi over the grid (integral), the selected intervals and the LP objective

    scores holds the coefficient of each selected interval, in the same order.
    """

    pi: np.ndarray
    selected: Tuple[Interval, ...]
    objective_value: float
    scores: Tuple[float, ...] = ()

    def as_dict(self, grid: CandidateGrid) -> Dict[Interval, float]:
        return dict(zip(grid.intervals, self.pi.tolist()))

    @classmethod
    def empty(cls, grid_size: int) -> "LpSolution":
        return cls(pi=np.zeros(grid_size), selected=(), objective_value=0.0)


@dataclass
class AscentTrace:
    """Per-iteration history of the alternating maximization"""

    betas: List[List[float]] = field(default_factory=list)
    objectives: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


class AscentResult(NamedTuple):
    solution: LpSolution
    params: object
    trace: AscentTrace


# ---------------------------------------------------------------------------
# Estimates and coefficients
# ---------------------------------------------------------------------------

def kl_bernoulli(s: float, t: float) -> float:
    """Kullback-Leibler divergence between Bernoulli(s) and Bernoulli(t)"""
    if not 0.0 <= s <= 1.0:
        raise ValidationError(f"s must lie in [0, 1], got {s}")
    if not 0.0 < t < 1.0:
        raise ValidationError(f"t must lie in (0, 1), got {t}")
    return float(xlogy(s, s / t) + xlogy(1.0 - s, (1.0 - s) / (1.0 - t)))


def alpha_hat(prefix: IntervalPrefixSums, a: int, b: int) -> float:
    """
    Plug-in connectivity of [a, b]: edge density over ordered off-diagonal pairs

    The denominator is m(m-1) rather than (b-a)^2 so a complete interval maps
    to 1 (then clamped) instead of exceeding it.
    """
    if a >= b:
        raise ValidationError(f"alpha_hat needs a < b, got [{a},{b}]")
    prefix._check(a, b)
    m = b - a + 1
    return float(clamp_probability(prefix.block_edges(a, b) / (m * (m - 1))))


def alpha_hat_grid(prefix: IntervalPrefixSums, grid: CandidateGrid) -> np.ndarray:
    if len(grid) == 0:
        return np.zeros(0)
    return clamp_probability(prefix.block_edges(grid.starts, grid.ends) / grid.pair_counts)


def _coefficients(E: np.ndarray, D: np.ndarray, beta: float) -> np.ndarray:
    alpha = clamp_probability(E / D)
    return 0.5 * (E * np.log(alpha * (1.0 - beta) / ((1.0 - alpha) * beta))
                  + D * np.log((1.0 - alpha) / (1.0 - beta)))


def _check_beta(beta: float) -> None:
    if not 0.0 < beta < 1.0:
        raise ValidationError(f"beta must lie in (0, 1), got {beta}")


def objective_coefficients(prefix: IntervalPrefixSums, grid: CandidateGrid, beta: float) -> ObjectiveCoefficients:
    """
    Linear coefficients of the relaxed likelihood in pi for a fixed beta

    c_ab = 1/2 [E_ab log(alpha(1-beta) / ((1-alpha) beta)) + D_ab log((1-alpha)/(1-beta))]
    """
    _check_beta(beta)
    if len(grid) == 0:
        return ObjectiveCoefficients(np.zeros(0))
    E = prefix.block_edges(grid.starts, grid.ends).astype(np.float64)
    return ObjectiveCoefficients(_coefficients(E, grid.pair_counts.astype(np.float64), beta))


def beta_update(prefix: IntervalPrefixSums, solution: LpSolution, grid: CandidateGrid) -> float:
    """
    Background probability maximizing the likelihood for a fixed selection

    Raises:
        DegenerateSelectionError: The selection leaves no background pairs
    """
    n = prefix.n
    chosen = np.flatnonzero(solution.pi)
    weights = solution.pi[chosen]
    e_sel = float(np.sum(weights * prefix.block_edges(grid.starts[chosen], grid.ends[chosen])))
    d_sel = float(np.sum(weights * grid.pair_counts[chosen]))

    denominator = n * (n - 1) - d_sel
    if denominator <= 0:
        raise DegenerateSelectionError(
            "selected intervals cover every pair; lower K or exclude the full-span interval"
        )
    return float(clamp_probability((prefix.total_edges - e_sel) / denominator))


def default_beta0(prefix: IntervalPrefixSums, grid: CandidateGrid) -> float:
    """
    Starting beta: the global edge density, kept below the typical
    connectivity of the densest tenth of candidate intervals

    At this beta the full span has coefficient zero, so a union of segments
    never outscores the segments themselves at the first solve.
    """
    n = prefix.n
    if n < 2:
        return EPS
    density = prefix.total_edges / (n * (n - 1))
    beta0 = density
    if len(grid):
        cap = float(np.quantile(alpha_hat_grid(prefix, grid), 0.9))
        if beta0 >= cap:
            beta0 = 0.5 * (density + cap)
    return float(clamp_probability(beta0))


def relaxed_objective(prefix: IntervalPrefixSums, solution: LpSolution, grid: CandidateGrid, beta: float) -> float:
    """Relaxed log-likelihood at (pi, beta) with plug-in alphas"""
    _check_beta(beta)
    n = prefix.n
    chosen = np.flatnonzero(solution.pi)
    weights = solution.pi[chosen]
    E = prefix.block_edges(grid.starts[chosen], grid.ends[chosen]).astype(np.float64)
    D = grid.pair_counts[chosen].astype(np.float64)
    alpha = clamp_probability(E / D) if chosen.size else np.zeros(0)

    inside = np.sum(weights * (E * np.log(alpha) + (D - E) * np.log(1.0 - alpha)))
    e_bg = prefix.total_edges - np.sum(weights * E)
    d_bg = n * (n - 1) - np.sum(weights * D)
    background = e_bg * np.log(beta) + (d_bg - e_bg) * np.log(1.0 - beta)
    return float(0.5 * (inside + background))


def log_likelihood(adjacency: BinaryAdjacency, selection: LpSolution, params: ModelParams) -> float:
    """
    Block-model log-likelihood, evaluated pair by pair

    Pairs inside a selected interval use its alpha, every other off-diagonal
    pair uses beta. Deliberately independent of the prefix-sum machinery.
    """
    n = adjacency.n
    P = np.full((n, n), float(params.beta))
    covered = np.zeros(n, dtype=bool)
    for a, b in selection.selected:
        if covered[a:b + 1].any():
            raise ValidationError(f"selection is infeasible: [{a},{b}] overlaps another interval")
        covered[a:b + 1] = True
        try:
            P[a:b + 1, a:b + 1] = params.alphas[(a, b)]
        except KeyError:
            raise ValidationError(f"no alpha for selected interval [{a},{b}]")
    if np.any(P <= 0) or np.any(P >= 1):
        raise ValidationError("model probabilities must lie in (0, 1)")

    A = adjacency.edges.astype(np.float64)
    terms = A * np.log(P) + (1.0 - A) * np.log(1.0 - P)
    np.fill_diagonal(terms, 0.0)
    return float(0.5 * terms.sum())


# ---------------------------------------------------------------------------
# Interval LP
# ---------------------------------------------------------------------------

def _solve_dp(values: np.ndarray, grid: CandidateGrid, K: int) -> LpSolution:
    n = grid.n
    idx = np.flatnonzero(values > 0)
    if K == 0 or idx.size == 0:
        return LpSolution.empty(len(grid))

    starts, ends, vals = grid.starts[idx], grid.ends[idx], values[idx]
    group_starts, first = np.unique(starts, return_index=True)
    bounds = np.append(first, idx.size)
    groups = {int(s): (int(bounds[g]), int(bounds[g + 1])) for g, s in enumerate(group_starts)}

    # G[k, j]: best value from at most k intervals inside positions [j, n)
    k_max = min(K, idx.size)
    G = np.zeros((k_max + 1, n + 1))
    for k in range(1, k_max + 1):
        prev, row = G[k - 1], G[k]
        for j in range(n - 1, -1, -1):
            best = row[j + 1]
            span = groups.get(j)
            if span is not None:
                lo, hi = span
                candidate = float(np.max(vals[lo:hi] + prev[ends[lo:hi] + 1]))
                if candidate > best:
                    best = candidate
            row[j] = best

    value = G[k_max, 0]
    if value <= 0:
        return LpSolution.empty(len(grid))
    slack = 1e-9 * max(1.0, abs(value))
    # fewest intervals reaching the optimum
    k_star = int(np.argmax(G[:, 0] >= value - slack))

    picked: List[int] = []
    j, k, target = 0, k_star, value
    while k > 0 and target > slack:
        choice = None
        for s in group_starts[group_starts >= j]:
            lo, hi = groups[int(s)]
            ok = np.flatnonzero(vals[lo:hi] + G[k - 1][ends[lo:hi] + 1] >= target - slack)
            if ok.size:
                choice = lo + int(ok[0])
                break
        if choice is None:
            logger.warning("Interval DP traceback stopped early (numerical slack exhausted)")
            break
        picked.append(choice)
        target -= vals[choice]
        k -= 1
        j = int(ends[choice]) + 1

    pi = np.zeros(len(grid))
    pi[idx[picked]] = 1.0
    selected = tuple((int(starts[p]), int(ends[p])) for p in picked)
    return LpSolution(pi=pi, selected=selected, objective_value=float(np.sum(vals[picked])),
                      scores=tuple(float(vals[p]) for p in picked))


def _solve_linprog(values: np.ndarray, grid: CandidateGrid, K: int) -> LpSolution:
    size = len(grid)
    lengths = grid.ends - grid.starts + 1
    cols = np.repeat(np.arange(size), lengths)
    rows = np.concatenate([np.arange(a, b + 1) for a, b in zip(grid.starts, grid.ends)])
    coverage = sparse.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(grid.n, size))
    A_ub = sparse.vstack([coverage, sparse.csr_matrix(np.ones((1, size)))], format="csr")
    b_ub = np.append(np.ones(grid.n), K)

    result = linprog(-values, A_ub=A_ub, b_ub=b_ub, bounds=(0.0, 1.0), method="highs-ds")
    if result.status != 0:
        raise TadlpError(f"interval LP failed: {result.message}")

    pi = np.asarray(result.x)
    if np.max(np.abs(pi - np.round(pi))) > 1e-6:
        raise TadlpError("interval LP returned a fractional vertex")
    pi = np.round(pi)
    # zero-coefficient intervals add nothing; drop them like the DP does
    pi[values <= 0] = 0.0
    chosen = np.flatnonzero(pi)
    selected = tuple((int(grid.starts[c]), int(grid.ends[c])) for c in chosen)
    return LpSolution(pi=pi, selected=selected, objective_value=float(np.sum(values[chosen])),
                      scores=tuple(float(values[c]) for c in chosen))


def solve_interval_lp(coefficients: ObjectiveCoefficients, grid: CandidateGrid, K: int,
                      method: str = "dp") -> LpSolution:
    """
    Maximize sum c_ab pi_ab subject to sum pi <= K and per-position coverage <= 1

    Args:
        coefficients: Coefficients aligned with the grid
        grid: Candidate intervals
        K: Cardinality bound
        method: "dp" (exact DP, deterministic ties: fewest intervals, then the
            lexicographically smallest list) or "linprog" (HiGHS simplex vertex)

    Returns:
        Integral LpSolution with pairwise non-overlapping selected intervals
    """
    if K < 0:
        raise ValidationError(f"K must be >= 0, got {K}")
    values = np.asarray(coefficients.values, dtype=np.float64)
    if values.shape != (len(grid),):
        raise ValidationError("coefficients are not aligned with the grid")
    if len(grid) == 0 or K == 0:
        return LpSolution.empty(len(grid))
    if not np.all(np.isfinite(values)):
        raise ValidationError("objective coefficients must be finite")

    if method == "dp":
        return _solve_dp(values, grid, K)
    if method == "linprog":
        return _solve_linprog(values, grid, K)
    raise ValueError(f"unknown LP method: {method}")


# ---------------------------------------------------------------------------
# Alternating maximization
# ---------------------------------------------------------------------------

def _ascend(prefixes: Sequence[IntervalPrefixSums], grid: CandidateGrid, K: int,
            betas: List[float], tol: float, max_iter: int, method: str) -> AscentResult:
    D = grid.pair_counts.astype(np.float64)
    counts = [P.block_edges(grid.starts, grid.ends).astype(np.float64) for P in prefixes]
    trace = AscentTrace()

    solution, current = LpSolution.empty(len(grid)), list(betas)
    for iteration in range(1, max_iter + 1):
        for beta in current:
            _check_beta(beta)
        if len(grid):
            values = np.sum(np.stack([_coefficients(E, D, b) for E, b in zip(counts, current)]), axis=0)
        else:
            values = np.zeros(0)
        solution = solve_interval_lp(ObjectiveCoefficients(values), grid, K, method=method)
        updated = [beta_update(P, solution, grid) for P in prefixes]

        objective = sum(relaxed_objective(P, solution, grid, b) for P, b in zip(prefixes, updated))
        delta = max(abs(new - old) for new, old in zip(updated, current))
        trace.betas.append(updated)
        trace.objectives.append(objective)
        trace.iterations = iteration
        current = updated

        logger.debug(f"Ascent iteration {iteration}: {len(solution.selected)} intervals, "
                     f"max |delta beta| = {delta:.3e}")
        if delta < tol:
            trace.converged = True
            break

    if not trace.converged:
        logger.warning(f"Alternating maximization stopped after {max_iter} iterations without converging")

    params = []
    for E, beta in zip(counts, current):
        alphas = {}
        for a, b in solution.selected:
            g = grid.index_of(a, b)
            alphas[(a, b)] = float(clamp_probability(E[g] / D[g]))
        params.append(ModelParams(beta=beta, alphas=alphas))
    return AscentResult(solution=solution, params=params, trace=trace)


def joint_alternate_maximize(adjacencies: Sequence[BinaryAdjacency], covariates: CovariateVector, K: int,
                             beta0s: Optional[Sequence[Optional[float]]] = None, tol: float = 1e-6,
                             max_iter: int = 50, max_len: Optional[int] = None,
                             method: str = "dp") -> AscentResult:
    """
    Shared interval selection across independent cell types

    The LP coefficients are the per-cell-type coefficients summed; each cell
    type keeps its own alphas and beta, updated independently.

    Args:
        adjacencies: One adjacency per cell type, all with the same n
        covariates: Intersected peak vector
        K: Cardinality bound
        beta0s: Starting betas (None entries use default_beta0)
        tol: Convergence threshold on max |delta beta|
        max_iter: Iteration cap; the last iterate is returned flagged non-converged
        max_len: Longest candidate interval; never more than n - 1 bins
        method: LP backend

    Returns:
        AscentResult whose params is a list of ModelParams, one per cell type
    """
    if not adjacencies:
        raise ValidationError("need at least one adjacency")
    sizes = {A.n for A in adjacencies}
    if len(sizes) != 1 or covariates.n not in sizes:
        raise ValidationError("adjacencies and covariates must share the same bins")

    grid = background_grid(covariates, max_len=max_len)
    prefixes = [IntervalPrefixSums.build(A) for A in adjacencies]
    if beta0s is None:
        beta0s = [None] * len(prefixes)
    if len(beta0s) != len(prefixes):
        raise ValidationError("need one starting beta per cell type")
    betas = [default_beta0(P, grid) if b is None else float(b) for P, b in zip(prefixes, beta0s)]
    return _ascend(prefixes, grid, K, betas, tol, max_iter, method)


def alternate_maximize(adjacency: BinaryAdjacency, covariates: CovariateVector, K: int,
                       beta0: Optional[float] = None, tol: float = 1e-6, max_iter: int = 50,
                       max_len: Optional[int] = None, method: str = "dp") -> AscentResult:
    """
    Alternate LP selection and beta updates until beta settles

    Returns:
        AscentResult(solution, params, trace) for the single cell type
    """
    result = joint_alternate_maximize([adjacency], covariates, K, beta0s=[beta0], tol=tol,
                                      max_iter=max_iter, max_len=max_len, method=method)
    return AscentResult(solution=result.solution, params=result.params[0], trace=result.trace)


def saturation_curve(adjacency: BinaryAdjacency, covariates: CovariateVector, Ks: Sequence[int],
                     beta0: Optional[float] = None) -> List[Tuple[int, int]]:
    """Selected-interval count of a single LP solve at beta0, for each K"""
    prefix = IntervalPrefixSums.build(adjacency)
    grid = background_grid(covariates)
    beta = default_beta0(prefix, grid) if beta0 is None else beta0
    coefficients = objective_coefficients(prefix, grid, beta)
    return [(int(K), len(solve_interval_lp(coefficients, grid, int(K)).selected)) for K in Ks]


def choose_k_by_saturation(adjacency: BinaryAdjacency, covariates: CovariateVector, k_max: int = 30,
                           patience: int = 3, beta0: Optional[float] = None) -> int:
    """Smallest K after which the selected count stays flat for `patience` more steps"""
    curve = saturation_curve(adjacency, covariates, range(1, k_max + 1), beta0=beta0)
    counts = [count for _, count in curve]
    for i in range(len(counts) - patience):
        if len(set(counts[i:i + patience + 1])) == 1:
            return curve[i][0]
    return k_max
