"""
Synthetic instances and the spectral-clustering baseline

Block-model adjacencies with planted contiguous TADs, distance-decay contact
matrices with (nested) domains, the fixed-degree signal-to-noise sweep, and
the accuracy metric used to compare interval selections with spectral
clustering.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, eigh
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from src.core.lpopt import alternate_maximize
from src.data.contact_data import BinaryAdjacency, ContactMatrix, CovariateVector
from src.utils.errors import TadlpError, ValidationError
from src.utils.sweep_tracker import SweepTracker

logger = logging.getLogger("tadlp.simulate")

Interval = Tuple[int, int]

DEFAULT_R_VALUES = (1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0)


@dataclass(frozen=True)
class BlockSpec:
    """Planted TADs with their connectivities over a uniform background"""

    n: int
    tads: Tuple[Tuple[Interval, float], ...]
    beta: float
    seed: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError(f"beta must lie in [0, 1], got {self.beta}")
        previous_end = -1
        for (a, b), alpha in self.tads:
            if not previous_end < a < b < self.n:
                raise ValidationError(f"TAD [{a},{b}] is out of order, overlapping or out of range")
            if not self.beta <= alpha <= 1.0:
                raise ValidationError(f"TAD [{a},{b}] needs beta <= alpha <= 1, got alpha={alpha}")
            previous_end = b

    @property
    def intervals(self) -> List[Interval]:
        return [interval for interval, _ in self.tads]

    def segments(self) -> List[Interval]:
        """TADs and the background stretches between them, covering [0, n)"""
        pieces, cursor = [], 0
        for a, b in self.intervals:
            if a > cursor:
                pieces.append((cursor, a - 1))
            pieces.append((a, b))
            cursor = b + 1
        if cursor < self.n:
            pieces.append((cursor, self.n - 1))
        return pieces


@dataclass(frozen=True)
class SnrSweepSpec:
    """Fixed-degree sweep: alpha = r * beta with x * alpha + (1 - x) * beta = rho"""

    n: int = 240
    fractions: Tuple[float, ...] = (0.3, 0.3, 0.1, 0.2)
    rho: float = 0.1
    r_values: Tuple[float, ...] = DEFAULT_R_VALUES

    @property
    def x(self) -> float:
        return float(sum(m * m for m in self.fractions))

    def probabilities(self, r: float) -> Tuple[float, float]:
        beta = self.rho / (self.x * r + 1.0 - self.x)
        return r * beta, beta


@dataclass(frozen=True, eq=False)
class DecaySpec:
    """
    Contact weights decaying with distance

    background[d] is the weight at distance d outside every domain; each
    domain (a, b, profile) overrides it inside [a, b], the smallest
    containing domain winning for nested layouts.
    """

    n: int
    background: np.ndarray
    domains: Tuple[Tuple[int, int, np.ndarray], ...] = ()
    noise_sd: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.background.shape != (self.n,):
            raise ValidationError("background table needs one value per distance 0..n-1")
        if self.noise_sd < 0:
            raise ValidationError(f"noise_sd must be >= 0, got {self.noise_sd}")
        tables = [self.background] + [profile for _, _, profile in self.domains]
        for table in tables:
            if np.any(np.diff(table) > 0):
                raise ValidationError("decay tables must be non-increasing")
        for a, b, profile in self.domains:
            if not 0 <= a < b < self.n or profile.shape[0] < b - a + 1:
                raise ValidationError(f"domain [{a},{b}] is out of range or its table is too short")
            span = b - a + 1
            if np.any(profile[:span] <= self.background[:span]):
                raise ValidationError(f"domain [{a},{b}] profile must exceed the background")


# ---------------------------------------------------------------------------
# Block-model instances
# ---------------------------------------------------------------------------

def sample_block_adjacency(spec: BlockSpec) -> BinaryAdjacency:
    """Independent Bernoulli edges: alpha_k inside TAD k, beta elsewhere"""
    n = spec.n
    P = np.full((n, n), spec.beta)
    for (a, b), alpha in spec.tads:
        P[a:b + 1, a:b + 1] = alpha
    rng = np.random.default_rng(spec.seed)
    upper = np.triu(rng.random((n, n)) < P, k=1)
    return BinaryAdjacency((upper | upper.T).astype(np.int8))


def _contiguous_layout(n: int, fractions: Sequence[float]) -> List[Interval]:
    sizes = [int(round(f * n)) for f in fractions]
    if sum(sizes) >= n:
        raise ValidationError("TAD fractions leave no background")
    intervals, cursor = [], 0
    for size in sizes:
        intervals.append((cursor, cursor + size - 1))
        cursor += size
    return intervals


def snr_sweep_spec(r: float, seed: Optional[int] = None, sweep: SnrSweepSpec = SnrSweepSpec()) -> BlockSpec:
    """
    Sweep instance at ratio r

    TADs are laid out contiguously in fraction order from bin 0, the
    remaining bins trailing as background.
    """
    if r < 1:
        raise ValidationError(f"r must be >= 1, got {r}")
    alpha, beta = sweep.probabilities(r)
    if alpha >= 1:
        raise ValidationError(f"r={r} is too large for rho={sweep.rho}: alpha={alpha:.3f}")
    tads = tuple((interval, alpha) for interval in _contiguous_layout(sweep.n, sweep.fractions))
    return BlockSpec(n=sweep.n, tads=tads, beta=beta, seed=seed)


def planted_block_spec(n: int, alpha: float = 0.3, beta: float = 0.05,
                       fractions: Sequence[float] = (0.3, 0.3, 0.1, 0.2), seed: Optional[int] = None) -> BlockSpec:
    tads = tuple((interval, alpha) for interval in _contiguous_layout(n, fractions))
    return BlockSpec(n=n, tads=tads, beta=beta, seed=seed)


def three_tad_spec(n: int = 200, alpha: float = 0.5, beta: float = 0.03, seed: Optional[int] = None) -> BlockSpec:
    """Three TADs separated by background: three TADs plus four inter-TAD stretches"""
    layout = [(15, 64), (80, 139), (155, 184)]
    tads = tuple(((a * n // 200, (b + 1) * n // 200 - 1), alpha) for a, b in layout)
    return BlockSpec(n=n, tads=tads, beta=beta, seed=seed)


def boundary_covariates(spec: BlockSpec) -> CovariateVector:
    """CTCF sites at the first and last bin of every TAD and background stretch"""
    peaks = np.zeros(spec.n, dtype=np.int8)
    for a, b in spec.segments():
        peaks[a] = peaks[b] = 1
    return CovariateVector(peaks)


SITE_LAYOUTS = ("boundaries", "all")


def simulation_covariates(spec: BlockSpec, sites: str = "boundaries") -> CovariateVector:
    """
    CTCF sites for a block-model instance

    "boundaries" marks the segment ends only; "all" marks every bin, so every
    interval is a candidate and the grid carries no hint of the truth.
    """
    if sites == "boundaries":
        return boundary_covariates(spec)
    if sites == "all":
        return CovariateVector.all_ones(spec.n)
    raise ValidationError(f"unknown site layout: {sites} (expected one of {SITE_LAYOUTS})")


def truth_labels(spec: BlockSpec) -> np.ndarray:
    """TAD k is labelled k; background bins get label len(tads)"""
    labels = np.full(spec.n, len(spec.tads), dtype=np.int64)
    for k, (a, b) in enumerate(spec.intervals):
        labels[a:b + 1] = k
    return labels


def selection_to_labels(selected: Sequence[Interval], n: int) -> np.ndarray:
    """Number selected intervals in order; unselected bins share one extra label"""
    labels = np.full(n, len(selected), dtype=np.int64)
    for k, (a, b) in enumerate(selected):
        labels[a:b + 1] = k
    return labels


def is_contiguous(labels: Sequence[int], background: Optional[int] = None) -> bool:
    """True when every label (except background) occupies a single run of bins"""
    labels = np.asarray(labels)
    for label in np.unique(labels):
        if background is not None and label == background:
            continue
        positions = np.flatnonzero(labels == label)
        if positions[-1] - positions[0] + 1 != positions.size:
            return False
    return True


# ---------------------------------------------------------------------------
# Decay-model instances
# ---------------------------------------------------------------------------

def sample_decay_matrix(spec: DecaySpec) -> ContactMatrix:
    """M_ij = table(|i - j|) + Gaussian noise truncated at 0, symmetric"""
    n = spec.n
    idx = np.arange(n)
    distance = np.abs(idx[:, None] - idx[None, :])
    M = spec.background[distance].astype(np.float64)
    # larger domains first so nested ones overwrite them
    for a, b, profile in sorted(spec.domains, key=lambda dom: dom[0] - dom[1]):
        M[a:b + 1, a:b + 1] = profile[distance[a:b + 1, a:b + 1]]

    if spec.noise_sd > 0:
        rng = np.random.default_rng(spec.seed)
        noise = np.triu(rng.normal(0.0, spec.noise_sd, size=(n, n)))
        noise = noise + np.triu(noise, k=1).T
        M = np.maximum(M + noise, 0.0)
    return ContactMatrix(M)


def _exp_table(n: int, scale: float, length: float) -> np.ndarray:
    return scale * np.exp(-np.arange(n) / length)


def nested_decay_spec(seed: Optional[int] = None, noise_sd: float = 0.5) -> Tuple[DecaySpec, CovariateVector]:
    """Two outer TADs, each holding one sub-TAD, with CTCF sites at every planted boundary"""
    n = 300
    outer = [(50, 109), (180, 239)]
    inner = [(65, 94), (195, 224)]
    domains = tuple((a, b, _exp_table(n, 5.0, 300.0)) for a, b in outer) + \
        tuple((a, b, _exp_table(n, 10.0, 300.0)) for a, b in inner)
    spec = DecaySpec(n=n, background=_exp_table(n, 4.0, 3.0), domains=domains, noise_sd=noise_sd, seed=seed)

    peaks = np.zeros(n, dtype=np.int8)
    for a, b in outer + inner:
        peaks[a] = peaks[b] = 1
    return spec, CovariateVector(peaks)


def chromosome_decay_spec(n: int = 2000, seed: Optional[int] = None,
                          noise_sd: float = 0.5) -> Tuple[DecaySpec, CovariateVector]:
    """A run of TADs (20-45 bins) separated by gaps (15-40 bins), CTCF sites at TAD ends"""
    rng = np.random.default_rng(seed)
    profile = _exp_table(n, 5.0, 300.0)
    domains, peaks = [], np.zeros(n, dtype=np.int8)
    cursor = int(rng.integers(15, 41))
    while True:
        size = int(rng.integers(20, 46))
        if cursor + size > n:
            break
        a, b = cursor, cursor + size - 1
        domains.append((a, b, profile))
        peaks[a] = peaks[b] = 1
        cursor = b + 1 + int(rng.integers(15, 41))
    spec = DecaySpec(n=n, background=_exp_table(n, 4.0, 3.0), domains=tuple(domains), noise_sd=noise_sd, seed=seed)
    return spec, CovariateVector(peaks)


# ---------------------------------------------------------------------------
# Spectral baseline and accuracy
# ---------------------------------------------------------------------------

def spectral_cluster(adjacency: BinaryAdjacency, K: int, seed: int = 0) -> np.ndarray:
    """
    Degree-regularized spectral clustering

    Embeds nodes with the K leading eigenvectors of
    (D + tau I)^-1/2 A (D + tau I)^-1/2, tau the mean degree, then runs
    K-means with 10 seeded restarts.

    Args:
        adjacency: Binary adjacency
        K: Number of clusters (>= 2)
        seed: K-means random state

    Returns:
        One label per node
    """
    if K < 2:
        raise ValidationError(f"spectral clustering needs K >= 2, got {K}")
    n = adjacency.n
    if K > n:
        raise ValidationError(f"K={K} exceeds the number of nodes {n}")
    A = adjacency.edges.astype(np.float64)
    degree = A.sum(axis=1)
    tau = max(degree.mean(), 1e-12)
    scale = 1.0 / np.sqrt(degree + tau)
    L = scale[:, None] * A * scale[None, :]
    try:
        _, vectors = eigh(L, subset_by_index=[n - K, n - 1])
    except LinAlgError as e:
        raise TadlpError(f"eigen-decomposition failed: {e}")
    km = KMeans(n_clusters=K, n_init=10, random_state=seed)
    return km.fit_predict(vectors)


def clustering_accuracy(labels: Sequence[int], truth: Sequence[int]) -> float:
    """Best-permutation fraction of correctly labelled nodes (Hungarian matching)"""
    labels, truth = np.asarray(labels), np.asarray(truth)
    if labels.shape != truth.shape:
        raise ValidationError(f"label vectors differ in length: {labels.size} vs {truth.size}")
    if labels.size == 0:
        return 1.0
    confusion = pd.crosstab(labels, truth).to_numpy()
    rows, cols = linear_sum_assignment(-confusion)
    return float(confusion[rows, cols].sum() / labels.size)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _sweep_point(r: float, seed: int, K: int, sweep: SnrSweepSpec, sites: str) -> List[Tuple[float, str, int, float]]:
    spec = snr_sweep_spec(r, seed=seed, sweep=sweep)
    A = sample_block_adjacency(spec)
    truth = truth_labels(spec)

    selection = alternate_maximize(A, simulation_covariates(spec, sites), K).solution
    lp_labels = selection_to_labels(selection.selected, spec.n)
    spectral_labels = spectral_cluster(A, len(spec.tads) + 1, seed=seed)
    return [
        (r, "lp-opt", seed, clustering_accuracy(lp_labels, truth)),
        (r, "spectral", seed, clustering_accuracy(spectral_labels, truth)),
    ]


def run_snr_sweep(r_values: Sequence[float] = DEFAULT_R_VALUES, seeds: Sequence[int] = tuple(range(30)),
                  K: int = 5, sweep: SnrSweepSpec = SnrSweepSpec(), threads: int = 1,
                  tracker: Optional[SweepTracker] = None, sites: str = "boundaries") -> pd.DataFrame:
    """
    Accuracy of interval selection vs spectral clustering across ratios

    sites picks the CTCF layout handed to the interval selection (see
    simulation_covariates); spectral clustering never sees it.

    Returns:
        DataFrame with columns r, method, seed, accuracy
    """
    if sites not in SITE_LAYOUTS:
        raise ValidationError(f"unknown site layout: {sites} (expected one of {SITE_LAYOUTS})")
    tracker = tracker if tracker is not None else SweepTracker()
    points = [(r, seed) for r in r_values for seed in seeds]
    logger.info(f"SNR sweep: {len(r_values)} ratios x {len(seeds)} seeds, sites at {sites}")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = list(executor.map(lambda point: _sweep_point(point[0], point[1], K, sweep, sites), points))
    for rows in results:
        for row in rows:
            tracker.log_result(*row)
    return tracker.to_frame()
