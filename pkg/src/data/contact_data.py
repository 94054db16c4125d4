"""
Contact data

Loading, balancing and binarizing Hi-C contact matrices, CTCF covariate
tracks, and constant-time interval edge counts via 2D prefix sums.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import ConvergenceError, ParseError, ValidationError

logger = logging.getLogger("tadlp.contact_data")

Region = Tuple[str, int, int]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True, order="C")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ContactMatrix:
    """Symmetric non-negative contact weights over consecutive genome bins"""

    weights: np.ndarray
    resolution: int = 1
    region_offset: int = 0
    chrom: str = "chr"
    dropped_entries: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise ValidationError(f"contact matrix must be square with n >= 1, got shape {w.shape}")
        if self.resolution < 1:
            raise ValidationError(f"resolution must be >= 1, got {self.resolution}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("contact matrix contains non-finite values")
        if np.any(w < 0):
            raise ValidationError("contact matrix contains negative weights")
        if not np.array_equal(w, w.T):
            raise ValidationError("contact matrix is not symmetric")
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def submatrix(self, start: int, end: int) -> "ContactMatrix":
        """Bins [start, end) as a new matrix, genome offset shifted accordingly"""
        if not 0 <= start < end <= self.n:
            raise ValidationError(f"invalid sub-range [{start},{end}) for n={self.n}")
        return ContactMatrix(
            weights=self.weights[start:end, start:end],
            resolution=self.resolution,
            region_offset=self.region_offset + start * self.resolution,
            chrom=self.chrom,
        )

    def bin_start(self, i: int) -> int:
        return self.region_offset + i * self.resolution


@dataclass(frozen=True, eq=False)
class BinaryAdjacency:
    """Thresholded symmetric 0/1 matrix with an empty diagonal"""

    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValidationError(f"adjacency must be square, got shape {e.shape}")
        if not np.all((e == 0) | (e == 1)):
            raise ValidationError("adjacency entries must be 0 or 1")
        e = e.astype(np.int8)
        if np.any(np.diagonal(e) != 0):
            raise ValidationError("adjacency diagonal must be zero")
        if not np.array_equal(e, e.T):
            raise ValidationError("adjacency is not symmetric")
        object.__setattr__(self, "edges", _frozen(e))

    @property
    def n(self) -> int:
        return self.edges.shape[0]

    def submatrix(self, start: int, end: int) -> "BinaryAdjacency":
        return BinaryAdjacency(self.edges[start:end, start:end])


@dataclass(frozen=True, eq=False)
class CovariateVector:
    """Binary per-bin CTCF indicator"""

    peaks: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.peaks)
        if p.ndim != 1:
            raise ValidationError("covariate vector must be one-dimensional")
        if not np.all((p == 0) | (p == 1)):
            raise ValidationError("covariate entries must be 0 or 1")
        object.__setattr__(self, "peaks", _frozen(p.astype(np.int8)))

    @property
    def n(self) -> int:
        return self.peaks.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.peaks)

    def submatrix(self, start: int, end: int) -> "CovariateVector":
        return CovariateVector(self.peaks[start:end])

    @classmethod
    def all_ones(cls, n: int) -> "CovariateVector":
        return cls(np.ones(n, dtype=np.int8))


@dataclass(frozen=True, eq=False)
class IntervalPrefixSums:
    """
    2D cumulative sums of an adjacency (and optionally of raw weights)

    edge_cum[i, j] holds the sum of edges[:i, :j]; any square block sum is
    then four lookups.
    """

    n: int
    edge_cum: np.ndarray
    weight_cum: Optional[np.ndarray] = None
    diag_cum: Optional[np.ndarray] = None
    total_edges: int = field(default=0)

    @classmethod
    def build(cls, adjacency: BinaryAdjacency, contacts: Optional[ContactMatrix] = None) -> "IntervalPrefixSums":
        n = adjacency.n
        edge_cum = np.zeros((n + 1, n + 1), dtype=np.int64)
        edge_cum[1:, 1:] = adjacency.edges.astype(np.int64).cumsum(axis=0).cumsum(axis=1)

        weight_cum = diag_cum = None
        if contacts is not None:
            if contacts.n != n:
                raise ValidationError(f"contact matrix has n={contacts.n}, adjacency has n={n}")
            weight_cum = np.zeros((n + 1, n + 1), dtype=np.float64)
            weight_cum[1:, 1:] = contacts.weights.cumsum(axis=0).cumsum(axis=1)
            diag_cum = np.concatenate([[0.0], np.cumsum(np.diagonal(contacts.weights))])
            weight_cum, diag_cum = _frozen(weight_cum), _frozen(diag_cum)

        return cls(
            n=n,
            edge_cum=_frozen(edge_cum),
            weight_cum=weight_cum,
            diag_cum=diag_cum,
            total_edges=int(edge_cum[n, n]),
        )

    def _check(self, a: int, b: int) -> None:
        if not (0 <= a <= b < self.n):
            raise ValidationError(f"interval [{a},{b}] out of range for n={self.n}")

    def block_edges(self, a, b):
        """Vectorized ordered-pair edge counts for arrays of inclusive intervals"""
        c = self.edge_cum
        return c[b + 1, b + 1] - c[a, b + 1] - c[b + 1, a] + c[a, a]

    def weight_sum(self, a: int, b: int) -> float:
        """Sum of off-diagonal raw weights over ordered pairs in [a, b]"""
        if self.weight_cum is None:
            raise ValidationError("prefix sums were built without contact weights")
        self._check(a, b)
        c = self.weight_cum
        block = c[b + 1, b + 1] - c[a, b + 1] - c[b + 1, a] + c[a, a]
        return float(block - (self.diag_cum[b + 1] - self.diag_cum[a]))


def interval_edge_count(prefix: IntervalPrefixSums, a: int, b: int) -> int:
    """
    Number of ordered pairs (i, j), i != j, inside [a, b] joined by an edge

    Args:
        prefix: Prefix sums of the adjacency
        a: First bin (inclusive)
        b: Last bin (inclusive)

    Returns:
        Twice the undirected edge count of the interval
    """
    prefix._check(a, b)
    return int(prefix.block_edges(a, b))


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _check_region(region: Region, resolution: int) -> Tuple[str, int, int]:
    chrom, start, end = region
    if resolution < 1:
        raise ValidationError(f"resolution must be >= 1, got {resolution}")
    if start < 0 or end <= start:
        raise ValidationError(f"invalid region {chrom}:{start}-{end}")
    if start % resolution or end % resolution:
        raise ValidationError(f"region {chrom}:{start}-{end} is not aligned to resolution {resolution}")
    return chrom, int(start), int(end)


def _data_lines(path: str):
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield line_number, line


def load_contact_matrix(path: str, resolution: int, region: Region, fmt: str = "auto") -> ContactMatrix:
    """
    Load a contact matrix for one region

    Args:
        path: Sparse triplet TSV (`bin_start_i  bin_start_j  value`, bp
            coordinates) or a dense TSV of the region's bins
        resolution: Base pairs per bin
        region: (chrom, start, end), bp, aligned to the resolution
        fmt: "triplet", "dense" or "auto" (three fields per line means triplet)

    Returns:
        Symmetric ContactMatrix covering [start, end)

    Raises:
        ParseError: Malformed line (message carries the line number)
        ValidationError: Negative counts or conflicting duplicate entries
    """
    chrom, start, end = _check_region(region, resolution)
    n = (end - start) // resolution

    lines = list(_data_lines(path))
    if fmt == "auto":
        fmt = "triplet" if not lines or len(lines[0][1].split()) == 3 else "dense"
    if fmt not in ("triplet", "dense"):
        raise ValueError(f"unknown contact format: {fmt}")

    if fmt == "dense":
        weights = _parse_dense(path, lines, n)
        return ContactMatrix(weights, resolution=resolution, region_offset=start, chrom=chrom)

    weights = np.zeros((n, n), dtype=np.float64)
    seen = np.zeros((n, n), dtype=bool)
    dropped = 0
    for line_number, line in lines:
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields, found {len(fields)}", path, line_number)
        try:
            pos_i, pos_j = int(fields[0]), int(fields[1])
            value = float(fields[2])
        except ValueError:
            raise ParseError(f"non-numeric field in '{line}'", path, line_number)
        if not np.isfinite(value):
            raise ParseError(f"non-finite count {fields[2]}", path, line_number)
        if value < 0:
            raise ValidationError(f"{path}:{line_number}: negative count {value}")
        if pos_i % resolution or pos_j % resolution:
            raise ParseError(f"bin coordinate not aligned to resolution {resolution}", path, line_number)
        if not (start <= pos_i < end and start <= pos_j < end):
            dropped += 1
            continue

        i, j = (pos_i - start) // resolution, (pos_j - start) // resolution
        if seen[i, j] and weights[i, j] != value:
            raise ValidationError(
                f"{path}:{line_number}: conflicting duplicate for bins ({pos_i},{pos_j}): "
                f"{weights[i, j]} vs {value}"
            )
        weights[i, j] = weights[j, i] = value
        seen[i, j] = seen[j, i] = True

    if dropped:
        logger.warning(f"Dropped {dropped} triplets outside {chrom}:{start}-{end} in {path}")
    return ContactMatrix(weights, resolution=resolution, region_offset=start, chrom=chrom,
                         dropped_entries=dropped)


def _parse_dense(path: str, lines, n: int) -> np.ndarray:
    if len(lines) != n:
        raise ParseError(f"dense matrix has {len(lines)} rows, region needs {n}", path)
    rows = []
    for line_number, line in lines:
        fields = line.split()
        if len(fields) != n:
            raise ParseError(f"expected {n} columns, found {len(fields)}", path, line_number)
        try:
            row = [float(x) for x in fields]
        except ValueError:
            raise ParseError("non-numeric field in row", path, line_number)
        if any(x < 0 for x in row):
            raise ValidationError(f"{path}:{line_number}: negative count")
        rows.append(row)
    weights = np.array(rows, dtype=np.float64)
    if not np.array_equal(weights, weights.T):
        raise ValidationError(f"{path}: dense matrix is not symmetric")
    return weights


def load_ctcf_bed(path: str, resolution: int, region: Region) -> CovariateVector:
    """
    Binarize a BED3+ peak file onto the bins of a region

    A bin is marked when at least one interval on the region's chromosome
    overlaps it (half-open coordinates).
    """
    chrom, start, end = _check_region(region, resolution)
    n = (end - start) // resolution
    peaks = np.zeros(n, dtype=np.int8)

    for line_number, line in _data_lines(path):
        if line.startswith(("track", "browser")):
            continue
        fields = line.split("\t") if "\t" in line else line.split()
        if len(fields) < 3:
            raise ParseError(f"BED line needs at least 3 fields, found {len(fields)}", path, line_number)
        try:
            peak_start, peak_end = int(fields[1]), int(fields[2])
        except ValueError:
            raise ParseError(f"non-integer coordinates in '{line}'", path, line_number)
        if peak_end <= peak_start or peak_start < 0:
            raise ParseError(f"empty or negative interval [{peak_start},{peak_end})", path, line_number)
        if fields[0] != chrom:
            continue

        lo, hi = max(peak_start, start), min(peak_end, end)
        if lo >= hi:
            continue
        first = (lo - start) // resolution
        last = (hi - 1 - start) // resolution
        peaks[first:last + 1] = 1

    return CovariateVector(peaks)


def intersect_covariates(vectors: Sequence[CovariateVector]) -> CovariateVector:
    """Elementwise AND of per-cell-type peak vectors"""
    if not vectors:
        raise ValidationError("need at least one covariate vector")
    lengths = {v.n for v in vectors}
    if len(lengths) != 1:
        raise ValidationError(f"covariate vectors differ in length: {sorted(lengths)}")
    combined = np.ones(vectors[0].n, dtype=np.int8)
    for vector in vectors:
        combined &= vector.peaks
    return CovariateVector(combined)


# ---------------------------------------------------------------------------
# Normalization and thresholding
# ---------------------------------------------------------------------------

def _row_sum_spread(v: np.ndarray) -> float:
    return float((v.max() - v.min()) / v.mean())


def kr_balance(matrix: ContactMatrix, tol: float = 1e-8, max_iter: int = 100) -> ContactMatrix:
    """
    Knight-Ruiz matrix balancing

    All-zero rows are masked before balancing and come back as zero rows.
    The balanced block is rescaled so its total mass matches the input.

    Args:
        matrix: Symmetric non-negative contact matrix
        tol: Allowed relative spread (max - min) / mean of unmasked row sums
        max_iter: Outer Newton iterations

    Returns:
        D * M * D with equal unmasked row sums

    Raises:
        ValidationError: Matrix has zero total mass
        ConvergenceError: Row sums still spread by more than tol
    """
    w = matrix.weights
    if w.sum() <= 0:
        raise ValidationError("cannot balance a matrix with zero total mass")

    keep = w.sum(axis=1) > 0
    A = w[np.ix_(keep, keep)]
    m = A.shape[0]

    e = np.ones(m)
    x = np.ones(m)
    Delta, delta, g, etamax = 3.0, 0.1, 0.9, 0.1
    eta = etamax
    rt = (0.25 * tol) ** 2

    v = x * (A @ x)
    rk = 1.0 - v
    rho_km1 = float(rk @ rk)
    rout = rold = rho_km1
    iterations = 0

    while _row_sum_spread(v) >= tol:
        if iterations >= max_iter:
            raise ConvergenceError("matrix balancing did not converge", _row_sum_spread(v), iterations)
        iterations += 1

        k = 0
        y = e.copy()
        innertol = max(eta ** 2 * rout, rt)
        while rho_km1 > innertol:
            k += 1
            if k == 1:
                Z = rk / v
                p = Z.copy()
                rho_km1 = float(rk @ Z)
            else:
                beta = rho_km1 / rho_km2
                p = Z + beta * p
            if k > 10:
                break

            w_dir = x * (A @ (x * p)) + v * p
            alpha = rho_km1 / float(p @ w_dir)
            ap = alpha * p
            # keep the step inside the cone [delta, Delta]
            ynew = y + ap
            if ynew.min() <= delta:
                ind = ap < 0
                gamma = np.min((delta - y[ind]) / ap[ind])
                y += gamma * ap
                break
            if ynew.max() >= Delta:
                ind = ynew > Delta
                gamma = np.min((Delta - y[ind]) / ap[ind])
                y += gamma * ap
                break

            y = ynew
            rk = rk - alpha * w_dir
            rho_km2 = rho_km1
            Z = rk / v
            rho_km1 = float(rk @ Z)

        x = x * y
        v = x * (A @ x)
        rk = 1.0 - v
        rho_km1 = float(rk @ rk)
        rout = rho_km1
        rat = rout / rold
        rold = rout
        res_norm = max(rout ** 0.5, 1e-300)
        eta_o = eta
        eta = g * rat
        if g * eta_o ** 2 > 0.1:
            eta = max(eta, g * eta_o ** 2)
        eta = max(min(eta, etamax), 0.5 * tol / res_norm)

    scale = np.zeros(w.shape[0])
    scale[keep] = x
    balanced = w * np.outer(scale, scale)
    balanced *= w.sum() / balanced.sum()

    logger.debug(f"Balanced {m} of {w.shape[0]} rows in {iterations} iterations")
    return ContactMatrix(balanced, resolution=matrix.resolution, region_offset=matrix.region_offset,
                         chrom=matrix.chrom, dropped_entries=matrix.dropped_entries)


def quantile_threshold(matrix: ContactMatrix, q: float) -> BinaryAdjacency:
    """
    Binarize contacts at the q-th quantile of the strict upper triangle

    A_ij = 1 iff M_ij > t; ties at t become 0 and the diagonal is always 0.
    """
    if not 0 < q < 1:
        raise ValidationError(f"quantile must lie in (0, 1), got {q}")
    n = matrix.n
    iu = np.triu_indices(n, k=1)
    values = matrix.weights[iu]
    if values.size == 0 or np.all(values == values[0]):
        logger.warning(f"Degenerate {n}x{n} matrix: all off-diagonal weights equal, adjacency is empty")
        return BinaryAdjacency(np.zeros((n, n), dtype=np.int8))

    t = np.quantile(values, q)
    edges = (matrix.weights > t).astype(np.int8)
    np.fill_diagonal(edges, 0)
    return BinaryAdjacency(edges)


def stack_contacts(matrices: List[ContactMatrix]) -> None:
    """Check that several contact matrices share the same bins"""
    if not matrices:
        raise ValidationError("need at least one contact matrix")
    first = matrices[0]
    for other in matrices[1:]:
        if (other.n, other.resolution, other.region_offset, other.chrom) != \
                (first.n, first.resolution, first.region_offset, first.chrom):
            raise ValidationError("contact matrices are not aligned to the same bins")
