"""Region partitions and the sparse aggregation matrix built from them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BACKGROUND = 0


def sample_seeds(rng: np.random.Generator, k: int, height: int, width: int) -> np.ndarray:
    """Draw ``k`` distinct pixel coordinates uniformly without replacement.

    Returns an int array of shape (k, 2) holding (row, col) pairs.
    """
    n_pix = height * width
    if not 1 <= k <= n_pix:
        raise ValueError(f"k must lie in [1, {n_pix}], got {k}")
    flat = rng.choice(n_pix, size=k, replace=False)
    return np.stack(np.divmod(flat, width), axis=1).astype(np.int64)


def voronoi_partition(seeds: np.ndarray, height: int, width: int) -> np.ndarray:
    """Label every pixel with ``1 + index`` of its nearest seed.

    Distances are squared Euclidean between pixel centres. ``argmin`` returns
    the first minimum, so ties go to the lowest seed index.
    """
    seeds = np.asarray(seeds)
    rows, cols = np.mgrid[0:height, 0:width]
    d2 = (rows[..., None] - seeds[:, 0]) ** 2 + (cols[..., None] - seeds[:, 1]) ** 2
    return (np.argmin(d2, axis=-1) + 1).astype(np.int32)


@dataclass
class AggregationMatrix:
    """Sparse ``n_regions x n_pixels`` matrix in compressed sparse row layout.

    Column ``j`` is pixel ``j`` of the row-major flattened grid; entry
    ``(i, j)`` is the fraction of pixel ``j`` that belongs to region ``i + 1``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]
    _rows: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.data = np.asarray(self.data, dtype=np.float64)
        n, m = self.shape
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0:
            raise ValueError("indptr must have n_rows + 1 entries starting at 0")
        if self.indptr[-1] != len(self.indices) or len(self.indices) != len(self.data):
            raise ValueError("indptr, indices and data are inconsistent")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= m):
            raise ValueError("column index out of range")
        if np.any(self.data <= 0) or np.any(self.data > 1):
            raise ValueError("stored values must lie in (0, 1]")

    @property
    def n_regions(self) -> int:
        return self.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.shape[1]

    @property
    def nnz(self) -> int:
        return len(self.data)

    @property
    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry (expanded ``indptr``)."""
        if self._rows is None:
            self._rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        return self._rows

    def region_sizes(self) -> np.ndarray:
        """Fractional pixel area of each region (row sums)."""
        return np.bincount(self.row_ids, weights=self.data, minlength=self.shape[0])

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids, self.indices] = self.data
        return out

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "AggregationMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=dense.shape[0]))])
        return cls(indptr, cols, dense[rows, cols], dense.shape)


def build_aggregation_matrix(regions: np.ndarray, n_regions: int | None = None) -> AggregationMatrix:
    """Hard-assignment aggregation matrix for a label grid.

    Background pixels (label 0) are left out of every row. ``n_regions``
    defaults to the largest label present.
    """
    labels = np.asarray(regions).ravel()
    if labels.size and labels.min() < 0:
        raise ValueError("region labels must be non-negative")
    n = int(labels.max()) if n_regions is None else int(n_regions)
    if labels.size and labels.max() > n:
        raise ValueError(f"label {labels.max()} exceeds n_regions={n}")
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=n + 1)
    cols = order[counts[0]:]
    indptr = np.concatenate([[0], np.cumsum(counts[1:])])
    return AggregationMatrix(indptr, cols, np.ones(len(cols)), (n, labels.size))


def aggregate_oracle(density: np.ndarray, regions: np.ndarray, n_regions: int | None = None) -> np.ndarray:
    """Per-region sums computed by explicit iteration over pixels.

    Deliberately slow; it exists to check the sparse path against.
    """
    density = np.asarray(density)
    regions = np.asarray(regions)
    if density.shape != regions.shape or density.ndim != 2:
        raise ValueError(f"shape mismatch: density {density.shape} vs regions {regions.shape}")
    n = int(regions.max()) if n_regions is None else int(n_regions)
    sums = [0.0] * n
    for r in range(regions.shape[0]):
        for c in range(regions.shape[1]):
            label = int(regions[r, c])
            if label != BACKGROUND:
                sums[label - 1] += float(density[r, c])
    return np.array(sums, dtype=np.float64)


def valid_region_mask(regions: np.ndarray, valid_pixels: np.ndarray, n_regions: int | None = None) -> np.ndarray:
    """True for regions lying entirely inside the valid area.

    Empty regions are reported as invalid since they carry no usable label.
    """
    regions = np.asarray(regions)
    valid_pixels = np.asarray(valid_pixels, dtype=bool)
    if regions.shape != valid_pixels.shape:
        raise ValueError("regions and valid_pixels must share a shape")
    n = int(regions.max()) if n_regions is None else int(n_regions)
    labels = regions.ravel()
    size = np.bincount(labels, minlength=n + 1)[1:n + 1]
    inside = np.bincount(labels, weights=valid_pixels.ravel(), minlength=n + 1)[1:n + 1]
    return (size > 0) & (inside == size)
