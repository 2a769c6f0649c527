"""Regional aggregation layer: sparse region sums of a density map and their adjoint.

Both directions touch each stored matrix entry once, so the cost is O(nnz)
regardless of how many regions or pixels there are.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .regions import AggregationMatrix


def _as_list(M, batch: int) -> list[AggregationMatrix]:
    if isinstance(M, AggregationMatrix):
        return [M] * batch
    M = list(M)
    if len(M) != batch:
        raise ValueError(f"got {len(M)} aggregation matrices for a batch of {batch}")
    return M


def _stack(mats: Sequence[AggregationMatrix], n_out: int):
    """Flattened (row, col, value) triplets of a block-diagonal batch matrix."""
    n_pix = mats[0].n_pixels
    rows, cols, vals = [], [], []
    for b, m in enumerate(mats):
        if m.n_pixels != n_pix:
            raise ValueError("all matrices in a batch must have the same number of columns")
        rows.append(m.row_ids + b * n_out)
        cols.append(m.indices + b * n_pix)
        vals.append(m.data)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def ral_forward(M: AggregationMatrix | Sequence[AggregationMatrix], density: np.ndarray) -> np.ndarray:
    """Region sums ``M @ vec(density)`` for every batch element.

    ``M`` is either one matrix shared by the whole batch or one matrix per
    element. Returns a ``(B, n)`` array where ``n`` is the largest region
    count in the batch; shorter rows are zero padded.
    """
    density = np.asarray(density)
    if density.ndim == 2:
        density = density[None]
    B = density.shape[0]
    mats = _as_list(M, B)
    n_pix = density.shape[1] * density.shape[2]
    if any(m.n_pixels != n_pix for m in mats):
        raise ValueError(f"matrix has {mats[0].n_pixels} columns but density has {n_pix} pixels")
    n_out = max(m.n_regions for m in mats)
    rows, cols, vals = _stack(mats, n_out)
    flat = density.reshape(-1)
    out = np.bincount(rows, weights=vals * flat[cols], minlength=B * n_out)
    return out.reshape(B, n_out).astype(density.dtype, copy=False)


def ral_backward(
    M: AggregationMatrix | Sequence[AggregationMatrix],
    upstream: np.ndarray,
    grid_shape: tuple[int, int],
) -> np.ndarray:
    """Adjoint of :func:`ral_forward`: scatter region gradients back onto pixels.

    ``upstream`` has shape ``(B, n)``; to drop a region from the loss, zero
    its entry before calling.
    """
    upstream = np.asarray(upstream)
    if upstream.ndim == 1:
        upstream = upstream[None]
    B, n_out = upstream.shape
    mats = _as_list(M, B)
    H, W = grid_shape
    if any(m.n_pixels != H * W for m in mats):
        raise ValueError("grid_shape does not match the matrix column count")
    if any(m.n_regions > n_out for m in mats):
        raise ValueError(f"upstream has {n_out} regions, fewer than the matrix rows")
    rows, cols, vals = _stack(mats, n_out)
    grad = np.bincount(cols, weights=vals * upstream.reshape(-1)[rows], minlength=B * H * W)
    return grad.reshape(B, H, W).astype(upstream.dtype, copy=False)
