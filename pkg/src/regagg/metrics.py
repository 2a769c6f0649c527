"""Error metrics and dasymetric redistribution of known region totals."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

FALLBACK_THRESHOLD = 1e-12


def pixel_mae(estimate, truth) -> float:
    """Mean absolute error over every pixel of every image."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    return float(np.mean(np.abs(estimate - truth)))


def region_mae(estimates, labels, mask=None) -> float:
    """Mean absolute error over the masked-in regions."""
    estimates = np.asarray(estimates, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if estimates.shape != labels.shape:
        raise ValueError(f"shape mismatch: {estimates.shape} vs {labels.shape}")
    mask = np.ones(labels.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("no masked-in regions to score")
    return float(np.mean(np.abs(estimates - labels)[mask]))


def dasymetric_map(density, regions, labels, mask=None) -> np.ndarray:
    """Rescale a density map so each region sums to its known total.

    Pixels of region ``j`` are multiplied by ``labels[j] / sum(density over j)``.
    When the estimated region sum is essentially zero the total is spread
    uniformly instead. Pixels in masked-out regions and background are set
    to zero.
    """
    density = np.asarray(density, dtype=np.float64)
    regions = np.asarray(regions)
    labels = np.asarray(labels, dtype=np.float64)
    if density.shape != regions.shape:
        raise ValueError("density and regions must share a shape")
    if np.any(labels < 0):
        raise ValueError("labels must be non-negative")
    if np.any(density < 0):
        raise ValueError("density must be non-negative")
    n = len(labels)
    mask = np.ones(n, bool) if mask is None else np.asarray(mask, bool)
    flat = regions.ravel()
    est = np.bincount(flat, weights=density.ravel(), minlength=n + 1)[1:n + 1]
    size = np.bincount(flat, minlength=n + 1)[1:n + 1]
    fallback = est < FALLBACK_THRESHOLD
    scale = np.where(fallback, 0.0, labels / np.where(fallback, 1.0, est))
    uniform = np.where(fallback & (size > 0), labels / np.maximum(size, 1), 0.0)
    scale = np.concatenate([[0.0], np.where(mask, scale, 0.0)])
    uniform = np.concatenate([[0.0], np.where(mask, uniform, 0.0)])
    out = density.ravel() * scale[flat] + uniform[flat]
    return out.reshape(density.shape)


@dataclass
class MetricsReport:
    pixel_mae: float | None
    region_mae: float | None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.pixel_mae, self.region_mae):
            if v is not None and v < 0:
                raise ValueError("MAE cannot be negative")

    def row(self) -> dict:
        out = dict(self.meta)
        out.update(pixel_mae=self.pixel_mae, region_mae=self.region_mae)
        return out

    def summary(self) -> str:
        tag = " ".join(f"{k}={v}" for k, v in self.meta.items())
        pm = "n/a" if self.pixel_mae is None else f"{self.pixel_mae:.4f}"
        rm = "n/a" if self.region_mae is None else f"{self.region_mae:.4f}"
        return f"{tag}  pixel_mae={pm}  region_mae={rm}".strip()

    def to_dict(self) -> dict:
        return asdict(self)
