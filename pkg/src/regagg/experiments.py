"""Comparative experiments: RAL vs. uniform spreading, output priors, region count."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .dataset import RegionDataset
from .metrics import MetricsReport, pixel_mae, region_mae
from .pixelnet import predict
from .ral import ral_forward
from .synthetic import Dataset, TaskSpec, make_region_maps
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

L1_PRIOR_WEIGHT = 1e-4


@dataclass
class Splits:
    train: RegionDataset
    val: RegionDataset
    test: RegionDataset

    def relabel(self, k_regions: int, rng: np.random.Generator) -> "Splits":
        """Fresh Voronoi maps with ``k_regions`` seeds for every split; truth unchanged."""
        def one(d):
            H, W = d.grid_shape
            return d.with_regions(make_region_maps(rng, len(d), k_regions, H, W), k_regions)
        return Splits(one(self.train), one(self.val), one(self.test))


def build_splits(images: Dataset, task: TaskSpec, k_regions: int, rng: np.random.Generator) -> Splits:
    """Label each split of an image corpus with Voronoi regions and a density task."""
    return Splits(*(RegionDataset.synthesize(images.split(s), task, k_regions, rng)
                    for s in ("train", "val", "test")))


def score_split(params, test: RegionDataset, meta: dict) -> MetricsReport:
    density = predict(params, test.inputs)
    est = ral_forward(test.matrices, density)
    n = est.shape[1]
    pm = pixel_mae(density, test.density) if test.density is not None else None
    return MetricsReport(pm, region_mae(est, test.labels[:, :n], test.mask[:, :n]), meta)


def _run(config: TrainConfig, splits: Splits, **meta) -> MetricsReport:
    result = train(config, splits.train, splits.val)
    info = {"method": config.method, "activation": config.activation,
            "l1_activity": config.l1_activity_weight, "iterations": config.total_iterations,
            "seed": config.seed, **meta}
    report = score_split(result.best_params, splits.test, info)
    logger.info("%s", report.summary())
    return report


def run_comparison(splits: Splits, config: TrainConfig, methods=("ral", "unif"), **meta) -> list[MetricsReport]:
    """Train each method on identical data and seed; score pixel MAE on the test split."""
    return [_run(replace(config, method=m), splits, **meta) for m in methods]


def run_priors_ablation(splits: Splits, config: TrainConfig, l1_weight: float = L1_PRIOR_WEIGHT) -> list[MetricsReport]:
    """Sparse-task runs for softplus / softplus+L1 / sigmoid / sigmoid+L1 heads."""
    reports = []
    for act in ("softplus", "sigmoid"):
        for lam in (0.0, l1_weight):
            cfg = replace(config, method="ral", activation=act, l1_activity_weight=lam)
            reports.append(_run(cfg, splits))
    return reports


def sweep_regions(ks, splits: Splits, config: TrainConfig, seed: int = 0) -> list[dict]:
    """Retrain with ``k`` Voronoi regions per image for each ``k``; same images and truth.

    Returns rows ``{"k", "pixel_mae", "region_mae"}``.
    """
    ks = list(ks)
    if not ks:
        raise ValueError("ks must not be empty")
    rows = []
    for k in ks:
        relabelled = splits.relabel(k, np.random.default_rng([seed, k]))
        report = _run(replace(config, method="ral"), relabelled, k_regions=k)
        rows.append({"k": k, "pixel_mae": report.pixel_mae, "region_mae": report.region_mae})
    return rows
