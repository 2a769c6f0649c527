"""scikit-learn style estimator wrapping the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import RegionDataset
from .metrics import dasymetric_map, region_mae
from .pixelnet import predict
from .ral import ral_forward
from .regions import build_aggregation_matrix
from .synthetic import normalize
from .training import TrainConfig, train
from .validation import check_aggregates, check_images, check_regions


class RegionDensityRegressor(BaseEstimator):
    """Learn a per-pixel density from per-region totals.

    ``fit`` takes raw images ``X`` of shape ``(n, H, W, 3)`` with values in
    [0, 255], label grids ``regions`` of shape ``(n, H, W)`` (0 = background,
    ``1..k`` = region ids) and region totals ``y`` of shape ``(n, k)``.
    ``predict`` returns densities of shape ``(n, H, W)``.

    With ``method="ral"`` the network is trained through the regional
    aggregation layer; ``method="unif"`` instead regresses each pixel onto
    its region total spread evenly over the region.
    """

    def __init__(self, method="ral", activation="softplus", hidden_widths=(64, 32, 16),
                 l2_kernel_weight=1e-4, l1_activity_weight=0.0, batch_size=64, max_iter=120000,
                 learning_rate=1e-2, lr_decay=0.5, lr_period=40000, eval_interval=1000,
                 random_state=0):
        self.method = method
        self.activation = activation
        self.hidden_widths = hidden_widths
        self.l2_kernel_weight = l2_kernel_weight
        self.l1_activity_weight = l1_activity_weight
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_period = lr_period
        self.eval_interval = eval_interval
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            method=self.method, activation=self.activation, widths=tuple(self.hidden_widths),
            l2_kernel_weight=self.l2_kernel_weight, l1_activity_weight=self.l1_activity_weight,
            batch_size=self.batch_size, total_iterations=self.max_iter, lr0=self.learning_rate,
            lr_decay=self.lr_decay, lr_period=self.lr_period, eval_interval=self.eval_interval,
            seed=0 if self.random_state is None else int(self.random_state),
        )

    def _dataset(self, X, y, regions, region_mask=None) -> RegionDataset:
        X = check_images(X)
        regions = check_regions(regions, X)
        y = check_aggregates(y, regions)
        return RegionDataset(X, regions, y, region_mask)

    def fit(self, X, y, regions, region_mask=None, eval_set=None):
        """Train from region totals.

        ``region_mask`` (n, k) marks totals that may be used; regions that
        straddle the edge of the valid image area should be masked out.
        ``eval_set`` is an optional ``(X, y, regions)`` tuple used to keep
        the checkpoint with the lowest region MAE.
        """
        config = self._config()
        data = self._dataset(X, y, regions, region_mask)
        val = self._dataset(*eval_set) if eval_set is not None else None
        result = train(config, data, val)
        self.params_ = result.best_params
        self.last_params_ = result.params
        self.optimizer_state_ = result.state
        self.log_ = result.log
        self.best_iteration_ = result.best_iteration
        self.n_iter_ = result.iteration
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_images(X)
        return predict(self.params_, normalize(X))

    def predict_aggregates(self, X, regions) -> np.ndarray:
        """Region totals of the predicted density, ``(n, max label)``."""
        X = check_images(X)
        regions = check_regions(regions, X)
        density = self.predict(X)
        n = int(regions.max()) if regions.size else 0
        return ral_forward([build_aggregation_matrix(r, n) for r in regions], density)

    def dasymetric(self, X, y, regions, region_mask=None) -> np.ndarray:
        """Predicted densities rescaled so every masked-in region sums to its total."""
        X = check_images(X)
        regions = check_regions(regions, X)
        y = check_aggregates(y, regions)
        density = self.predict(X)
        mask = np.ones(y.shape, bool) if region_mask is None else np.asarray(region_mask, bool)
        return np.stack([dasymetric_map(d, r, t, m) for d, r, t, m in zip(density, regions, y, mask)])

    def score(self, X, y, regions) -> float:
        """Negative region MAE, so that larger is better."""
        est = self.predict_aggregates(X, regions)
        y = check_aggregates(y, check_regions(regions, check_images(X)))
        return -region_mae(est, y[:, :est.shape[1]])
