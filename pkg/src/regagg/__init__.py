"""Learning per-pixel densities from region-level aggregates."""

from .estimator import RegionDensityRegressor
from .metrics import dasymetric_map, pixel_mae, region_mae
from .pixelnet import PixelNetParams, init_params
from .ral import ral_backward, ral_forward
from .regions import AggregationMatrix, aggregate_oracle, build_aggregation_matrix, voronoi_partition
from .training import TrainConfig, train

__all__ = [
    "AggregationMatrix",
    "PixelNetParams",
    "RegionDensityRegressor",
    "TrainConfig",
    "aggregate_oracle",
    "build_aggregation_matrix",
    "dasymetric_map",
    "init_params",
    "pixel_mae",
    "ral_backward",
    "ral_forward",
    "region_mae",
    "train",
    "voronoi_partition",
]
__version__ = "0.1.0"
