"""Container pairing images with region maps and region-level labels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .regions import AggregationMatrix, build_aggregation_matrix, valid_region_mask
from .synthetic import make_region_maps, normalize, region_sums


@dataclass
class RegionDataset:
    """Weakly labelled examples.

    ``images`` are raw bytes ``(N, H, W, 3)``; ``regions`` are label grids
    ``(N, H, W)`` with 0 marking background; ``labels`` hold one aggregate per
    region ``(N, n_regions)`` and ``mask`` says which of them may be used.
    ``density`` is the pixel-level truth when it is known (synthetic data).
    """

    images: np.ndarray
    regions: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None
    density: np.ndarray | None = None
    _matrices: list | None = field(default=None, repr=False)
    _inputs: np.ndarray | None = field(default=None, repr=False)
    _uniform: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.regions = np.asarray(self.regions, dtype=np.int32)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        N = len(self.images)
        if self.regions.shape != self.images.shape[:3]:
            raise ValueError(f"regions {self.regions.shape} do not match images {self.images.shape}")
        if self.labels.ndim != 2 or len(self.labels) != N:
            raise ValueError("labels must have shape (n_examples, n_regions)")
        if N and self.regions.max() > self.labels.shape[1]:
            raise ValueError("region label exceeds the number of label columns")
        if self.mask is None:
            self.mask = np.stack([
                valid_region_mask(r, np.ones(r.shape, bool), self.n_regions) for r in self.regions
            ]) if N else np.zeros(self.labels.shape, bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.labels.shape:
            raise ValueError("mask must match labels")
        if self.density is not None:
            self.density = np.asarray(self.density, dtype=np.float32)
            if self.density.shape != self.regions.shape:
                raise ValueError("density must match the region grids")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_regions(self) -> int:
        return self.labels.shape[1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def matrices(self) -> list[AggregationMatrix]:
        """Aggregation matrix per example, built on first use and cached."""
        if self._matrices is None:
            self._matrices = [build_aggregation_matrix(r, self.n_regions) for r in self.regions]
        return self._matrices

    @property
    def inputs(self) -> np.ndarray:
        """Images scaled to [-1, 1] as float32 (cached)."""
        if self._inputs is None:
            self._inputs = normalize(self.images)
        return self._inputs

    def uniform_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel uniform spread of the labels and the matching ignore mask (cached)."""
        if self._uniform is None:
            from .training import uniform_targets
            pairs = [uniform_targets(y, r, m) for y, r, m in zip(self.labels, self.regions, self.mask)]
            self._uniform = (np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
        return self._uniform

    def subset(self, index) -> "RegionDataset":
        index = np.asarray(index)
        out = RegionDataset(
            self.images[index], self.regions[index], self.labels[index], self.mask[index],
            None if self.density is None else self.density[index],
        )
        if self._matrices is not None:
            idx = np.arange(len(self))[index]
            out._matrices = [self._matrices[i] for i in np.atleast_1d(idx)]
        return out

    @classmethod
    def from_density(cls, images, density, regions, n_regions: int | None = None) -> "RegionDataset":
        """Label examples by summing a known density over each region."""
        regions = np.asarray(regions, dtype=np.int32)
        n = int(regions.max()) if n_regions is None else n_regions
        labels = region_sums(density, regions, n)
        return cls(images, regions, labels, density=density)

    @classmethod
    def synthesize(cls, images, task, k_regions: int, rng: np.random.Generator) -> "RegionDataset":
        """Voronoi regions with ``k_regions`` seeds per image, labelled by ``task``."""
        images = np.asarray(images)
        regions = make_region_maps(rng, len(images), k_regions, images.shape[1], images.shape[2])
        return cls.from_density(images, task.batch(images), regions, k_regions)

    def with_regions(self, regions, n_regions: int | None = None) -> "RegionDataset":
        """Same images and density truth relabelled over new region maps."""
        if self.density is None:
            raise ValueError("relabelling needs the pixel-level density")
        return RegionDataset.from_density(self.images, self.density, regions, n_regions)
