"""Image corpora and the synthetic ground-truth density functions."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .regions import aggregate_oracle, sample_seeds, voronoi_partition

IMAGE_SIZE = 32
CIFAR_RECORD = 1 + 3 * IMAGE_SIZE * IMAGE_SIZE
CIFAR_BATCH_RECORDS = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_VAL_SIZE = 2500
N_BINS = 16


class FormatError(ValueError):
    """Raised when an on-disk image archive does not have the expected layout."""


def normalize(images: np.ndarray) -> np.ndarray:
    """Raw bytes to network input in [-1, 1]."""
    return np.asarray(images, dtype=np.float32) / 127.5 - 1.0


def color_view(images: np.ndarray) -> np.ndarray:
    """Raw bytes to colours in [0, 1]."""
    return np.asarray(images, dtype=np.float64) / 255.0


@dataclass
class Dataset:
    """Raw ``uint8`` images of shape ``(N, 32, 32, 3)`` split three ways."""

    train: np.ndarray
    val: np.ndarray = field(default_factory=lambda: np.zeros((0, 32, 32, 3), np.uint8))
    test: np.ndarray = field(default_factory=lambda: np.zeros((0, 32, 32, 3), np.uint8))
    source: str = "procedural"

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_images(self) -> np.ndarray:
        return np.concatenate([self.train, self.val, self.test])

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def read_cifar_records(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode CIFAR-10 binary records (label byte + three 1024-byte colour planes)."""
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{name}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    planes = rec[:, 1:].reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE)
    return np.ascontiguousarray(planes.transpose(0, 2, 3, 1))


def encode_cifar_records(images: np.ndarray, labels=None) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    n = len(images)
    rec = np.zeros((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = 0 if labels is None else labels
    rec[:, 1:] = images.transpose(0, 3, 1, 2).reshape(n, -1)
    return rec.tobytes()


def load_cifar10(path: str | os.PathLike) -> Dataset:
    """Load the binary CIFAR-10 archive; the last 2500 training images become validation."""
    expected = CIFAR_BATCH_RECORDS * CIFAR_RECORD

    def read(fname):
        fpath = os.path.join(path, fname)
        if not os.path.isfile(fpath):
            raise FormatError(f"missing CIFAR-10 file: {fpath}")
        size = os.path.getsize(fpath)
        if size != expected:
            raise FormatError(f"{fpath}: expected {expected} bytes, found {size}")
        with open(fpath, "rb") as fh:
            return read_cifar_records(fh.read(), fpath)

    train = np.concatenate([read(f) for f in CIFAR_TRAIN_FILES])
    test = read(CIFAR_TEST_FILE)
    return Dataset(train[:-CIFAR_VAL_SIZE], train[-CIFAR_VAL_SIZE:], test, source="cifar10")


def find_cifar10() -> str | None:
    """Directory named by ``REGAGG_CIFAR10_DIR`` if it holds the binary archive."""
    path = os.environ.get("REGAGG_CIFAR10_DIR")
    if path and all(os.path.isfile(os.path.join(path, f)) for f in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]):
        return path
    return None


def procedural_images(rng: np.random.Generator, count: int, size: int = IMAGE_SIZE,
                      chroma_max: float = 90.0) -> np.ndarray:
    """Smooth random colour fields standing in for natural photographs.

    Each image is a luminance field (random level, ramp, a few low-frequency
    cosine waves and some mid-frequency texture) plus a colour cast whose strength is drawn
    per image up to ``chroma_max``, slow per-channel colour waves and
    per-pixel grain of random strength. Keeping most colours near the grey axis mimics the low
    saturation of natural photographs.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    yy, xx = np.mgrid[0:size, 0:size] / size

    def waves(n, fmax):
        f = np.zeros((size, size))
        for _ in range(n):
            fy, fx = rng.uniform(-fmax, fmax, size=2)
            f += np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
        return f / np.sqrt(n)

    out = np.empty((count, size, size, 3), dtype=np.uint8)
    for i in range(count):
        lum = rng.uniform(30, 225) + rng.uniform(20, 90) * waves(rng.integers(2, 5), 2.5)
        # mid-frequency texture so regions rarely hold a single colour
        lum += rng.uniform(0, 80) * waves(4, 8.0)
        ramp = rng.normal(0, 40, size=2)
        lum = lum + ramp[0] * yy + ramp[1] * xx
        strength = rng.uniform(0, chroma_max)
        img = lum[..., None] + rng.normal(0, strength, size=3)
        for c in range(3):
            img[..., c] += rng.uniform(0, 0.6 * strength + 5) * waves(1, 2.0)
        img += rng.normal(0, rng.uniform(10, 40), size=img.shape)
        out[i] = np.clip(np.rint(img), 0, 255)
    return out


def procedural_dataset(rng: np.random.Generator, count: int, val: int = 0, test: int = 0) -> Dataset:
    """Procedural stand-in for CIFAR-10 with ``count`` training images."""
    images = procedural_images(rng, count + val + test)
    return Dataset(images[:count], images[count:count + val], images[count + val:], source="procedural")


def sample_palette(rng: np.random.Generator, images: np.ndarray, k: int) -> np.ndarray:
    """``k`` colours (in [0, 1]) copied from uniformly drawn (image, pixel) pairs."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("cannot sample a palette from an empty image set")
    idx = rng.integers(0, len(images), size=k)
    rows = rng.integers(0, images.shape[1], size=k)
    cols = rng.integers(0, images.shape[2], size=k)
    return color_view(images[idx, rows, cols])


def _palette_distances(image: np.ndarray, palette: np.ndarray) -> np.ndarray:
    colors = color_view(image)
    diff = colors[..., None, :] - np.asarray(palette)[None, None]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def density_binary(image: np.ndarray, palette: np.ndarray, tau: float = 0.2) -> np.ndarray:
    """1 where the pixel lies strictly within ``tau`` of some palette colour."""
    d = _palette_distances(image, palette)
    return (d.min(axis=-1) < tau).astype(np.float32)


def density_count(image: np.ndarray, palette: np.ndarray, tau: float = 0.4) -> np.ndarray:
    """Number of palette colours strictly within ``tau`` of each pixel."""
    d = _palette_distances(image, palette)
    return (d < tau).sum(axis=-1).astype(np.float32)


def density_ratio(image: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Nearest over second-nearest palette distance; 1 when both are zero."""
    if len(palette) < 2:
        raise ValueError("ratio density needs at least two palette colours")
    d = np.sort(_palette_distances(image, palette), axis=-1)
    d1, d2 = d[..., 0], d[..., 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(d2 > 0, d1 / np.where(d2 > 0, d2, 1), 1.0)
    return ratio.astype(np.float32)


def color_bins(image: np.ndarray) -> np.ndarray:
    """Index in the 16x16x16 RGB bin grid of every pixel."""
    q = np.asarray(image, dtype=np.int64) // (256 // N_BINS)
    return q[..., 0] * N_BINS * N_BINS + q[..., 1] * N_BINS + q[..., 2]


def bin_statistics(images: np.ndarray, chunk: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin (number of images containing it, total pixel count)."""
    images = np.asarray(images)
    n_bins = N_BINS ** 3
    image_count = np.zeros(n_bins, dtype=np.int64)
    pixel_count = np.zeros(n_bins, dtype=np.int64)
    for start in range(0, len(images), chunk):
        bins = color_bins(images[start:start + chunk]).reshape(-1, images.shape[1] * images.shape[2])
        pixel_count += np.bincount(bins.ravel(), minlength=n_bins)
        # distinct (image, bin) pairs
        keys = np.unique(bins + n_bins * np.arange(len(bins))[:, None])
        image_count += np.bincount(keys % n_bins, minlength=n_bins)
    return image_count, pixel_count


def select_sparse_bins(images: np.ndarray, min_images: int = 29000, max_avg_pixels: float = 10) -> np.ndarray:
    """Bins present in many images but covering few pixels in each.

    A bin is kept when at least ``min_images`` images contain it and it
    averages at most ``max_avg_pixels`` pixels per image it appears in.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("cannot select bins from an empty corpus")
    image_count, pixel_count = bin_statistics(images)
    present = image_count > 0
    avg = np.divide(pixel_count, image_count, out=np.full(len(pixel_count), np.inf), where=present)
    return np.flatnonzero((image_count >= min_images) & (avg <= max_avg_pixels))


def rank_sparse_bins(images: np.ndarray, n_bins: int, max_avg_pixels: float = 10) -> np.ndarray:
    """The ``n_bins`` most widespread bins among those averaging at most ``max_avg_pixels``.

    Used for corpora too small or too smooth for the absolute image-count
    threshold of :func:`select_sparse_bins` to pick anything.
    """
    image_count, pixel_count = bin_statistics(images)
    present = image_count > 0
    avg = np.divide(pixel_count, image_count, out=np.full(len(pixel_count), np.inf), where=present)
    eligible = np.flatnonzero(present & (avg <= max_avg_pixels))
    # stable sort keeps the lower bin index first among ties
    order = np.argsort(-image_count[eligible], kind="stable")
    return np.sort(eligible[order[:n_bins]])


def density_sparse(image: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """1 where the pixel's colour bin is in ``bins``."""
    lookup = np.zeros(N_BINS ** 3, dtype=bool)
    lookup[np.asarray(bins, dtype=np.int64)] = True
    return lookup[color_bins(image)].astype(np.float32)


DENSITY_FUNCTIONS = {
    "binary": density_binary,
    "count": density_count,
    "ratio": density_ratio,
    "sparse": density_sparse,
}
PALETTE_SIZES = {"binary": 15, "count": 20, "ratio": 20}


@dataclass
class TaskSpec:
    """A density task bound to its palette (or sparse bin set)."""

    name: str
    palette: np.ndarray | None = None
    bins: np.ndarray | None = None
    tau: float | None = None

    def __call__(self, image: np.ndarray) -> np.ndarray:
        fn = DENSITY_FUNCTIONS[self.name]
        if self.name == "sparse":
            return fn(image, self.bins)
        if self.tau is not None:
            return fn(image, self.palette, self.tau)
        return fn(image, self.palette)

    def batch(self, images: np.ndarray, chunk: int = 1000) -> np.ndarray:
        images = np.asarray(images)
        if len(images) == 0:
            return np.zeros(images.shape[:3], dtype=np.float32)
        # the density functions broadcast over leading axes
        return np.concatenate([self(images[i:i + chunk]) for i in range(0, len(images), chunk)])


def make_task(name: str, rng: np.random.Generator, corpus: np.ndarray, tau: float | None = None,
              min_images: int = 29000, max_avg_pixels: float = 10, top_bins: int = 0) -> TaskSpec:
    """Draw the global palette (or select the sparse bins) for a task over ``corpus``.

    For the sparse task, ``top_bins > 0`` switches from the absolute
    ``min_images`` threshold to :func:`rank_sparse_bins`.
    """
    if name not in DENSITY_FUNCTIONS:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(DENSITY_FUNCTIONS)}")
    if name == "sparse":
        if top_bins > 0:
            bins = rank_sparse_bins(corpus, top_bins, max_avg_pixels)
        else:
            bins = select_sparse_bins(corpus, min_images, max_avg_pixels)
        return TaskSpec(name, bins=bins)
    return TaskSpec(name, palette=sample_palette(rng, corpus, PALETTE_SIZES[name]), tau=tau)


def make_example(image: np.ndarray, k_regions: int, density_fn, rng: np.random.Generator):
    """One training example: ``(image, region map, density, region sums)``."""
    H, W = image.shape[:2]
    regions = voronoi_partition(sample_seeds(rng, k_regions, H, W), H, W)
    f = density_fn(image)
    return image, regions, f, aggregate_oracle(f, regions, k_regions)


def make_region_maps(rng: np.random.Generator, count: int, k_regions: int, height: int = IMAGE_SIZE,
                     width: int = IMAGE_SIZE) -> np.ndarray:
    """Independent Voronoi maps with ``k_regions`` seeds each."""
    out = np.empty((count, height, width), dtype=np.int32)
    for i in range(count):
        out[i] = voronoi_partition(sample_seeds(rng, k_regions, height, width), height, width)
    return out


def region_sums(density: np.ndarray, regions: np.ndarray, n_regions: int) -> np.ndarray:
    """Vectorised per-example region sums, ``(N, n_regions)``."""
    N = len(density)
    labels = regions.reshape(N, -1).astype(np.int64)
    keys = labels + (n_regions + 1) * np.arange(N)[:, None]
    sums = np.bincount(keys.ravel(), weights=np.asarray(density, np.float64).ravel(),
                       minlength=N * (n_regions + 1))
    return sums.reshape(N, n_regions + 1)[:, 1:]

