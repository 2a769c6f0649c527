"""Losses, regularisers, the AMSGrad optimiser and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .dataset import RegionDataset
from .metrics import pixel_mae, region_mae
from .pixelnet import PixelNetParams, backward, forward, init_params, predict
from .ral import ral_backward, ral_forward

logger = logging.getLogger(__name__)

METHODS = ("ral", "unif")


class TrainingError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    method: str = "ral"
    activation: str = "softplus"
    widths: tuple = (64, 32, 16)
    l2_kernel_weight: float = 1e-4
    l1_activity_weight: float = 0.0
    batch_size: int = 64
    total_iterations: int = 120000
    lr0: float = 1e-2
    lr_decay: float = 0.5
    lr_period: int = 40000
    eval_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch_size < 1 or self.total_iterations < 0 or self.lr_period < 1 or self.eval_interval < 1:
            raise ValueError("batch_size, lr_period and eval_interval must be positive; iterations non-negative")
        if self.l2_kernel_weight < 0 or self.l1_activity_weight < 0:
            raise ValueError("penalty weights must be non-negative")
        self.widths = tuple(int(w) for w in self.widths)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _sign(x):
    return np.sign(x)


def loss_region_l1(estimates, labels, mask):
    """Mean absolute error over masked-in regions, with its subgradient."""
    estimates = np.asarray(estimates)
    labels = np.asarray(labels, dtype=estimates.dtype)
    mask = np.asarray(mask, dtype=bool)
    if estimates.shape != labels.shape or mask.shape != labels.shape:
        raise ValueError("estimates, labels and mask must share a shape")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no masked-in regions")
    diff = np.where(mask, estimates - labels, 0)
    loss = float(np.abs(diff).sum() / count)
    return loss, (_sign(diff) / count).astype(estimates.dtype)


def uniform_targets(labels, regions, mask=None):
    """Spread each region total evenly over its pixels.

    Returns ``(targets, ignore)``; ``ignore`` flags background pixels and
    pixels of masked-out regions.
    """
    labels = np.asarray(labels, dtype=np.float64)
    regions = np.asarray(regions)
    n = len(labels)
    mask = np.ones(n, bool) if mask is None else np.asarray(mask, bool)
    size = np.bincount(regions.ravel(), minlength=n + 1)[1:n + 1]
    bad = mask & (size == 0) & (labels != 0)
    if bad.any():
        raise ValueError(f"regions {np.flatnonzero(bad) + 1} are empty but carry a nonzero label")
    per_pixel = np.concatenate([[0.0], np.where(size > 0, labels / np.maximum(size, 1), 0.0)])
    keep = np.concatenate([[False], mask & (size > 0)])
    return per_pixel[regions].astype(np.float32), ~keep[regions]


def loss_pixel_l1(density, targets, ignore=None):
    """Mean absolute error over non-ignored pixels, with its subgradient."""
    density = np.asarray(density)
    targets = np.asarray(targets, dtype=density.dtype)
    if density.shape != targets.shape:
        raise ValueError("density and targets must share a shape")
    keep = np.ones(density.shape, bool) if ignore is None else ~np.asarray(ignore, bool)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("every pixel is ignored")
    diff = np.where(keep, density - targets, 0)
    return float(np.abs(diff).sum() / count), (_sign(diff) / count).astype(density.dtype)


def l2_kernel_penalty(params: PixelNetParams, lam: float, include_output: bool = False):
    """``lam * sum(w**2)`` over the kernels (hidden layers by default)."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    loss = 0.0
    grads = {}
    for name in params.kernel_names(include_output):
        w = params[name]
        loss += lam * float(np.sum(w.astype(np.float64) ** 2))
        grads[name] = (2 * lam) * w
    return loss, grads


def l1_activity_penalty(density, lam: float):
    """``lam * mean(|density|)`` and its gradient."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    density = np.asarray(density)
    n = density.size
    return lam * float(np.abs(density).sum()) / n, (lam / n) * _sign(density).astype(density.dtype)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)


def amsgrad_step(state: OptimizerState, params: PixelNetParams, grads: dict, lr: float):
    """One AMSGrad update, applied in place; returns ``(state, params)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    step = lr * np.sqrt(1 - state.beta2 ** state.t) / (1 - state.beta1 ** state.t)
    for name, g in grads.items():
        theta = params.tensors[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
            state.v_max[name] = np.zeros_like(theta)
        m, v, v_max = state.m[name], state.v[name], state.v_max[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        np.maximum(v_max, v, out=v_max)
        theta -= (step * m / (np.sqrt(v_max) + state.eps)).astype(theta.dtype)
    return state, params


def lr_schedule(iteration: int, lr0: float, decay: float = 0.5, period: int = 40000) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return lr0 * decay ** (iteration // period)


def compute_loss_and_grads(params: PixelNetParams, data: RegionDataset, index, config: TrainConfig):
    """Forward and backward pass of the training objective on one batch.

    Returns ``(total loss, data loss, gradients)``.
    """
    images = data.inputs[index]
    density, cache = forward(params, images, mode="train")
    if config.method == "ral":
        mats = [data.matrices[i] for i in index]
        est = ral_forward(mats, density)
        loss, g_est = loss_region_l1(est, data.labels[index, :est.shape[1]], data.mask[index, :est.shape[1]])
        g_density = ral_backward(mats, g_est, data.grid_shape)
    else:
        targets, ignore = data.uniform_targets()
        loss, g_density = loss_pixel_l1(density, targets[index], ignore[index])
    total = loss
    if config.l1_activity_weight > 0:
        pen, g_pen = l1_activity_penalty(density, config.l1_activity_weight)
        total += pen
        g_density = g_density + g_pen
    grads, _ = backward(params, cache, g_density, need_input_grad=False)
    if config.l2_kernel_weight > 0:
        pen, g_pen = l2_kernel_penalty(params, config.l2_kernel_weight)
        total += pen
        for name, g in g_pen.items():
            grads[name] = grads[name] + g
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss {total}")
    return total, loss, grads


def evaluate(params: PixelNetParams, data: RegionDataset, batch_size: int = 256) -> dict:
    """Region MAE (and pixel MAE when the truth is known) in infer mode."""
    density = predict(params, data.inputs, batch_size)
    est = ral_forward(data.matrices, density)
    n = est.shape[1]
    out = {"region_mae": region_mae(est, data.labels[:, :n], data.mask[:, :n]), "pixel_mae": None}
    if data.density is not None:
        out["pixel_mae"] = pixel_mae(density, data.density)
    return out


@dataclass
class TrainResult:
    best_params: PixelNetParams
    params: PixelNetParams
    state: OptimizerState
    log: list = field(default_factory=list)
    best_iteration: int = 0
    iteration: int = 0


def train(
    config: TrainConfig,
    data: RegionDataset,
    val: RegionDataset | None = None,
    params: PixelNetParams | None = None,
    state: OptimizerState | None = None,
    start_iteration: int = 0,
    callback=None,
) -> TrainResult:
    """Fit the pixel network from region labels.

    Every ``eval_interval`` iterations (and at the last one) the model is
    scored on ``val`` and the parameters with the lowest validation region
    MAE are kept. Without ``val`` the final parameters are returned as best.
    Passing ``params``/``state``/``start_iteration`` resumes a run.
    """
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(rng, config.widths, config.activation)
    state = OptimizerState() if state is None else state
    result = TrainResult(params.copy(), params, state, iteration=start_iteration, best_iteration=start_iteration)
    if len(data) == 0:
        raise ValueError("training set is empty")
    if config.method == "ral":
        data.matrices
    else:
        data.uniform_targets()
    end = start_iteration + config.total_iterations
    best = np.inf
    order = np.empty(0, dtype=np.int64)
    pos = 0
    running, n_running = 0.0, 0
    batch = min(config.batch_size, len(data))
    for it in range(start_iteration, end):
        if pos + batch > len(order):
            order = rng.permutation(len(data))
            pos = 0
        index = order[pos:pos + batch]
        pos += batch
        lr = lr_schedule(it, config.lr0, config.lr_decay, config.lr_period)
        try:
            total, _, grads = compute_loss_and_grads(params, data, index, config)
            amsgrad_step(state, params, grads, lr)
        except TrainingError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        running += total
        n_running += 1
        done = it + 1
        if done % config.eval_interval == 0 or done == end:
            row = {"iteration": done, "split": "train", "lr": lr, "loss": running / n_running,
                   "region_mae": None, "pixel_mae": None}
            result.log.append(row)
            running, n_running = 0.0, 0
            if val is not None and len(val):
                scores = evaluate(params, val)
                result.log.append({"iteration": done, "split": "val", "lr": lr, "loss": scores["region_mae"],
                                   **scores})
                if scores["region_mae"] < best:
                    best = scores["region_mae"]
                    result.best_params = params.copy()
                    result.best_iteration = done
            else:
                result.best_params = params.copy()
                result.best_iteration = done
            logger.info("iter %d lr %.2e loss %.5f", done, lr, row["loss"])
            if callback is not None:
                callback(result)
        result.iteration = done
    return result
