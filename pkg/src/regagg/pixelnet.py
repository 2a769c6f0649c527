"""Per-pixel density network with hand-written forward and reverse passes.

Each pixel is pushed through the same small MLP (the equivalent of stacked
1x1 convolutions)::

    x -> [affine -> ReLU -> batchnorm] x 3 -> affine -> output activation

Batchnorm has a fixed unit scale and a trainable shift. Its normalisation is
folded into the following affine layer, so the normalised activations are
never materialised; this roughly halves the number of full-size passes over
the hidden activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

ACTIVATIONS = ("softplus", "sigmoid", "relu")
BN_EPS = 1e-3
BN_MOMENTUM = 0.99
DEFAULT_WIDTHS = (64, 32, 16)


def _sigmoid(x):
    # split on sign to keep exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x):
    x = np.asarray(x)
    if kind == "softplus":
        return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    if kind == "sigmoid":
        return _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    if kind == "relu":
        return np.maximum(x, 0)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, x):
    x = np.asarray(x)
    if kind == "softplus":
        return _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    if kind == "sigmoid":
        s = _sigmoid(np.atleast_1d(x)).reshape(x.shape)
        return s * (1 - s)
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class PixelNetParams:
    """All tensors of the network, keyed by name.

    Hidden layer ``l`` (1-based) owns ``W{l}`` (out x in), ``b{l}``,
    ``beta{l}`` and the non-trainable ``running_mean{l}`` / ``running_var{l}``.
    The output layer owns ``W_out`` (1 x last width) and ``b_out``.
    """

    tensors: dict[str, np.ndarray]
    activation: str = "softplus"
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    in_channels: int = 3

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.widths = tuple(int(w) for w in self.widths)

    @property
    def n_hidden(self) -> int:
        return len(self.widths)

    @property
    def dtype(self):
        return self.tensors["W_out"].dtype

    def trainable_names(self) -> list[str]:
        names = []
        for l in range(1, self.n_hidden + 1):
            names += [f"W{l}", f"b{l}", f"beta{l}"]
        return names + ["W_out", "b_out"]

    def kernel_names(self, include_output: bool = False) -> list[str]:
        names = [f"W{l}" for l in range(1, self.n_hidden + 1)]
        return names + ["W_out"] if include_output else names

    def copy(self) -> "PixelNetParams":
        return PixelNetParams(
            {k: v.copy() for k, v in self.tensors.items()},
            self.activation, self.widths, self.in_channels,
        )

    def astype(self, dtype) -> "PixelNetParams":
        return PixelNetParams(
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            self.activation, self.widths, self.in_channels,
        )

    def __getitem__(self, name):
        return self.tensors[name]


def init_params(
    rng: np.random.Generator,
    widths=DEFAULT_WIDTHS,
    activation: str = "softplus",
    in_channels: int = 3,
    dtype=np.float32,
) -> PixelNetParams:
    """Glorot-uniform kernels, zero biases and shifts, unit running variance."""
    sizes = [in_channels, *widths, 1]
    tensors = {}
    for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        hidden = l < len(sizes) - 1
        suffix = str(l) if hidden else "_out"
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors["W" + suffix] = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        tensors["b" + suffix] = np.zeros(fan_out, dtype=dtype)
        if hidden:
            tensors[f"beta{l}"] = np.zeros(fan_out, dtype=dtype)
            tensors[f"running_mean{l}"] = np.zeros(fan_out, dtype=dtype)
            tensors[f"running_var{l}"] = np.ones(fan_out, dtype=dtype)
    return PixelNetParams(tensors, activation, tuple(widths), in_channels)


@dataclass
class ForwardCache:
    mode: str
    shape: tuple[int, ...]
    x: np.ndarray
    relu_out: list[np.ndarray] = field(default_factory=list)
    means: list[np.ndarray] = field(default_factory=list)
    inv_stds: list[np.ndarray] = field(default_factory=list)
    pre_out: np.ndarray | None = None


def _next_layer(params: PixelNetParams, l: int):
    if l == params.n_hidden:
        return params["W_out"], params["b_out"]
    return params[f"W{l + 1}"], params[f"b{l + 1}"]


def forward(params: PixelNetParams, images: np.ndarray, mode: str = "train", update_running: bool = True):
    """Densities for a ``(B, H, W, C)`` batch of normalised images.

    Train mode normalises with batch statistics taken over all ``B*H*W``
    positions and, unless ``update_running`` is false, folds them into the
    running statistics. Infer mode uses the running statistics.
    Returns ``(densities of shape (B, H, W), cache)``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    images = np.asarray(images, dtype=params.dtype)
    if images.ndim != 4 or images.shape[-1] != params.in_channels:
        raise ValueError(f"expected (B, H, W, {params.in_channels}) images, got {images.shape}")
    if not np.all(np.isfinite(images)):
        raise ValueError("images contain non-finite values")
    x = images.reshape(-1, params.in_channels)
    N = x.shape[0]
    if mode == "train" and N < 2:
        raise ValueError("train mode needs at least two pixel positions")
    cache = ForwardCache(mode, images.shape[:3], x)

    z = x @ params["W1"].T
    bias = params["b1"]
    for l in range(1, params.n_hidden + 1):
        if mode == "train":
            total, total_sq = _kernels.bias_relu_stats(z, bias)
            mu = total / N
            var = np.maximum(total_sq / N - mu * mu, 0)
            if update_running:
                rm, rv = params[f"running_mean{l}"], params[f"running_var{l}"]
                rm *= BN_MOMENTUM
                rm += (1 - BN_MOMENTUM) * mu
                rv *= BN_MOMENTUM
                rv += (1 - BN_MOMENTUM) * var
            mu = mu.astype(params.dtype)
        else:
            _kernels.bias_relu(z, bias)
            mu = params[f"running_mean{l}"]
            var = params[f"running_var{l}"]
        r = z
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(params.dtype)
        cache.relu_out.append(r)
        cache.means.append(mu)
        cache.inv_stds.append(inv)
        Wn, bn = _next_layer(params, l)
        # BN(r) @ Wn.T + bn  ==  r @ (Wn * inv).T + (bn + Wn @ (beta - mu * inv))
        z = r @ (Wn * inv).T
        bias = bn + Wn @ (params[f"beta{l}"] - mu * inv)
    z += bias
    cache.pre_out = z
    out = activation(params.activation, z)
    return out.reshape(cache.shape), cache


def backward(params: PixelNetParams, cache: ForwardCache, upstream: np.ndarray, need_input_grad: bool = True):
    """Reverse pass for a train-mode :func:`forward`.

    Returns ``(grads, input_grad)`` where ``grads`` maps every trainable
    tensor name to d(sum(outputs * upstream))/d(tensor), including the terms
    that flow through the batch statistics, and ``input_grad`` has the shape
    of the input images (``None`` when ``need_input_grad`` is false).
    """
    if cache.mode != "train":
        raise ValueError("backward needs a cache from a train-mode forward pass")
    upstream = np.asarray(upstream, dtype=params.dtype)
    if upstream.shape != cache.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match output {cache.shape}")
    N = cache.x.shape[0]
    grads = {}
    gz = upstream.reshape(-1, 1) * activation_grad(params.activation, cache.pre_out)

    for l in range(params.n_hidden, 0, -1):
        r, mu, inv = cache.relu_out[l - 1], cache.means[l - 1], cache.inv_stds[l - 1]
        Wn, _ = _next_layer(params, l)
        wname, bname = ("W_out", "b_out") if l == params.n_hidden else (f"W{l + 1}", f"b{l + 1}")
        s = np.ones(N, dtype=gz.dtype) @ gz
        P = r.T @ gz
        shift = params[f"beta{l}"] - inv * mu
        grads[wname] = (inv[:, None] * P + shift[:, None] * s[None, :]).T
        grads[bname] = s
        # gradient w.r.t. the normalised activations, summarised per channel
        g_sum = Wn.T @ s
        grads[f"beta{l}"] = g_sum
        g_xhat = inv * ((Wn.T * P).sum(axis=1) - mu * g_sum)
        mean_g = g_sum / N
        mean_gx = g_xhat / N
        coef = -inv * inv * mean_gx
        const = -inv * mean_g + inv * inv * mu * mean_gx
        dr = gz @ (Wn * inv)
        _kernels.bn_relu_grad(dr, r, const.astype(dr.dtype), coef.astype(dr.dtype))
        gz = dr

    grads["W1"] = (cache.x.T @ gz).T
    grads["b1"] = np.ones(N, dtype=gz.dtype) @ gz
    input_grad = None
    if need_input_grad:
        input_grad = (gz @ params["W1"]).reshape(*cache.shape, params.in_channels)
    grads = {k: np.asarray(v, dtype=params.dtype) for k, v in grads.items()}
    return grads, input_grad


def predict(params: PixelNetParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Infer-mode densities, evaluated in chunks of ``batch_size`` images."""
    images = np.asarray(images)
    outs = [forward(params, images[i:i + batch_size], mode="infer")[0]
            for i in range(0, len(images), batch_size)]
    if not outs:
        return np.zeros(images.shape[:3], dtype=params.dtype)
    return np.concatenate(outs)
