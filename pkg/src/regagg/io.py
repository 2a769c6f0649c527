"""On-disk formats: rasters, key=value configs, checkpoints and metric logs.

All writers go through :func:`atomic_write` so an interrupted process never
leaves a truncated file behind.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .pixelnet import PixelNetParams
from .training import OptimizerState

RASTER_DTYPES = {"float32le": np.dtype("<f4"), "int32le": np.dtype("<i4")}
METRICS_HEADER = ["iteration", "split", "lr", "loss", "region_mae", "pixel_mae"]


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary sibling file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- rasters ---------------------------------------------------------------

def encode_raster(grid: np.ndarray, dtype: str = "float32le") -> bytes:
    """``RASTER v1 <H> <W> <dtype>\\n`` followed by the row-major payload."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"a raster is a 2-D grid, got shape {grid.shape}")
    if dtype not in RASTER_DTYPES:
        raise ValueError(f"unsupported raster dtype {dtype!r}")
    header = f"RASTER v1 {grid.shape[0]} {grid.shape[1]} {dtype}\n".encode("ascii")
    return header + np.ascontiguousarray(grid, dtype=RASTER_DTYPES[dtype]).tobytes()


def decode_rasters(raw: bytes) -> list[np.ndarray]:
    """Every raster record in a byte string (a file may hold several back to back)."""
    out = []
    pos = 0
    while pos < len(raw):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ValueError("truncated raster header")
        parts = raw[pos:end].decode("ascii").split()
        if len(parts) != 5 or parts[:2] != ["RASTER", "v1"] or parts[4] not in RASTER_DTYPES:
            raise ValueError(f"bad raster header: {raw[pos:end]!r}")
        H, W = int(parts[2]), int(parts[3])
        dt = RASTER_DTYPES[parts[4]]
        size = H * W * dt.itemsize
        payload = raw[end + 1:end + 1 + size]
        if len(payload) != size:
            raise ValueError("truncated raster payload")
        native = np.float32 if dt.kind == "f" else np.int32
        out.append(np.frombuffer(payload, dtype=dt).reshape(H, W).astype(native))
        pos = end + 1 + size
    return out


def write_rasters(path, grids, dtype: str = "float32le") -> None:
    atomic_write(path, b"".join(encode_raster(g, dtype) for g in grids))


def read_rasters(path) -> np.ndarray:
    grids = decode_rasters(Path(path).read_bytes())
    if not grids:
        return np.zeros((0, 0, 0), dtype=np.float32)
    return np.stack(grids)


# -- key=value text ----------------------------------------------------------

def format_kv(items: dict) -> str:
    lines = []
    for k, v in items.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"line {n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def fingerprint(*paths) -> str:
    """SHA-256 over the bytes of the given files, in order."""
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(directory, params: PixelNetParams, meta: dict | None = None,
                    state: OptimizerState | None = None) -> None:
    """Write ``manifest.txt`` and ``tensors.bin`` (little-endian float32, row-major).

    Tensor lines read ``tensor.<name>=<shape>@<byte offset>``; shapes are
    ``x``-separated. Optimiser moments are stored as ``opt.m.<name>`` etc.
    """
    directory = Path(directory)
    tensors = dict(params.tensors)
    if state is not None:
        for slot in ("m", "v", "v_max"):
            for name, arr in getattr(state, slot).items():
                tensors[f"opt.{slot}.{name}"] = arr
    header = {
        "format": "regagg-checkpoint-v1",
        "activation": params.activation,
        "widths": params.widths,
        "in_channels": params.in_channels,
    }
    if state is not None:
        header.update({"opt.t": state.t, "opt.beta1": repr(state.beta1), "opt.beta2": repr(state.beta2),
                       "opt.eps": repr(state.eps)})
    for k, v in (meta or {}).items():
        header[f"meta.{k}"] = v
    blob = io.BytesIO()
    for name, arr in tensors.items():
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        header[f"tensor.{name}"] = f"{shape}@{blob.tell()}"
        blob.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write(directory / "tensors.bin", blob.getvalue())
    atomic_write(directory / "manifest.txt", format_kv(header))


def load_checkpoint(directory):
    """Inverse of :func:`save_checkpoint`: ``(params, meta, state or None)``."""
    directory = Path(directory)
    manifest = parse_kv((directory / "manifest.txt").read_text())
    if manifest.get("format") != "regagg-checkpoint-v1":
        raise ValueError(f"{directory}: not a regagg checkpoint")
    blob = (directory / "tensors.bin").read_bytes()
    tensors, opt = {}, {"m": {}, "v": {}, "v_max": {}}
    for key, value in manifest.items():
        if not key.startswith("tensor."):
            continue
        name = key[len("tensor."):]
        shape_s, offset = value.split("@")
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        count = int(np.prod(shape, dtype=np.int64))
        offset = int(offset)
        if offset + 4 * count > len(blob):
            raise ValueError(f"{directory}: tensor {name} runs past the end of tensors.bin")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        if name.startswith("opt."):
            _, slot, pname = name.split(".", 2)
            opt[slot][pname] = arr
        else:
            tensors[name] = arr
    params = PixelNetParams(
        tensors, manifest["activation"],
        tuple(int(w) for w in manifest["widths"].split(",")), int(manifest["in_channels"]),
    )
    state = None
    if "opt.t" in manifest:
        state = OptimizerState(float(manifest["opt.beta1"]), float(manifest["opt.beta2"]),
                               float(manifest["opt.eps"]), int(manifest["opt.t"]),
                               opt["m"], opt["v"], opt["v_max"])
    meta = {k[len("meta."):]: v for k, v in manifest.items() if k.startswith("meta.")}
    return params, meta, state


# -- metrics log ---------------------------------------------------------------

def append_metrics(path, rows) -> None:
    """Append rows to a metrics CSV, writing the header for a new file."""
    path = Path(path)
    existing = path.read_text() if path.exists() else ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRICS_HEADER, lineterminator="\n", extrasaction="ignore")
    if not existing:
        writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in METRICS_HEADER})
    atomic_write(path, existing + buf.getvalue())


def write_csv(path, rows, fieldnames) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})
    atomic_write(path, buf.getvalue())


def write_density_png(path, density: np.ndarray, vmax: float) -> None:
    """Grey PNG of ``density`` mapped linearly from [0, vmax] to [0, 255]."""
    from PIL import Image

    scaled = np.clip(np.asarray(density, dtype=np.float64) / (vmax if vmax > 0 else 1.0), 0, 1)
    buf = io.BytesIO()
    Image.fromarray(np.rint(scaled * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())
