"""Command line entry point: ``regagg <verb> [options]``.

Verbs: gen-data, train, predict, eval, dasymetric, sweep. Exit status is 0 on
success, 1 on a usage or configuration error and 2 when the command fails
while running.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import io as rio
from .dataset import RegionDataset
from .experiments import Splits, score_split, sweep_regions
from .metrics import dasymetric_map
from .pixelnet import init_params, predict
from .ral import ral_forward
from .synthetic import (
    Dataset, TaskSpec, encode_cifar_records, load_cifar10, make_region_maps, make_task,
    normalize, procedural_dataset, read_cifar_records,
)
from .training import TrainConfig, TrainingError, train

logger = logging.getLogger("regagg")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; stored as key=value text."""

    source: str = "procedural"
    cifar_dir: str = ""
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    task: str = "binary"
    tau: float = -1.0
    k_regions: int = 10
    sparse_min_images: int = 29000
    sparse_max_avg_pixels: float = 10.0
    sparse_top_bins: int = 0
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
    sweep_ks: tuple = (1, 5, 10, 15, 25)
    save_final: bool = True

    def train_config(self) -> TrainConfig:
        names = set(TrainConfig.field_names())
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_text(self) -> str:
        return rio.format_kv(asdict(self))

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        raw = rio.parse_kv(text)
        raw.update(overrides or {})
        kinds = {f.name: f.default for f in fields(cls)}
        unknown = sorted(set(raw) - set(kinds))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, text_value in raw.items():
            default = kinds[key]
            try:
                if isinstance(default, bool):
                    if text_value.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(text_value)
                    values[key] = text_value.lower() in ("true", "1")
                elif isinstance(default, tuple):
                    values[key] = tuple(int(v) for v in text_value.split(",") if v.strip())
                elif isinstance(default, int):
                    values[key] = int(text_value)
                elif isinstance(default, float):
                    values[key] = float(text_value)
                else:
                    values[key] = text_value
            except ValueError:
                raise UsageError(f"bad value for {key}: {text_value!r}") from None
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self):
        if self.source not in ("procedural", "cifar10"):
            raise UsageError(f"source must be procedural or cifar10, got {self.source!r}")
        if self.task not in ("binary", "count", "ratio", "sparse"):
            raise UsageError(f"unknown task {self.task!r}")
        try:
            self.train_config()
        except ValueError as exc:
            raise UsageError(str(exc)) from None


# -- bundles ---------------------------------------------------------------------

def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def load_images(cfg: RunConfig, rng: np.random.Generator) -> Dataset:
    if cfg.source == "cifar10":
        data = load_cifar10(cfg.cifar_dir)
        if cfg.n_train > 0:
            data = Dataset(data.train[:cfg.n_train], data.val[:cfg.n_val or None],
                           data.test[:cfg.n_test or None], data.source)
        return data
    return procedural_dataset(rng, cfg.n_train, cfg.n_val, cfg.n_test)


def build_task(cfg: RunConfig, rng: np.random.Generator, corpus: np.ndarray) -> TaskSpec:
    return make_task(cfg.task, rng, corpus, tau=None if cfg.tau < 0 else cfg.tau,
                     min_images=cfg.sparse_min_images, max_avg_pixels=cfg.sparse_max_avg_pixels,
                     top_bins=cfg.sparse_top_bins)


def write_task(path: Path, task: TaskSpec):
    lines = [f"task={task.name}"]
    if task.tau is not None:
        lines.append(f"tau={task.tau!r}")
    if task.palette is not None:
        lines += [f"color={c[0]!r},{c[1]!r},{c[2]!r}" for c in task.palette]
    if task.bins is not None:
        lines.append("bins=" + ",".join(str(int(b)) for b in task.bins))
    rio.atomic_write(path, "\n".join(lines) + "\n")


def read_task(path: Path) -> TaskSpec:
    name, tau, colors, bins = None, None, [], None
    for line in path.read_text().splitlines():
        key, value = line.split("=", 1)
        if key == "task":
            name = value
        elif key == "tau":
            tau = float(value)
        elif key == "color":
            colors.append([float(v) for v in value.split(",")])
        elif key == "bins":
            bins = np.array([int(v) for v in value.split(",") if v], dtype=np.int64)
    return TaskSpec(name, np.array(colors) if colors else None, bins, tau)


def write_split(directory: Path, data: RegionDataset):
    directory.mkdir(parents=True, exist_ok=True)
    rio.atomic_write(directory / "images.bin", encode_cifar_records(data.images))
    rio.write_rasters(directory / "regions.raster", data.regions, "int32le")
    if data.density is not None:
        rio.write_rasters(directory / "density.raster", data.density, "float32le")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["example", "region", "value", "valid"])
    for i, (row, mask) in enumerate(zip(data.labels, data.mask)):
        for j, (v, m) in enumerate(zip(row, mask), start=1):
            writer.writerow([i, j, repr(float(v)), int(m)])
    rio.atomic_write(directory / "labels.csv", buf.getvalue())


def read_split(directory: Path) -> RegionDataset:
    if not (directory / "images.bin").exists():
        raise FileNotFoundError(f"missing split directory {directory}")
    images = read_cifar_records((directory / "images.bin").read_bytes(), str(directory))
    regions = rio.read_rasters(directory / "regions.raster").astype(np.int32).reshape(images.shape[:3])
    density = None
    if (directory / "density.raster").exists():
        density = rio.read_rasters(directory / "density.raster").reshape(images.shape[:3])
    with open(directory / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = max((int(r["region"]) for r in rows), default=0)
    labels = np.zeros((len(images), n))
    mask = np.zeros((len(images), n), bool)
    for r in rows:
        i, j = int(r["example"]), int(r["region"]) - 1
        labels[i, j] = float(r["value"])
        mask[i, j] = r["valid"] == "1"
    return RegionDataset(images, regions, labels, mask, density)


def split_files(bundle: Path) -> list[Path]:
    return [p for s in SPLITS for p in sorted((bundle / s).glob("*")) if p.is_file()]


def read_bundle(bundle: Path) -> tuple[dict, Splits]:
    manifest = rio.parse_kv((bundle / "manifest.txt").read_text())
    splits = Splits(*(read_split(bundle / s) for s in SPLITS))
    return manifest, splits


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    img_rng, task_rng, region_rng = _seeds(cfg.seed, 3)
    images = load_images(cfg, img_rng)
    task = build_task(cfg, task_rng, images.all_images())
    out.mkdir(parents=True, exist_ok=True)
    sizes = {}
    for split in SPLITS:
        data = RegionDataset.synthesize(images.split(split), task, cfg.k_regions, region_rng)
        write_split(out / split, data)
        sizes[split] = len(data)
    write_task(out / "task.txt", task)
    rio.atomic_write(out / "config.txt", cfg.to_text())
    manifest = {
        "source": images.source, "task": cfg.task, "k_regions": cfg.k_regions, "seed": cfg.seed,
        "n_train": sizes["train"], "n_val": sizes["val"], "n_test": sizes["test"],
        "fingerprint": rio.fingerprint(*split_files(out)),
    }
    rio.atomic_write(out / "manifest.txt", rio.format_kv(manifest))
    print(f"wrote {sum(sizes.values())} examples to {out} ({sizes})")
    return 0


def cmd_train(cfg: RunConfig, out: Path, data_dir: Path, resume: Path | None) -> int:
    manifest, splits = read_bundle(data_dir)
    tcfg = cfg.train_config()
    out.mkdir(parents=True, exist_ok=True)
    rio.atomic_write(out / "config.txt", cfg.to_text())
    params = state = None
    start = 0
    if resume is not None:
        params, meta, state = rio.load_checkpoint(resume)
        start = int(meta.get("iteration", 0))
    else:
        params = init_params(np.random.default_rng(tcfg.seed), tcfg.widths, tcfg.activation)
    rio.atomic_write(out / "run.txt", rio.format_kv({
        "dataset": str(data_dir), "dataset_fingerprint": manifest.get("fingerprint", ""),
        "seed": tcfg.seed, "start_iteration": start,
    }))
    if tcfg.total_iterations == 0:
        rio.save_checkpoint(out / "best", params, {"iteration": start})
        print(f"no iterations requested; wrote initial checkpoint to {out / 'best'}")
        return 0
    metrics_path = out / "metrics.csv"
    written = 0

    def flush(result):
        nonlocal written
        rio.append_metrics(metrics_path, result.log[written:])
        written = len(result.log)

    result = train(tcfg, splits.train, splits.val, params=params, state=state,
                   start_iteration=start, callback=flush)
    flush(result)
    rio.save_checkpoint(out / "best", result.best_params, {"iteration": result.best_iteration})
    if cfg.save_final:
        rio.save_checkpoint(out / "final", result.params, {"iteration": result.iteration}, result.state)
    print(f"trained to iteration {result.iteration}; best at {result.best_iteration}")
    return 0


def _load_images_arg(path: Path) -> np.ndarray:
    if path.is_dir():
        path = path / "images.bin"
    return read_cifar_records(path.read_bytes(), str(path))


def cmd_predict(checkpoint: Path, images_path: Path, out: Path, png: bool) -> int:
    params, _, _ = rio.load_checkpoint(checkpoint)
    images = _load_images_arg(images_path)
    density = predict(params, normalize(images))
    out.mkdir(parents=True, exist_ok=True)
    rio.write_rasters(out / "density.raster", density, "float32le")
    vmax = float(density.max()) if density.size else 0.0
    info = {"checkpoint": str(checkpoint), "images": str(images_path), "count": len(density)}
    if png:
        info["png_vmax"] = repr(vmax)
        for i, d in enumerate(density):
            rio.write_density_png(out / "png" / f"{i:05d}.png", d, vmax)
    rio.atomic_write(out / "predict.txt", rio.format_kv(info))
    print(f"wrote {len(density)} density rasters to {out}")
    return 0


def cmd_eval(checkpoint: Path, data_dir: Path, split: str, out: Path | None) -> int:
    params, _, _ = rio.load_checkpoint(checkpoint)
    data = read_split(data_dir / split)
    report = score_split(params, data, {"checkpoint": str(checkpoint), "split": split})
    print(report.summary())
    if out is not None:
        rio.write_csv(out / "eval.csv", [report.row()], ["checkpoint", "split", "pixel_mae", "region_mae"])
    return 0


def cmd_dasymetric(checkpoint: Path, data_dir: Path, split: str, out: Path) -> int:
    params, _, _ = rio.load_checkpoint(checkpoint)
    data = read_split(data_dir / split)
    density = predict(params, data.inputs)
    adjusted = np.stack([dasymetric_map(d, r, y, m)
                         for d, r, y, m in zip(density, data.regions, data.labels, data.mask)])
    out.mkdir(parents=True, exist_ok=True)
    rio.write_rasters(out / "dasymetric.raster", adjusted, "float32le")
    sums = ral_forward(data.matrices, adjusted)
    err = float(np.max(np.abs(sums - data.labels)[data.mask], initial=0.0))
    print(f"wrote {len(adjusted)} adjusted rasters to {out}; max region-sum error {err:.3g}")
    return 0


def cmd_sweep(cfg: RunConfig, out: Path, data_dir: Path | None, ks) -> int:
    if data_dir is not None:
        _, splits = read_bundle(data_dir)
    else:
        img_rng, task_rng, region_rng = _seeds(cfg.seed, 3)
        images = load_images(cfg, img_rng)
        task = build_task(cfg, task_rng, images.all_images())
        splits = Splits(*(RegionDataset.synthesize(images.split(s), task, cfg.k_regions, region_rng)
                          for s in SPLITS))
    out.mkdir(parents=True, exist_ok=True)
    rio.atomic_write(out / "config.txt", cfg.to_text())
    rows = sweep_regions(ks or cfg.sweep_ks, splits, cfg.train_config(), seed=cfg.seed)
    rio.write_csv(out / "sweep.csv", rows, ["k", "pixel_mae", "region_mae"])
    for row in rows:
        print(f"k={row['k']:>4d}  pixel_mae={row['pixel_mae']:.4f}  region_mae={row['region_mae']:.4f}")
    return 0


# -- argument parsing --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="regagg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="build a synthetic dataset bundle")
    p = sub.add_parser("train", parents=[common], help="train a density model on a bundle")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    p = sub.add_parser("predict", parents=[common], help="predict density rasters")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True, help="images.bin or a bundle split directory")
    p.add_argument("--png", action="store_true", help="also write greyscale PNGs")
    for verb in ("eval", "dasymetric"):
        p = sub.add_parser(verb, parents=[common])
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--split", default="test", choices=SPLITS)
    p = sub.add_parser("sweep", parents=[common], help="retrain for several region counts")
    p.add_argument("--data", type=Path)
    p.add_argument("--ks", type=lambda s: [int(v) for v in s.split(",")])
    return parser


def _config(args) -> RunConfig:
    text = args.config.read_text() if args.config else ""
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return RunConfig.from_text(text, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        if args.verb in ("gen-data", "train", "predict", "dasymetric", "sweep") and args.out is None:
            raise UsageError("--out is required")
    except UsageError as exc:
        print(f"regagg: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"regagg: error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.verb == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.verb == "train":
            return cmd_train(cfg, args.out, args.data, args.resume)
        if args.verb == "predict":
            return cmd_predict(args.checkpoint, args.images, args.out, args.png)
        if args.verb == "eval":
            return cmd_eval(args.checkpoint, args.data, args.split, args.out)
        if args.verb == "dasymetric":
            return cmd_dasymetric(args.checkpoint, args.data, args.split, args.out)
        return cmd_sweep(cfg, args.out, args.data, args.ks)
    except (OSError, ValueError, TrainingError, KeyError) as exc:
        print(f"regagg: {args.verb} failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
