"""Command line: verify, gen, train, eval, export.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 data or format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .container import load_dataset, read_sphf, save_dataset
from .datasets import (
    MNIST_FILES,
    Dataset,
    TeacherSpec,
    mnist_ingest,
    project_images,
    rotation_advection_dataset,
    teacher_pairs,
)
from .errors import ConfigError, FormatError, GsnoError, InvalidArgument
from .model import load_checkpoint, save_checkpoint
from .sphere import grid_from_descriptor
from .training import TrainConfig, per_sample_relative_error, train_loop, write_metrics_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("gsno")


class UsageError(Exception):
    pass


def _read_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def _grid(cfg: dict, default: dict):
    try:
        return grid_from_descriptor(cfg.get("grid", default))
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from None


# -- commands --------------------------------------------------------------------------


def cmd_verify(args) -> int:
    if args.inject_fault:
        with verify_mod.inject_fault(args.inject_fault):
            results = verify_mod.run(args.level)
    else:
        results = verify_mod.run(args.level)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


def _gen_teacher(cfg):
    try:
        spec = TeacherSpec.from_dict(cfg["teacher"])
        n = int(cfg["n"])
    except (KeyError, TypeError, ValueError, InvalidArgument) as exc:
        raise ConfigError(f"bad teacher config: {exc}") from None
    L = spec.lmax
    grid = _grid(cfg, {"kind": "gauss-legendre", "nlat": L + 1, "nlon": 2 * L + 2})
    return teacher_pairs(spec, n, grid, float(cfg.get("decay", 0.0))), L


def _gen_advection(cfg):
    try:
        L = int(cfg["lmax"])
        args = (cfg["axis"], float(cfg["dt"]), int(cfg["n_steps"]), int(cfg.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad advection config: {exc}") from None
    grid = _grid(cfg, {"kind": "gauss-legendre", "nlat": L + 1, "nlon": 2 * L + 2})
    ds = rotation_advection_dataset(
        *args, grid, L, int(cfg.get("n_trajectories", 1)), float(cfg.get("decay", 1.0))
    )
    return ds, L


def _gen_mnist(cfg):
    try:
        directory = cfg["mnist_dir"]
    except KeyError:
        names = ", ".join(n for pair in MNIST_FILES.values() for n in pair)
        raise ConfigError(f"mnist_dir is required; expected files: {names}") from None
    grid = _grid(cfg, {"kind": "equiangular", "nlat": 32, "nlon": 32})
    images, labels = mnist_ingest(directory, cfg.get("split", "train"))
    n = int(cfg.get("n", len(labels)))
    fields = project_images(images[:n], grid, float(cfg.get("fov_deg", 100.0)))
    meta = {"task": "mnist", "split": cfg.get("split", "train")}
    return Dataset(grid, fields, labels=labels[:n].astype(np.int64), meta=meta), grid.max_exact_degree()


GENERATORS = {"teacher": _gen_teacher, "advection": _gen_advection, "mnist-project": _gen_mnist}


def cmd_gen(args) -> int:
    cfg = _read_config(args.config)
    ds, lmax = GENERATORS[args.task](cfg)
    ds.meta["config"] = cfg
    save_dataset(args.out, ds, lmax)
    print(f"wrote {len(ds)} records to {args.out}")
    return EXIT_OK


def _train_config(args, ds) -> TrainConfig:
    base = _read_config(args.config) if args.config else {}
    cfg = TrainConfig.from_dict(base) if base else TrainConfig()
    classify = ds.labels is not None and ds.targets is None
    if args.lmax is not None:
        cfg.lmax = args.lmax
    elif not base:
        cfg.lmax = int(ds.meta.get("lmax") or ds.grid.max_exact_degree())
    if args.loss is not None:
        cfg.loss = args.loss
    elif not base:
        cfg.loss = "cross-entropy" if classify else "weighted-mean-relative"
    c_in = ds.inputs.shape[-1]
    if args.channels is not None or args.blocks is not None or not base:
        width = args.channels if args.channels is not None else 8
        blocks = args.blocks if args.blocks is not None else 2
        if blocks < 1:
            raise ConfigError("--blocks must be at least 1")
        if classify:
            cfg.channels = [c_in] + [width] * blocks
        else:
            cfg.channels = [c_in] + [width] * (blocks - 1) + [ds.targets.shape[-1]]
    if classify and cfg.loss == "cross-entropy" and not cfg.n_classes:
        cfg.n_classes = int(ds.labels.max()) + 1
    for name in ("branches", "epochs", "lr", "seed", "batch_size", "max_steps", "activation", "output_activation"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.no_residual:
        cfg.residual = False
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    cfg = _train_config(args, ds)
    result = train_loop(cfg, ds)
    out = save_checkpoint(result.model, args.out)
    (out / "train_config.json").write_text(json.dumps(_config_dict(cfg), indent=2, sort_keys=True) + "\n")
    metrics = Path(args.metrics) if args.metrics else out / "metrics.csv"
    write_metrics_csv(result.metrics, metrics)
    final = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"trained {result.steps} steps, final epoch loss {final:.6g}; checkpoint {out}")
    return EXIT_OK


def _config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    if args.baseline:
        if ds.targets is None:
            raise UsageError("baselines need a regression dataset")
        pred = ds.inputs if args.baseline == "persistence" else ds.targets
        model = None
    else:
        if not args.checkpoint:
            raise UsageError("either --checkpoint or --baseline is required")
        model = load_checkpoint(args.checkpoint)
        if model.grid.key != ds.grid.key:
            raise FormatError("checkpoint and dataset grids differ")
        if ds.inputs.shape[-1] != model.in_channels:
            raise FormatError("checkpoint and dataset channel counts differ")
        pred = np.concatenate([model(ds.inputs[i : i + 64]) for i in range(0, len(ds), 64)])
    metric = args.metric or ("accuracy" if ds.targets is None else "mre")
    if metric == "accuracy":
        if ds.labels is None or model is None or model.head is None:
            raise UsageError("accuracy needs a labelled dataset and a classifier checkpoint")
        per_sample = (np.argmax(pred, axis=-1) == ds.labels).astype(float)
    else:
        if ds.targets is None:
            raise UsageError("mre needs a regression dataset")
        if pred.shape != ds.targets.shape:
            raise FormatError(f"prediction shape {pred.shape} does not match targets {ds.targets.shape}")
        per_sample = per_sample_relative_error(pred, ds.targets, ds.grid)
    value = float(per_sample.mean())
    print(f"{metric} {value:.17g}")
    if args.per_sample:
        with open(args.per_sample, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", metric])
            for i, v in enumerate(per_sample):
                w.writerow([i, repr(float(v))])
    return EXIT_OK


def export_rows(header: dict, values: np.ndarray):
    """Rows of (lat_deg, lon_deg, *channels) for one record of shape (nlat, nlon, C)."""
    grid = grid_from_descriptor(header["grid"])
    lat = 90.0 - np.degrees(grid.colatitudes)
    lon = np.degrees(grid.longitudes)
    for i in range(grid.nlat):
        for j in range(grid.nlon):
            yield [lat[i], lon[j], *values[i, j]]


def cmd_export(args) -> int:
    header, arrays = read_sphf(args.file)
    if header.get("role") == "coeffs" or not header.get("grid"):
        raise FormatError("export needs a grid field container")
    name = args.array or ("values" if "values" in arrays else "input")
    if name not in arrays:
        raise UsageError(f"array {name!r} not in container; available: {sorted(arrays)}")
    data = arrays[name]
    if not 0 <= args.record < data.shape[0]:
        raise UsageError(f"record {args.record} out of range (count {data.shape[0]})")
    rec = data[args.record]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["lat", "lon"] + [f"ch{c}" for c in range(rec.shape[-1])])
        for row in export_rows(header, rec):
            w.writerow([f"{v:.17g}" for v in row])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def import_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of ``export``: (lat, lon, values (rows, C))."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return raw[:, 0], raw[:, 1], raw[:, 2:]


# -- parser ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsno", description="Spherical Green's-function neural operators.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--level", choices=verify_mod.LEVELS, default="quick")
    v.add_argument("--inject-fault", choices=["wigner"], help=argparse.SUPPRESS)
    v.set_defaults(fn=cmd_verify)

    g = sub.add_parser("gen", help="generate a dataset container")
    g.add_argument("task", choices=sorted(GENERATORS))
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset container")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--config", help="JSON training config; flags override it")
    t.add_argument("--lmax", type=int)
    t.add_argument("--channels", type=int, help="hidden width")
    t.add_argument("--blocks", type=int)
    t.add_argument("--branches", type=_branches)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--loss", choices=["weighted-mean-relative", "weighted-mse", "cross-entropy"])
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--activation")
    t.add_argument("--output-activation", help="activation of the last block (default: identity for field outputs)")
    t.add_argument("--no-residual", action="store_true")
    t.add_argument("--metrics", help="metrics CSV path (default: <out>/metrics.csv)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=["persistence", "truth"])
    e.add_argument("--metric", choices=["mre", "accuracy"])
    e.add_argument("--per-sample", help="write per-sample values to this CSV")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export", help="export one field record to CSV")
    x.add_argument("file")
    x.add_argument("--out")
    x.add_argument("--record", type=int, default=0)
    x.add_argument("--array", help="record array to export (default: values or input)")
    x.set_defaults(fn=cmd_export)
    return p


def _branches(text: str) -> str:
    text = text.upper()
    if not text or any(c not in "EIA" for c in text) or len(set(text)) != len(text):
        raise argparse.ArgumentTypeError("branches must be a non-empty subset of E, I, A")
    return "".join(c for c in "EIA" if c in text)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"gsno: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"gsno: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, GsnoError, ValueError, OSError) as exc:
        print(f"gsno: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
