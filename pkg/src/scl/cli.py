"""Command line entry point: ``scl train | sweep | fitmap | extract``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import model_io
from .data import default_data_dir, load_mnist
from .errors import ConfigError, SCLError
from .masking import STE_NAMES, SteKind
from .trainer import (
    TrainConfig,
    degree,
    density_profile,
    input_connection_heatmap,
    MAPFIT_INPUTS,
    MAPFIT_LR,
    MAPFIT_STEPS,
    NORM_STATS,
    mapfit_experiment,
    train,
)

log = logging.getLogger("scl")

CONFIG_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]
TABLE1_LAMBDAS = (0.0, 0.01, 0.03, 0.08, 0.1)


class UsageError(SCLError):
    pass


# config parsing ---------------------------------------------------------------

def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _schedule(text):
    """``"0:0.1,45:0.01"``"""
    out = []
    for part in filter(None, str(text).split(",")):
        epoch, _, lr = part.partition(":")
        out.append((int(epoch), float(lr)))
    return tuple(out)


def _ranges(text):
    """``"0-15,45-60"`` (half-open epoch ranges); empty string for none."""
    out = []
    for part in filter(None, str(text).split(",")):
        a, _, b = part.partition("-")
        out.append((int(a), int(b)))
    return tuple(out)


def _format_value(key, value):
    if key == "lr_schedule":
        return ",".join(f"{e}:{lr:g}" for e, lr in value)
    if key == "mask_freeze":
        return ",".join(f"{a}-{b}" for a, b in value)
    return str(value)


def _converter(name):
    f = next(f for f in dataclasses.fields(TrainConfig) if f.name == name)
    if name == "lr_schedule":
        return _schedule
    if name == "mask_freeze":
        return _ranges
    default = f.default
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"config line {lineno}: expected key = value")
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown config key {key!r} (line {lineno}); valid keys: {', '.join(CONFIG_KEYS)}")
        out[key] = _converter(key)(value.strip())
    return out


def format_config_text(config: TrainConfig) -> str:
    d = dataclasses.asdict(config)
    return "".join(f"{k} = {_format_value(k, d[k])}\n" for k in CONFIG_KEYS)


def build_config(config_file=None, overrides=None) -> TrainConfig:
    values = {}
    if config_file:
        values.update(parse_config_text(Path(config_file).read_text()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**values)


def run_dir_name(config: TrainConfig) -> str:
    tag = f"{config.lambda1:g}" if config.masked else "base"
    return f"{config.arch}_l1{tag}_s{config.seed}"


# commands ---------------------------------------------------------------------

def summary_for(config: TrainConfig, network, history) -> dict:
    last = history[-1]
    return {
        "arch": config.arch,
        "seed": config.seed,
        "lambda1": config.lambda1,
        "lambda2": config.lambda2,
        "params": degree(network) if config.masked else network.total_masked_weights,
        "total_weights": network.total_masked_weights,
        "final_sparsity": last.sparsity if config.masked else 0.0,
        "final_accuracy": last.metric,
        "epochs": len(history),
        "config": config.to_dict(),
    }


def run_training(config: TrainConfig, data_dir, out_root) -> dict:
    """Train one configuration and write its run directory; returns the summary."""
    data = load_mnist(data_dir)
    network, history = train(config, data)
    run_dir = Path(out_root) / run_dir_name(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    summary = summary_for(config, network, history)
    model_io.save_checkpoint(run_dir / "checkpoint.npz", network, config.to_dict())
    model_io.save_sparse(network, run_dir / "model.sclz", config.seed, config.lambda1, config.lambda2)
    model_io.export_report(history, run_dir / "history.csv", summary, run_dir / "summary.json")
    (run_dir / "config.txt").write_text(format_config_text(config))
    return summary


def _check_data_dir(path):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"--data-dir: dataset directory {p} does not exist")
    return p


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in CONFIG_KEYS}
    config = build_config(args.config, overrides)
    data_dir = _check_data_dir(args.data_dir)
    summary = run_training(config, data_dir, args.out)
    print(f"{run_dir_name(config)}: sparsity {summary['final_sparsity']:.4f} "
          f"accuracy {summary['final_accuracy']:.4f} params {summary['params']}")
    return 0


def _sweep_child(job):
    config, data_dir, out = job
    try:
        return config.lambda1, config.seed, config.masked, run_training(config, data_dir, out), None
    except Exception:  # recorded, sweep keeps going
        return config.lambda1, config.seed, config.masked, None, traceback.format_exc()


def cmd_sweep(args) -> int:
    overrides = {k: getattr(args, k) for k in CONFIG_KEYS if k not in ("lambda1", "seed")}
    base = build_config(args.config, overrides)
    data_dir = _check_data_dir(args.data_dir)
    lambdas = [float(v) for v in args.lambdas.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    jobs = []
    if args.baseline:
        jobs += [dataclasses.replace(base, masked=False, lambda1=0.0, seed=s) for s in seeds]
    jobs += [dataclasses.replace(base, lambda1=l1, seed=s) for l1 in lambdas for s in seeds]
    work = [(c, data_dir, args.out) for c in jobs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_child, work))
    else:
        results = [_sweep_child(w) for w in work]

    rows, failures = [], 0
    for l1, seed, masked, summary, err in results:
        if err is not None:
            failures += 1
            log.error("run lambda1=%g seed=%d failed:\n%s", l1, seed, err)
            continue
        rows.append({
            "lambda1": f"{l1:g}" if masked else "baseline",
            "seed": seed,
            "params": summary["params"],
            "sparsity": summary["final_sparsity"],
            "accuracy": summary["final_accuracy"],
        })
    out = Path(args.out)
    model_io.export_sweep(rows, out / "sweep.csv", out / "sweep.json")
    for r in rows:
        print(f"lambda1={r['lambda1']:>8} seed={r['seed']:<3} params={r['params']:>7} "
              f"sparsity={r['sparsity']:.4f} accuracy={r['accuracy']:.4f}")
    if failures:
        print(f"{failures} run(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_fitmap(args) -> int:
    stes = [s for s in args.ste.split(",")] if args.ste != "all" else list(STE_NAMES)
    for s in stes:
        try:
            SteKind.parse(s)
        except ConfigError as exc:
            raise UsageError(f"--ste: {exc}") from None
    norms = {"on": (True,), "off": (False,), "both": (True, False)}[args.norm]
    seeds = range(args.seeds)
    results = mapfit_experiment(stes, norms, seeds, args.steps, args.lr, args.inputs, stat=args.norm_stat)
    out = Path(args.out)
    rows = []
    for (ste, norm), curves in results.items():
        name = f"{ste.replace(':', '_')}_{'norm' if norm else 'nonorm'}.csv"
        cols = ("step",) + tuple(f"seed{s}" for s in seeds) + ("mean", "median")
        body = (
            (t, *curves[:, t], curves[:, t].mean(), np.median(curves[:, t]))
            for t in range(curves.shape[1])
        )
        model_io.atomic_write(out / name, model_io.csv_bytes(cols, body))
        rows.append((ste, int(norm), np.median(curves[:, -1]), curves[:, -1].mean()))
    model_io.atomic_write(
        out / "fitmap_final.csv",
        model_io.csv_bytes(("ste", "norm", "median_final_mse", "mean_final_mse"), rows),
    )
    for ste, norm, med, _ in rows:
        print(f"{ste:>14} norm={'on ' if norm else 'off'} median final MSE {med:.5f}")
    return 0


def cmd_extract(args) -> int:
    run_dir = Path(args.run_dir)
    ckpt = run_dir / "checkpoint.npz"
    if not ckpt.exists():
        raise UsageError(f"no checkpoint found at {ckpt}")
    network, config = model_io.load_checkpoint(ckpt)
    model_io.save_sparse(network, run_dir / "model.sclz", config.get("seed"), config.get("lambda1"),
                         config.get("lambda2"))
    profile = density_profile(network)
    names = [layer.name for layer in network.masked]
    model_io.atomic_write(
        run_dir / "density_profile.csv",
        model_io.csv_bytes(("layer", "name", "weights", "density"),
                           ((i, n, p.size, d) for i, (n, p, d) in enumerate(zip(names, network.params, profile)))),
    )
    if network.arch == "dense_fc":
        grid = input_connection_heatmap(network)
        model_io.atomic_write(
            run_dir / "heatmap.csv",
            model_io.csv_bytes(tuple(f"c{j}" for j in range(grid.shape[1])), grid.tolist()),
        )
    print(f"wrote {run_dir / 'model.sclz'}, density_profile.csv"
          + (", heatmap.csv" if network.arch == "dense_fc" else ""))
    return 0


# argument parsing -------------------------------------------------------------

def _add_config_flags(p, skip=()):
    for key in CONFIG_KEYS:
        if key in skip:
            continue
        flags = dict.fromkeys((f"--{key.replace('_', '-')}", f"--{key}"))
        p.add_argument(*flags, dest=key, type=_converter(key), default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="scl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--data-dir", default=str(default_data_dir()))
    p.add_argument("--out", default="runs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train a grid of lambda1 values and seeds")
    p.add_argument("--config")
    p.add_argument("--data-dir", default=str(default_data_dir()))
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--lambdas", default=",".join(f"{v:g}" for v in TABLE1_LAMBDAS))
    p.add_argument("--seeds", default="0")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--baseline", action="store_true", help="also train the unmasked network")
    _add_config_flags(p, skip=("lambda1", "seed"))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fitmap", help="output-fitting comparison of STEs")
    p.add_argument("--ste", default="all", help="comma list of STE names or 'all'")
    p.add_argument("--norm", choices=("on", "off", "both"), default="both")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, default=MAPFIT_STEPS)
    p.add_argument("--lr", type=float, default=MAPFIT_LR)
    p.add_argument("--inputs", type=int, default=MAPFIT_INPUTS)
    p.add_argument("--norm-stat", choices=NORM_STATS, default="batch")
    p.add_argument("--out", default="runs/fitmap")
    p.set_defaults(func=cmd_fitmap)

    p = sub.add_parser("extract", help="sparse model, density profile and heatmap from a run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_extract)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"scl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except SCLError as exc:
        print(f"scl {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
