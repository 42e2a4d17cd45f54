"""Command-line entry point: ``trustseg {gen-data,train,eval,sweep,noisy-cls,verify}``.

Training settings resolve as flags > ``--config`` file (key=value lines) >
defaults. Every run directory gets a ``manifest.txt``; passing it back as
``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, gen_scenes, read_dataset, with_scribbles, write_dataset
from .diffcore import load_params, save_params
from .experiments import noisy_cls_sweep
from .metrics import write_class_csv, write_trimap_csv
from .plots import line_chart
from .trainer import (
    TrainConfig,
    TrainError,
    evaluate,
    new_state,
    pretrain_pce,
    run_method,
    write_history_csv,
)

log = logging.getLogger("trustseg")

OUT_ENV = "TRUSTSEG_OUT"
DEFAULT_OUT = "runs"

# CLI flag dest -> TrainConfig field
FLAG_TO_CONFIG = {
    "method": "method",
    "lam": "lam",
    "epsilon": "epsilon",
    "nu": "nu",
    "epochs": "epochs",
    "m": "m",
    "lr": "lr",
    "seed": "seed",
    "pretrain_epochs": "pretrain_epochs",
    "pretrain_lr": "pretrain_lr",
    "batch_size": "batch_size",
    "threads": "threads",
    "w_scale": "w_scale",
    "sigma_color": "sigma_color",
}
# keys a config file may carry besides TrainConfig fields
RUN_KEYS = ("data", "scribble_ratio")
# manifest bookkeeping, ignored when a manifest is read back as a config
MANIFEST_KEYS = ("run_id", "command", "out", "version", "started")

SWEEP_PARAMS = {"lambda": "lam", "epsilon": "epsilon", "nu": "nu", "scribble-ratio": "scribble_ratio"}


class CliError(Exception):
    pass


# -- run manifest -------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: TrainConfig
    data: str
    out: str
    scribble_ratio: float | None = None
    timings: dict[str, float] = field(default_factory=dict)
    started: str = ""

    @property
    def run_id(self) -> str:
        h = hashlib.sha1()
        h.update(self.command.encode())
        for k, v in sorted(self.config.to_dict().items()):
            h.update(f"{k}={v};".encode())
        h.update(f"{self.data};{self.scribble_ratio}".encode())
        return h.hexdigest()[:12]

    def write(self, path: Path) -> None:
        lines = [
            "# trustseg run manifest",
            f"run_id={self.run_id}",
            f"command={self.command}",
            f"version={__version__}",
            f"started={self.started}",
            f"data={self.data}",
            f"out={self.out}",
        ]
        if self.scribble_ratio is not None:
            lines.append(f"scribble_ratio={self.scribble_ratio}")
        lines += [f"config.{k}={v}" for k, v in self.config.to_dict().items()]
        lines += [f"seconds.{k}={v:.3f}" for k, v in self.timings.items()]
        path.write_text("\n".join(lines) + "\n")


def read_config_file(path: str) -> tuple[dict, dict]:
    """(TrainConfig overrides, run keys) from a key=value file or a run manifest."""
    cfg_names = {f.name for f in fields(TrainConfig)}
    cfg, run = {}, {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.removeprefix("config.")
        if key in cfg_names:
            cfg[key] = value
        elif key in RUN_KEYS:
            run[key] = value
        elif key in MANIFEST_KEYS or key.startswith("seconds."):
            continue
        else:
            raise CliError(f"{path}:{n}: unknown key {key!r}")
    return cfg, run


def resolve_config(args) -> tuple[TrainConfig, dict]:
    """Flags > config file > defaults."""
    cfg, run = read_config_file(args.config) if getattr(args, "config", None) else ({}, {})
    try:
        config = TrainConfig.from_dict(cfg)
    except (TrainError, ValueError) as exc:
        raise CliError(f"bad config value: {exc}") from None
    flags = {FLAG_TO_CONFIG[k]: v for k, v in vars(args).items() if k in FLAG_TO_CONFIG and v is not None}
    config = replace(config, **flags)
    for key in RUN_KEYS:
        if getattr(args, key, None) is not None:
            run[key] = getattr(args, key)
    return config, run


def out_dir(args, name: str) -> Path:
    path = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, DEFAULT_OUT)) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def parse_values(text: str) -> list[float]:
    """Comma list of floats; ``a,b,...,c`` expands the arithmetic progression."""
    items = [t.strip() for t in text.split(",") if t.strip()]
    if "..." not in items:
        try:
            return [float(t) for t in items]
        except ValueError as exc:
            raise CliError(f"bad value list {text!r}: {exc}") from None
    i = items.index("...")
    if i < 2 or i != len(items) - 2:
        raise CliError(f"'...' needs two values before and one after it: {text!r}")
    head = [float(t) for t in items[:i]]
    step, last = head[-1] - head[-2], float(items[-1])
    if step <= 0:
        raise CliError("'...' needs an increasing progression")
    n = int(round((last - head[0]) / step))
    return [round(head[0] + k * step, 10) for k in range(n + 1)]


def _load_data(run: dict, need_ratio: bool = True):
    data = run.get("data")
    if not data:
        raise CliError("--data is required")
    if not Path(data).is_dir():
        raise CliError(f"dataset directory {data} does not exist")
    ratio = float(run.get("scribble_ratio", 1.0)) if need_ratio else None
    try:
        info, train, val = read_dataset(data, ratio)
    except DataError as exc:
        if need_ratio and "no scribbles" in str(exc):
            # ratio not materialized on disk: derive it like gen-data would
            info, train, val = read_dataset(data, None)
            train = with_scribbles(train, ratio, seed=_dataset_seed(data))
        else:
            raise CliError(str(exc)) from None
    return info, train, val, ratio


def _dataset_seed(root: str) -> int:
    for line in (Path(root) / "manifest.txt").read_text().splitlines():
        if line.startswith("seed="):
            return int(line.split("=", 1)[1])
    return 0


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    h, w = args.size
    n_val = args.n_val if args.n_val is not None else max(1, args.n // 2)
    train = gen_scenes(args.n, h, w, args.classes, args.noise_std, seed=args.seed)
    val = gen_scenes(n_val, h, w, args.classes, args.noise_std, seed=args.seed + 1)
    info = write_dataset(args.out, train, val, args.classes, seed=args.seed)
    print(f"wrote {len(info.train)} train + {len(info.val)} val scenes to {info.root}")
    return 0


def _train_once(config: TrainConfig, train, val, n_classes: int, pretrained=None):
    t0 = time.perf_counter()
    state = run_method(config, train, n_classes, val, pretrained=pretrained)
    return state, time.perf_counter() - t0


def cmd_train(args) -> int:
    config, run = resolve_config(args)
    info, train, val, ratio = _load_data(run)
    config.validate(info.n_classes)
    out = out_dir(args, f"train-{config.method}")
    started = _stamp()
    state, seconds = _train_once(config, train, val, info.n_classes)
    with open(out / "history.csv", "w", newline="") as fh:
        write_history_csv(fh, state.history)
    with open(out / "model.ckpt", "wb") as fh:
        save_params(state.params, fh)
    final = evaluate(state.params, val, info.n_classes)
    _write_csv(out / "metrics.csv", ["split", "miou"], [["val", f"{final['miou']:.6f}"]])
    m = RunManifest("train", config, str(run["data"]), str(out), ratio, {"train": seconds}, started)
    m.write(out / "manifest.txt")
    print(f"{config.method}: val mIoU {final['miou']:.4f} ({seconds:.1f}s) -> {out}")
    return 0


def cmd_eval(args) -> int:
    info, _, val, _ = _load_data({"data": args.data}, need_ratio=False)
    try:
        with open(args.checkpoint, "rb") as fh:
            params = load_params(fh)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from None
    if params.n_classes != info.n_classes:
        raise CliError(f"checkpoint predicts {params.n_classes} classes, dataset has {info.n_classes}")
    if args.split == "train":
        _, samples, _ = read_dataset(args.data, None)
    else:
        samples = val
    widths = [int(v) for v in parse_values(args.trimaps)] if args.trimaps else []
    out = out_dir(args, "eval")
    res = evaluate(params, samples, info.n_classes, widths)
    with open(out / "trimap.csv", "w", newline="") as fh:
        write_trimap_csv(fh, res["trimap"], label=args.split)
    with open(out / "classes.csv", "w", newline="") as fh:
        write_class_csv(fh, res["confusion"], label=args.split)
    _write_csv(out / "metrics.csv", ["split", "miou"], [[args.split, f"{res['miou']:.6f}"]])
    print(f"{args.split} mIoU {res['miou']:.4f}")
    for w, v in res["trimap"]:
        print(f"  trimap {w}: {v:.4f}")
    return 0


def cmd_sweep(args) -> int:
    config, run = resolve_config(args)
    key = SWEEP_PARAMS[args.param]
    values = parse_values(args.values)
    out = out_dir(args, f"sweep-{args.param}")
    rows, cache = [], {}
    started = _stamp()
    for v in values:
        cfg, r = config, dict(run)
        if key == "scribble_ratio":
            r["scribble_ratio"] = v
        else:
            cfg = replace(cfg, **{key: v})
        info, train, val, ratio = _load_data(r)
        cfg.validate(info.n_classes)
        # PCE pretraining does not depend on lambda/epsilon/nu; share it across values
        ck = (ratio, cfg.seed, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.hidden, cfg.depth)
        if ck not in cache:
            st = new_state(cfg, info.n_classes, train[0].image.shape[2])
            cache[ck] = pretrain_pce(st, train, cfg.pretrain_epochs, cfg).params
        state, seconds = _train_once(cfg, train, val, info.n_classes, pretrained=cache[ck])
        miou = evaluate(state.params, val, info.n_classes)["miou"]
        rows.append([args.param, f"{v:g}", cfg.method, f"{miou:.6f}", f"{seconds:.2f}"])
        print(f"{args.param}={v:g}: val mIoU {miou:.4f} ({seconds:.1f}s)")
    _write_csv(out / "sweep.csv", ["param", "value", "method", "miou", "seconds"], rows)
    if not args.no_svg:
        line_chart(
            out / "sweep.svg", values, {config.method: [float(r[3]) for r in rows]},
            xlabel=args.param, ylabel="val mIoU", title=f"{config.method}: {args.param} sweep",
            categorical=True,
        )
    RunManifest(f"sweep {args.param} {args.values}", config, str(run.get("data")), str(out),
                run.get("scribble_ratio"), {"total": sum(float(r[4]) for r in rows)}, started).write(out / "manifest.txt")
    return 0


def cmd_noisy_cls(args) -> int:
    eps = parse_values(args.epsilon_values)
    out = out_dir(args, "noisy-cls")
    t0 = time.perf_counter()
    rows = noisy_cls_sweep(
        eps, corruption=args.corruption, n_classes=args.classes, n_train=args.n_train,
        seed=args.seed, repeats=args.repeats, epochs=args.epochs,
    )
    _write_csv(out / "noisy_cls.csv", ["epsilon", "accuracy"], [[f"{e:g}", f"{a:.6f}"] for e, a in rows])
    if not args.no_svg:
        line_chart(
            out / "noisy_cls.svg", [e for e, _ in rows], {"robust CE": [a for _, a in rows]},
            xlabel="epsilon", ylabel="clean test accuracy", title=f"label corruption {args.corruption:g}",
        )
    for e, a in rows:
        print(f"epsilon={e:g}: accuracy {a:.4f}")
    print(f"{time.perf_counter() - t0:.1f}s -> {out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES

    names = args.suite or list(SUITES)
    results = []
    for n in names:
        r = SUITES[n]()
        print(r.line(), flush=True)
        results.append(r)
    if args.out:
        out = out_dir(args, "verify")
        _write_csv(
            out / "verify.csv", ["suite", "passed", "checks", "seconds", "detail"],
            [[r.name, int(r.passed), r.checks, f"{r.seconds:.3f}", r.detail] for r in results],
        )
    failed = [r.name for r in results if not r.passed]
    print("all suites passed" if not failed else f"FAILED: {', '.join(failed)}")
    return 0 if not failed else 1


# -- argument parsing -----------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (override --config)")
    g.add_argument("--data", help="dataset directory written by gen-data")
    g.add_argument("--config", help="key=value file or a run manifest.txt")
    g.add_argument("--method", choices=("pce-gd", "grid-gd", "grid-tr"))
    g.add_argument("--scribble-ratio", dest="scribble_ratio", type=float)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--nu", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--m", type=int, help="epochs per Stage-A solve")
    g.add_argument("--lr", type=float)
    g.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    g.add_argument("--pretrain-lr", dest="pretrain_lr", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--w-scale", dest="w_scale", type=float)
    g.add_argument("--sigma-color", dest="sigma_color", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="Stage-A worker threads (1 = deterministic)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trustseg", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic scribble dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20, help="training scenes")
    p.add_argument("--n-val", dest="n_val", type=int, help="validation scenes (default n/2)")
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise-std", dest="noise_std", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one method, write history/metrics/checkpoint")
    _train_flags(p)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/train-METHOD)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU and trimap mIoU of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trimaps", default="1,2,4,8", help="band widths, e.g. '1,2,4,8'")
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train+eval per value of one parameter")
    p.add_argument("--param", required=True, choices=tuple(SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="e.g. '0,0.1,1,10,1e6' or '0,0.1,...,0.6'")
    _train_flags(p)
    p.add_argument("--out")
    p.add_argument("--no-svg", dest="no_svg", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("noisy-cls", help="robust CE on synthetic classification with corrupted labels")
    p.add_argument("--corruption", type=float, default=0.5)
    p.add_argument("--epsilon-values", dest="epsilon_values", default="0,0.1,...,0.6")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--n-train", dest="n_train", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--no-svg", dest="no_svg", action="store_true")
    p.set_defaults(func=cmd_noisy_cls)

    p = sub.add_parser("verify", help="run the oracle and invariant suites")
    p.add_argument("--suite", action="append", choices=("maxflow", "expansion", "gradients", "chainrule", "robust", "invariants"))
    p.add_argument("--out", help="also write verify.csv here")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (CliError, DataError, TrainError) as exc:
        print(f"trustseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
