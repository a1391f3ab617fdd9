"""Command-line interface: ``tkn <command> [options]``.

Commands: train, evaluate, flops, sweep, make-tlmnist, export-attention.
Training options can come from a flat ``key=value`` config file
(``--config``); explicit flags override it.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path
from typing import Dict, List

from . import checkpoint, flops
from .data import DEFAULT_MNIST_DIR, TLMNIST_TEST_SEED, load_mnist, load_named, make_tlmnist, write_idx
from .exceptions import CheckpointError, ConfigError, DataFormatError, NumericalError
from .export import export_maps, export_roi_overlay
from .network import build_named
from .training import TrainConfig, deterministic, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("tkn")

# key -> (type, default)
TRAIN_KEYS = {
    "model": (str, "tkn6-mini"),
    "data": (str, "mnist-subset:5000"),
    "family": (str, "cauchy"),
    "l2": (float, 1e-4),
    "beta": (float, 4.0),
    "seed": (int, 0),
    "epochs": (int, 10),
    "lr": (float, 0.1),
    "lr_div": (float, 10.0),
    "milestones": (str, ""),
    "batch_size": (int, 128),
    "weight_decay": (float, 1e-4),
    "momentum": (float, 0.9),
    "mnist_dir": (str, DEFAULT_MNIST_DIR),
    "out": (str, "runs/latest"),
}


def read_config(path) -> Dict[str, str]:
    """Parse a flat ``key=value`` file; ``#`` starts a comment. Unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TRAIN_KEYS:
            raise ConfigError(f"unknown config key {key!r} ({path}:{lineno})")
        values[key] = value
    return values


def resolve(args) -> Dict[str, object]:
    """Merge defaults < config file < flags into typed values."""
    raw: Dict[str, object] = {k: d for k, (_, d) in TRAIN_KEYS.items()}
    if getattr(args, "config", None):
        raw.update(read_config(args.config))
    for key in TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    out = {}
    for key, (typ, _) in TRAIN_KEYS.items():
        try:
            out[key] = typ(raw[key])
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw[key]!r}") from e
    return out


def train_config(cfg: Dict[str, object]) -> TrainConfig:
    ms = cfg["milestones"]
    milestones = None
    if ms:
        try:
            milestones = tuple(int(m) for m in str(ms).split(","))
        except ValueError as e:
            raise ConfigError(f"bad milestones {ms!r}") from e
    try:
        return TrainConfig(
            batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr=cfg["lr"], lr_div=cfg["lr_div"],
            milestones=milestones, weight_decay=cfg["weight_decay"], momentum=cfg["momentum"],
            l2_attention=cfg["l2"], beta=cfg["beta"], family=cfg["family"], seed=cfg["seed"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _fmt(rec: Dict[str, object]) -> str:
    return " ".join(f"{k}={v}" for k, v in rec.items())


def _load_data(cfg):
    try:
        return load_named(cfg["data"], cfg["mnist_dir"], cfg["seed"])
    except ValueError as e:
        if isinstance(e, DataFormatError):
            raise
        raise ConfigError(str(e)) from e


def _spec(cfg, hw):
    try:
        return build_named(cfg["model"], hw, 10, cfg["l2"], cfg["beta"], cfg["family"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def run_training(cfg: Dict[str, object], out_dir: Path, echo=print):
    """Train one configuration, writing checkpoints and an append-only metrics log."""
    tc = train_config(cfg)
    train_set, test_set = _load_data(cfg)
    spec = _spec(cfg, train_set.hw)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = out_dir / "metrics.log"
    with open(metrics, "a") as fh:
        fh.write("# " + _fmt({k: cfg[k] for k in TRAIN_KEYS if k not in ("out", "mnist_dir")})
                 + f" milestones_resolved={','.join(map(str, tc.milestones))}\n")

        def on_epoch(rec):
            line = _fmt(rec)
            fh.write(line + "\n")
            fh.flush()
            echo(line)

        with deterministic():
            result = train(spec, tc, train_set, test_set, on_epoch=on_epoch)
        fh.write(f"# best_epoch={result.best_epoch}\n")
    checkpoint.save(result.model, out_dir / "checkpoint.tkn")
    checkpoint.save(result.best, out_dir / "best.tkn")
    return result


def cmd_train(args) -> int:
    cfg = resolve(args)
    run_training(cfg, Path(cfg["out"]))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = checkpoint.load(args.checkpoint)
    hw = model.spec.input_shape[1:]
    if args.data:
        _, test = load_named(args.data, args.mnist_dir)
    else:
        test = load_mnist(args.mnist_dir, "test")
        if hw == (56, 56):
            test = make_tlmnist(test, TLMNIST_TEST_SEED)
    with deterministic():
        err, loss = evaluate(model, test)
    print(f"test_error={err:.6f} test_loss={loss:.6f} n={len(test)}")
    return EXIT_OK


def _parse_hw(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as e:
        raise ConfigError(f"bad input shape {text!r}; expected HxW") from e
    return h, w


def cmd_flops(args) -> int:
    if args.checkpoint:
        obj = checkpoint.load(args.checkpoint)
    else:
        hw = _parse_hw(args.input)
        try:
            obj = build_named(args.model, hw, 10, args.l2, args.beta, args.family)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    report = flops.count(obj)
    print(report.to_records() if args.format == "records" else report.to_text())
    return EXIT_OK


def parse_grid(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad grid {text!r}") from e


def trend_checks(rows: List[Dict[str, object]]) -> Dict[str, bool]:
    """Directional checks over sweep rows: more penalty should never cost more."""
    lo = min(rows, key=lambda r: (r["l2"], r["beta"]))
    hi = max(rows, key=lambda r: (r["l2"], r["beta"]))
    corner = hi["flops"] < lo["flops"]
    pairwise = True
    for a, b in itertools.permutations(rows, 2):
        if a["l2"] <= b["l2"] and a["beta"] <= b["beta"] and a["l2"] * a["beta"] < b["l2"] * b["beta"]:
            pairwise &= b["flops"] <= a["flops"]
    return {"corner": corner, "pairwise": pairwise}


def cmd_sweep(args) -> int:
    base = resolve(args)
    out_root = Path(base["out"])
    rows = []
    header = f"{'l2':>8} {'beta':>5} {'error':>8} {'flops':>12} {'speedup':>8}"
    print(header)
    for l2, beta in itertools.product(parse_grid(args.l2_grid), parse_grid(args.beta_grid)):
        cfg = dict(base, l2=l2, beta=beta)
        cell = out_root / f"l2={l2:g}_beta={beta:g}"
        result = run_training(cfg, cell, echo=lambda line: log.info(line))
        last = result.history[-1]
        report = flops.count(result.model)
        row = {"l2": l2, "beta": beta, "error": last["test_error"], "flops": report.total,
               "conv_macs": report.conv_macs, "speedup": round(report.speedup, 4)}
        rows.append(row)
        print(f"{l2:>8g} {beta:>5g} {row['error']:>8.4f} {row['flops']:>12,} {row['speedup']:>8.3f}")
    checks = trend_checks(rows)
    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "sweep.log", "a") as fh:
        for row in rows:
            fh.write(_fmt(row) + "\n")
        fh.write(_fmt({f"{k}_check": "pass" if v else "fail" for k, v in checks.items()}) + "\n")
    for k, v in checks.items():
        print(f"{k}_check={'pass' if v else 'fail'}")
    return EXIT_OK


def cmd_make_tlmnist(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for part, seed, prefix in (("train", args.seed, "train"), ("test", TLMNIST_TEST_SEED, "t10k")):
        ds = make_tlmnist(load_mnist(args.mnist_dir, part), seed)
        write_idx(ds, out / f"{prefix}-images-idx3-ubyte", out / f"{prefix}-labels-idx1-ubyte")
        print(f"{part}: n={len(ds)} seed={seed} -> {out}")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model = checkpoint.load(args.checkpoint)
    layers = [int(v) for v in args.layers.split(",")] if args.layers else None
    try:
        paths = export_maps(model, args.out, layers)
        if args.overlay:
            for i in layers or [i for i, _ in model.target_layers()]:
                paths.append(export_roi_overlay(model, i, Path(args.out) / f"layer{i:02d}_roi.pgm"))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    for p in paths:
        print(p)
    return EXIT_OK


def _add_train_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--model", help="tkn6, tkn6-mini, cnn6 or cnn6-mini")
    p.add_argument("--data", help="mnist, tlmnist, mnist-subset:<n> or tlmnist-subset:<n>")
    p.add_argument("--family", choices=["gaussian", "cauchy"])
    p.add_argument("--l2", type=float, help="scale penalty for the first block")
    p.add_argument("--beta", type=float, help="penalty buildup factor per block")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-div", dest="lr_div", type=float)
    p.add_argument("--milestones", help="comma-separated epochs at which lr is divided")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--mnist-dir", dest="mnist_dir")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tkn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints + metrics")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test error of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset name; defaults to the MNIST/tlMNIST test set")
    p.add_argument("--mnist-dir", dest="mnist_dir", default=DEFAULT_MNIST_DIR)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("flops", help="parameter and operation counts")
    p.add_argument("--model", default="cnn6")
    p.add_argument("--checkpoint")
    p.add_argument("--input", default="28x28", help="input size HxW")
    p.add_argument("--family", default="cauchy")
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--beta", type=float, default=4.0)
    p.add_argument("--format", choices=["text", "records"], default="text")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep", help="grid over scale penalty and buildup factor")
    _add_train_flags(p)
    p.add_argument("--l2-grid", default="0,1e-4,2e-4,1e-3")
    p.add_argument("--beta-grid", default="1,2,4")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-tlmnist", help="write top-left MNIST as IDX files")
    p.add_argument("--mnist-dir", dest="mnist_dir", default=DEFAULT_MNIST_DIR)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_tlmnist)

    p = sub.add_parser("export-attention", help="write attention maps as PGM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", help="comma-separated layer indices (default: all target layers)")
    p.add_argument("--overlay", action="store_true", help="also write roi overlays")
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
