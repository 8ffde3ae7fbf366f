"""Batch command line: train, localize, repair, evaluate, corrupt.

Every command writes a JSON report that embeds its effective configuration.
Exit codes: 0 ok, 2 configuration error, 3 data or file-format error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .archsearch import LEVELS, RepairConfig, SearchConfig, repair, repair_sets
from .data import CORRUPTIONS, CorruptionSpec, corrupt, gen_synthetic, load_dataset, save_dataset, split_repair
from .engine.train import TrainConfig
from .errors import ConfigError, FormatError, InputError, NumericFailure, RepairError, UnsupportedError, UsageError
from .localizer import localize_vulnerable_block
from .modelio import load_model, save_model
from .network import build_mini_resnet, train_network

log = logging.getLogger("blockrepair")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# flag defaults per command; None means "required"
DEFAULTS = {
    "train": {"data": None, "out": None, "val_data": None, "width": 16, "epochs": 60, "patience": 10,
              "lr": 0.1, "weight_decay": 0.0005, "batch_size": 128, "seed": 0, "report": None},
    "localize": {"model": None, "data": None, "train_data": None, "fail_cap": 100, "train_cap": 2000,
                 "top_k": 50, "epsilon": None, "threshold": 0.0, "include_head": False, "seed": 0, "report": None},
    "repair": {"model": None, "data": None, "train_data": None, "clean_data": None, "corrupt_data": None,
               "block": "auto", "level": "block", "out": None, "report": None, "seed": 0, "fail_cap": 100,
               "train_cap": 2000, "top_k": 50, "epsilon": None, "threshold": 0.0, "epochs": 50, "patience": 5,
               "finetune_epochs": 20, "finetune_patience": 5, "weight_lr": 0.1, "alpha_lr": 3e-4, "finetune_lr": 0.01,
               "weight_decay": 0.0005, "batch_size": 128, "split_ratio": 0.8, "unfreeze_all": False},
    "evaluate": {"model": None, "data": None, "corruption": None, "severity": None, "corruption_seed": 0,
                 "report": None},
    "corrupt": {"data": None, "kind": None, "severity": None, "seed": 0, "out": None, "report": None},
    "gen-synthetic": {"task": "shapes", "n": 2000, "classes": 10, "seed": 0, "image_size": 16, "out": None},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _block_arg(v: str):
    if v == "auto":
        return v
    try:
        return int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a block index, got {v!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blockrepair", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON file of flag values; explicit flags win")
        return s

    t = cmd("train", "train a mini ResNet")
    t.add_argument("--data")
    t.add_argument("--val-data", help="validation set (default: seeded 20%% split of --data)")
    t.add_argument("--out")
    t.add_argument("--width", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--report")

    lo = cmd("localize", "find the most vulnerable block")
    lo.add_argument("--model")
    lo.add_argument("--data", help="dataset whose failures are collected")
    lo.add_argument("--train-data", help="training set joined with the failures")
    lo.add_argument("--fail-cap", type=int)
    lo.add_argument("--train-cap", type=int)
    lo.add_argument("--top-k", type=int)
    lo.add_argument("--epsilon", type=float, help="absolute score threshold instead of top-k")
    lo.add_argument("--threshold", type=float, help="activation threshold t")
    lo.add_argument("--include-head", action="store_const", const=True)
    lo.add_argument("--seed", type=int)
    lo.add_argument("--report")

    r = cmd("repair", "search and fine-tune one block")
    r.add_argument("--model")
    r.add_argument("--data", help="dataset whose failures drive the repair")
    r.add_argument("--train-data")
    r.add_argument("--clean-data", help="clean evaluation set for the report")
    r.add_argument("--corrupt-data", help="corrupted evaluation set for the report")
    r.add_argument("--block", type=_block_arg)
    r.add_argument("--level", choices=LEVELS)
    r.add_argument("--out")
    r.add_argument("--report")
    r.add_argument("--seed", type=int)
    r.add_argument("--fail-cap", type=int)
    r.add_argument("--train-cap", type=int)
    r.add_argument("--top-k", type=int)
    r.add_argument("--epsilon", type=float)
    r.add_argument("--threshold", type=float)
    r.add_argument("--epochs", type=int, help="search epochs")
    r.add_argument("--patience", type=int)
    r.add_argument("--finetune-epochs", type=int)
    r.add_argument("--finetune-patience", type=int)
    r.add_argument("--weight-lr", type=float)
    r.add_argument("--alpha-lr", type=float)
    r.add_argument("--finetune-lr", type=float)
    r.add_argument("--weight-decay", type=float)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--split-ratio", type=float)
    r.add_argument("--unfreeze-all", action="store_const", const=True)

    e = cmd("evaluate", "accuracy of a model on a dataset")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--corruption")
    e.add_argument("--severity", type=int)
    e.add_argument("--corruption-seed", type=int)
    e.add_argument("--report")

    c = cmd("corrupt", "write a corrupted copy of a dataset")
    c.add_argument("--data")
    c.add_argument("--kind")
    c.add_argument("--severity", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.add_argument("--report")

    g = cmd("gen-synthetic", "write a synthetic dataset")
    g.add_argument("--task", choices=("shapes", "gaussian-blobs"))
    g.add_argument("--n", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--out")
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults <- config file <- explicit flags; then check required keys."""
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"--config: no such file {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError("--config must hold a JSON object")
        unknown = sorted(set(k.replace("-", "_") for k in loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"--config: unknown keys for {command}: {', '.join(unknown)}")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    required = {"train": ("data", "out"), "localize": ("model", "data"), "repair": ("model", "data", "out"),
                "evaluate": ("model", "data"), "corrupt": ("data", "kind", "severity", "out"),
                "gen-synthetic": ("out",)}[command]
    for key in required:
        if cfg.get(key) is None:
            raise ConfigError(f"missing required flag --{key.replace('_', '-')}")
    return cfg


def _write_report(path, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2, allow_nan=False, default=_json_default) + "\n"
    if path:
        p = Path(path)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, p)
    else:
        sys.stdout.write(text)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(v):
    """JSON-safe: NaN -> None."""
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def _positive(cfg, *keys, allow_zero=()):
    for k in keys:
        v = cfg[k]
        if v is None:
            continue
        if v < 0 or (v == 0 and k not in allow_zero):
            raise ConfigError(f"--{k.replace('_', '-')} must be {'>= 0' if k in allow_zero else '> 0'}, got {v}")


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: dict) -> dict:
    _positive(cfg, "width", "epochs", "patience", "batch_size", "lr", allow_zero=("epochs", "lr"))
    data = load_dataset(cfg["data"])
    if cfg["val_data"]:
        train, val = data, load_dataset(cfg["val_data"])
    else:
        train, val = split_repair(data, 0.8, cfg["seed"])
    tcfg = TrainConfig(learning_rate=cfg["lr"], weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"],
                       max_epochs=cfg["epochs"], patience=min(cfg["patience"], max(cfg["epochs"], 1)), seed=cfg["seed"])
    net = build_mini_resnet(cfg["width"], data.num_classes, data.shape, seed=cfg["seed"])
    hist = train_network(net, train, val, tcfg)
    save_model(net, cfg["out"])
    return {
        "command": "train", "model": cfg["out"], "seed": cfg["seed"], "config": cfg, "train_config": tcfg.to_dict(),
        "final_train_accuracy": net.accuracy(train.images, train.labels),
        "final_val_accuracy": net.accuracy(val.images, val.labels),
        "epochs_run": hist.epochs_run, "early_stopped": hist.early_stopped, "best_epoch": hist.best_epoch,
        "history": hist.to_dict(), "num_parameters": net.num_parameters(),
    }


def _repair_config(cfg: dict, level: str = "block") -> RepairConfig:
    search = SearchConfig(
        weight_lr=cfg.get("weight_lr", 0.1), weight_decay=cfg.get("weight_decay", 0.0005),
        alpha_lr=cfg.get("alpha_lr", 3e-4), finetune_lr=cfg.get("finetune_lr", 0.01),
        epochs=cfg.get("epochs", 50), patience=cfg.get("patience", 5),
        batch_size=cfg.get("batch_size", 128), finetune_epochs=cfg.get("finetune_epochs", 20),
        finetune_patience=cfg.get("finetune_patience", 5), split_ratio=cfg.get("split_ratio", 0.8), seed=cfg["seed"])
    return RepairConfig(level=level, k=cfg["top_k"], fail_cap=cfg["fail_cap"], train_cap=cfg["train_cap"],
                        threshold_t=cfg["threshold"], epsilon=cfg["epsilon"],
                        include_head=bool(cfg.get("include_head", False)),
                        unfreeze_all=bool(cfg.get("unfreeze_all", False)), search=search)


def _check_localize_flags(cfg):
    if cfg["epsilon"] is None and (cfg["top_k"] is None or cfg["top_k"] < 1):
        raise ConfigError(f"--top-k must be >= 1, got {cfg['top_k']}")
    _positive(cfg, "fail_cap", "train_cap")


def cmd_localize(cfg: dict) -> dict:
    _check_localize_flags(cfg)
    net = load_model(cfg["model"])
    data = load_dataset(cfg["data"])
    train = load_dataset(cfg["train_data"]) if cfg["train_data"] else None
    rcfg = _repair_config(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # an empty failure set is reported, not warned
        fails, rset = repair_sets(net, data, train, rcfg)
        rep = localize_vulnerable_block(net, rset, fails if len(fails) == 0 else None, k=cfg["top_k"],
                                        threshold_t=cfg["threshold"], seed=cfg["seed"], epsilon=cfg["epsilon"],
                                        include_head=rcfg.include_head)
    out = rep.to_dict()
    out.update({"command": "localize", "config": cfg, "n_collected_failures": len(fails),
                "noop": rep.chosen_block is None})
    return out


def cmd_repair(cfg: dict) -> dict:
    _check_localize_flags(cfg)
    _positive(cfg, "batch_size", "patience", "finetune_patience")
    net = load_model(cfg["model"])
    block = cfg["block"]
    if block != "auto":
        block = int(block)
        if not 1 <= block <= net.spec.B:
            raise ConfigError(f"--block {block} out of range 1..{net.spec.B}")
        if not net.spec.block(block).searchable:
            raise ConfigError(f"--block {block} is the {net.spec.block(block).role} block; it has no searchable interior")
    data = load_dataset(cfg["data"])
    train = load_dataset(cfg["train_data"]) if cfg["train_data"] else None
    evals = {}
    corrupted = data.provenance.get("kind") == "corrupted"
    if cfg["clean_data"]:
        evals["clean"] = load_dataset(cfg["clean_data"])
    elif not corrupted:
        evals["clean"] = data
    if cfg["corrupt_data"]:
        evals["corrupt"] = load_dataset(cfg["corrupt_data"])
    elif corrupted:
        evals["corrupt"] = data
    rcfg = _repair_config(cfg, cfg["level"])
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        repaired, rep = repair(net, data, train, rcfg, block=block, evals=evals)
    save_model(repaired, cfg["out"])
    out = rep.to_dict()
    out.update({"command": "repair", "config": cfg, "model": cfg["out"]})
    return out


def _accuracy_report(net, ds) -> dict:
    keep = ~ds.flags
    x, y = ds.images[keep], ds.labels[keep]
    pred = net.predict(x) if len(y) else np.zeros(0, np.int64)
    per = []
    for c in range(ds.num_classes):
        m = y == c
        per.append(_clean(float((pred[m] == c).mean())) if m.any() else None)
    return {"accuracy": _clean(float((pred == y).mean())) if len(y) else None, "per_class_accuracy": per,
            "n": int(len(y)), "excluded": int((~keep).sum()), "correct": int((pred == y).sum())}


def cmd_evaluate(cfg: dict) -> dict:
    net = load_model(cfg["model"])
    data = load_dataset(cfg["data"])
    spec = None
    if cfg["corruption"] is not None:
        if cfg["severity"] is None:
            raise ConfigError("--corruption needs --severity")
        spec = CorruptionSpec(cfg["corruption"], cfg["severity"], cfg["corruption_seed"])
        data = corrupt(data, spec)
    out = _accuracy_report(net, data)
    out.update({"command": "evaluate", "config": cfg, "seed": cfg["corruption_seed"],
                "corruption": None if spec is None else {"kind": spec.kind, "severity": spec.severity,
                                                         "seed": spec.seed, "parameter": spec.parameter},
                "provenance": data.provenance})
    return out


def cmd_corrupt(cfg: dict) -> dict:
    spec = CorruptionSpec(cfg["kind"], cfg["severity"], cfg["seed"])
    data = load_dataset(cfg["data"])
    out = corrupt(data, spec)
    save_dataset(out, cfg["out"])
    return {"command": "corrupt", "config": cfg, "seed": cfg["seed"], "out": cfg["out"], "n": len(out),
            "provenance": out.provenance,
            "mean_abs_deviation": float(np.abs(out.images.astype(np.float64) - data.images).mean())}


def cmd_gen_synthetic(cfg: dict) -> dict:
    ds = gen_synthetic(cfg["task"], cfg["n"], cfg["classes"], cfg["seed"], cfg["image_size"])
    save_dataset(ds, cfg["out"])
    return {"command": "gen-synthetic", "config": cfg, "seed": cfg["seed"], "out": cfg["out"], "n": len(ds),
            "class_counts": ds.class_counts().tolist()}


COMMANDS = {"train": cmd_train, "localize": cmd_localize, "repair": cmd_repair, "evaluate": cmd_evaluate,
            "corrupt": cmd_corrupt, "gen-synthetic": cmd_gen_synthetic}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericFailure):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, UnsupportedError, UsageError)):
        return EXIT_CONFIG
    if isinstance(exc, (InputError, FormatError, OSError)):
        return EXIT_DATA
    return 1


def _thread_limit():
    raw = os.environ.get("ARCHREPAIR_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ARCHREPAIR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ARCHREPAIR_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        limiter = _thread_limit()
        try:
            payload = COMMANDS[args.command](cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
        _write_report(cfg.get("report"), payload)
    except (RepairError, OSError) as exc:
        code = _exit_code(exc)
        print(f"blockrepair {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
