"""Command-line entry point: ``gen``, ``train``, ``eval``, ``ablate``, ``inspect``.

Exit codes: 0 ok, 1 other failure, 2 bad flags / config / index, 3 I/O or
file-format failure, 4 non-finite loss, 5 ablation trend check failed
(``ablate --check`` only).

Configuration precedence is defaults < ``--config`` file < ``--set`` overrides.
A config file (TOML or JSON) holds TrainConfig keys at the top level, an
``[rclm]`` table and an optional ``[gen]`` table; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, CorruptFile, DircrError, FormatError, NonFiniteLoss, VersionMismatch
from .plotting import plot_ablation, plot_puzzle, plot_training_curves
from .pgm import write_pgm
from .puzzle_gen import (
    ATTRIBUTES,
    KINDS,
    SHAPES,
    GenConfig,
    generate_dataset,
    load_dataset,
    read_manifest,
    write_dataset,
)
from .trainer import (
    GRIDS,
    Dataset,
    TrainConfig,
    Trainer,
    ablation_trend,
    load_checkpoint,
    run_ablation,
    write_ablation_csv,
    write_metrics_csv,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("dircr")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_IO, EXIT_NONFINITE, EXIT_TREND = 0, 1, 2, 3, 4, 5

# the CLI generates at the desk training resolution unless told otherwise
GEN_DEFAULTS = {"image_size": 32, "n_rules": 1, "kinds": None}


class UsageError(Exception):
    pass


# -- config ------------------------------------------------------------------
def default_config() -> dict:
    d = TrainConfig().to_dict()
    d["gen"] = dict(GEN_DEFAULTS)
    return d


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text.decode("utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"{path}: cannot parse config: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return data


def _merge(base: dict, update: dict, where: str = "") -> None:
    for key, value in update.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{name!r} must be a table")
            _merge(base[key], value, f"{name}.")
        else:
            base[key] = _coerce(name, value, base[key])


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name!r} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name!r} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name!r} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name!r} must be a string, got {value!r}")
    return value


def parse_override(text: str) -> dict:
    """``a.b=value`` -> ``{"a": {"b": value}}``; values parse as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def resolve_config(config_path: str | Path | None, overrides=()) -> dict:
    cfg = default_config()
    if config_path is not None:
        _merge(cfg, load_config_file(config_path))
    for text in overrides:
        _merge(cfg, parse_override(text))
    build_configs(cfg)  # validate eagerly
    return cfg


def build_configs(resolved: dict) -> tuple[TrainConfig, GenConfig]:
    train = {k: v for k, v in resolved.items() if k != "gen"}
    try:
        tcfg = TrainConfig.from_dict(train)
        gen = dict(resolved["gen"])
        if gen.get("kinds") is not None:
            gen["kinds"] = parse_rules(gen["kinds"])
        gcfg = GenConfig(**gen)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return tcfg, gcfg


def echo_config(resolved: dict, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def parse_rules(value) -> tuple[str, ...]:
    """``"constant,progression"`` or a list -> canonical rule-kind names."""
    items = value.split(",") if isinstance(value, str) else list(value)
    lookup = {k.lower(): k for k in KINDS}
    out = []
    for item in items:
        key = str(item).strip().lower().replace("_", "").replace("-", "")
        if key not in lookup:
            raise ConfigError(f"unknown rule kind {item!r}; choose from {', '.join(KINDS)}")
        if lookup[key] not in out:
            out.append(lookup[key])
    if not out:
        raise ConfigError("empty rule list")
    return tuple(out)


# -- helpers -----------------------------------------------------------------
def _load(path: str | Path) -> Dataset:
    log.info("loading %s", path)
    return Dataset.from_puzzles(load_dataset(path))


def _check_size(data: Dataset, cfg: TrainConfig, name: str) -> None:
    size = data.panels.shape[-1]
    if size != cfg.image_size:
        raise UsageError(
            f"{name} dataset is {size}px but image_size={cfg.image_size}; pass --set image_size={size}"
        )


def _write_json(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def ascii_panel(img: np.ndarray, width: int = 16) -> list[str]:
    ramp = "@%#*+=-:. "  # dark -> light
    step = max(1, img.shape[1] // width)
    small = img[::step, ::step].astype(np.int64)
    idx = small * (len(ramp) - 1) // 255
    return ["".join(ramp[v] for v in row) for row in idx]


def _side_by_side(blocks: list[list[str]], gap: str = "  ") -> list[str]:
    return [gap.join(parts) for parts in zip(*blocks)]


# -- commands ----------------------------------------------------------------
def cmd_gen(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    overrides = list(args.set)
    if args.size is not None:
        overrides.append(f"gen.image_size={args.size}")
    if args.n_rules is not None:
        overrides.append(f"gen.n_rules={args.n_rules}")
    if args.rules is not None:
        overrides.append("gen.kinds=" + json.dumps(list(parse_rules(args.rules))))
    resolved = resolve_config(args.config, overrides)
    _, gcfg = build_configs(resolved)
    try:
        puzzles = generate_dataset(args.count, args.seed, gcfg, workers=args.workers)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = write_dataset(puzzles, args.out, split=args.split, seed=args.seed)
    manifest = read_manifest(out)
    print(json.dumps({"out": str(out), "count": manifest["count"], "rule_histogram": manifest["rule_histogram"]}))
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    resolved = resolve_config(args.config, args.set)
    cfg, _ = build_configs(resolved)
    train = _load(args.train)
    val = _load(args.val) if args.val else None
    _check_size(train, cfg, "train")
    if val is not None:
        _check_size(val, cfg, "val")

    if args.resume and (out / "last.ckpt").exists():
        trainer = load_checkpoint(out / "last.ckpt", train, val)
        saved = {k: v for k, v in trainer.cfg.to_dict().items() if k != "epochs"}
        wanted = {k: v for k, v in cfg.to_dict().items() if k != "epochs"}
        if saved != wanted:
            raise UsageError("resolved config differs from the checkpoint's (only epochs may change)")
        trainer.cfg = cfg
        log.info("resuming at epoch %d", trainer.epoch)
    else:
        trainer = Trainer(cfg, train, val)
    echo_config(resolved, out)

    t0 = time.perf_counter()
    summary = {"epochs_requested": cfg.epochs}
    code = EXIT_OK
    try:
        trainer.fit(cfg.epochs, out_dir=out, checkpoint_every=args.checkpoint_every)
    except NonFiniteLoss as e:
        log.error("%s", e)
        summary["error"] = str(e)
        code = EXIT_NONFINITE
    write_metrics_csv(trainer.history, out / "metrics.csv")
    if trainer.history:
        plot_training_curves(trainer.history, out / "curves.png")
        last = trainer.history[-1]
        summary.update(asdict(last))
        summary["best_val_accuracy"] = max(r.val_accuracy for r in trainer.history)
    summary.update(epochs_completed=trainer.epoch, wall_time_s=time.perf_counter() - t0)
    _write_json(summary, out / "summary.json")
    print(json.dumps({k: summary[k] for k in ("epochs_completed", "val_accuracy") if k in summary}))
    return code


def cmd_eval(args) -> int:
    out = Path(args.out)
    trainer = load_checkpoint(args.checkpoint)
    data = _load(args.data)
    _check_size(data, trainer.cfg, "eval")
    preds = trainer.predict(data, args.batch_size)
    correct = preds == data.answers
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "answer", "predicted", "correct"])
        for i, (a, p) in enumerate(zip(data.answers, preds)):
            w.writerow([i, int(a), int(p), int(a == p)])
    summary = {
        "accuracy": float(correct.mean()),
        "n": int(len(data)),
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "epoch": trainer.epoch,
    }
    _write_json(summary, out / "summary.json")
    print(json.dumps({"accuracy": summary["accuracy"], "n": summary["n"]}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = Path(args.out)
    resolved = resolve_config(args.config, args.set)
    cfg, _ = build_configs(resolved)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError as e:
        raise UsageError(f"--seeds must be comma-separated integers: {e}") from e
    train, test = _load(args.train), _load(args.test)
    _check_size(train, cfg, "train")
    _check_size(test, cfg, "test")
    echo_config(resolved, out)

    rows = run_ablation(cfg, args.grid, train, test, seeds=seeds, out_dir=out)
    write_ablation_csv(rows, out / "ablation.csv")
    plot_ablation(rows, out / "ablation.png")
    report = {
        "grid": args.grid,
        "seeds": list(seeds),
        "rows": [
            {"variant": r.variant, "accuracies": r.accuracies, "mean": r.mean_accuracy, "std": r.std_accuracy}
            for r in rows
        ],
    }
    names = {r.variant for r in rows}
    if {"2-to-1", "8-to-1", "2-to-1+8-to-1", "2-to-1+8-to-1+RCLM"} <= names:
        report["trend"] = ablation_trend(rows)
    _write_json(report, out / "ablation.json")
    print((out / "ablation.csv").read_text(), end="")
    if "trend" in report:
        print(json.dumps(report["trend"]["checks"]))
        if args.check and report["trend"]["failed"]:
            log.error("full model trails the local-only variant by more than 2 points")
            return EXIT_TREND
    return EXIT_OK


def cmd_inspect(args) -> int:
    manifest = read_manifest(args.data)
    puzzles = load_dataset(args.data)
    if not 0 <= args.index < len(puzzles):
        raise UsageError(f"--index {args.index} out of range 0..{len(puzzles) - 1}")
    p = puzzles[args.index]

    print(f"puzzle {args.index} of {manifest['count']}  ({p.image_size}px, seed {p.seed})")
    print(f"answer_index: {p.answer_index}")
    print("rules: " + json.dumps([r.to_dict() for r in p.rules]))
    header = "  ".join(f"{a:>10}" for a in ATTRIBUTES + ("rotation",))
    print(f"{'panel':>10}  {header}")
    for name, attrs in [(f"ctx{i}", a) for i, a in enumerate(p.context_attrs)] + [
        (f"cand{j}" + ("*" if j == p.answer_index else ""), a) for j, a in enumerate(p.candidate_attrs)
    ]:
        vals = attrs.to_list()
        vals[0] = SHAPES[vals[0]]
        print(f"{name:>10}  " + "  ".join(f"{v:>10}" for v in vals))

    width = args.ascii_width
    blank = [" " * len(ascii_panel(p.context[0], width)[0])] * len(ascii_panel(p.context[0], width))
    panels = [ascii_panel(img, width) for img in p.context] + [blank]
    print("\ncontext (missing panel blank):")
    for r in range(3):
        print("\n".join(_side_by_side(panels[3 * r : 3 * r + 3], " | ")))
        print()
    print("candidates:")
    cands = [ascii_panel(img, width) for img in p.candidates]
    for r in range(2):
        print("   ".join(f"{j:<{len(blank[0])}}" for j in range(4 * r, 4 * r + 4)))
        print("\n".join(_side_by_side(cands[4 * r : 4 * r + 4], " | ")))
        print()

    if args.pgm_dir:
        d = Path(args.pgm_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(np.concatenate([p.context, p.candidates])):
            write_pgm(img, d / f"panel_{i:02d}.pgm")
        print(f"wrote 16 PGM panels to {d}")
    if args.png:
        plot_puzzle(p, args.png, title=f"puzzle {args.index}: " + "; ".join(f"{r.attribute} {r.kind}" for r in p.rules))
        print(f"wrote {args.png}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dircr", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. rclm.temperature=0.2")

    p = sub.add_parser("gen", help="generate a puzzle dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rules", help="comma-separated rule kinds, e.g. constant,progression")
    p.add_argument("--n-rules", type=int, help="rules per puzzle (1..3)")
    p.add_argument("--size", type=int, help=f"panel size in pixels (default {GEN_DEFAULTS['image_size']})")
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    config_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True, help="training dataset directory")
    p.add_argument("--val", help="validation dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt if present")
    p.add_argument("--checkpoint-every", type=int, default=1)
    config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component / depth ablation")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--grid", default="table3", choices=sorted(GRIDS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true", help="exit 5 if the full model trails local-only by > 2 points")
    config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dump one puzzle")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--pgm-dir", help="write the 16 panels as PGM files here")
    p.add_argument("--png", help="write a rendered puzzle sheet here")
    p.add_argument("--ascii-width", type=int, default=16)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except NonFiniteLoss as e:
        log.error("%s", e)
        return EXIT_NONFINITE
    except (OSError, FormatError, CorruptFile, VersionMismatch) as e:
        log.error("%s", e)
        return EXIT_IO
    except DircrError as e:
        log.error("%s", e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
