"""Command-line harness: train, attack, defend, transfer, report.

Settings come from an optional ``--config`` file of ``key = value`` lines and
are overridden by flags. The merged configuration is echoed to
``<output_dir>/config.txt``. Exit codes: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .attacks import gradient_heatmap, trajectories_to_csv
from .codec import CheckpointError, CodecModel, load_checkpoint, save_checkpoint, train_baseline
from .config import AttackConfig, ConfigError, ExperimentConfig, Method, load_config
from .conventional import DctCodecConfig, transfer_attack_eval
from .data import ImageFormatError, PatchSet, load_dataset, write_png
from .defense import evaluate_robustness, pgd_train
from .metrics import aggregate, aggregate_to_csv, records_from_csv, records_to_csv, write_text

log = logging.getLogger("advlic")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag -> ExperimentConfig key
_FLAGS = {
    "dataset_dir": ("--dataset-dir", dict(help="directory of training PNG/PPM images")),
    "test_dir": ("--test-dir", dict(help="held-out directory of test images (full images)")),
    "model_path": ("--model", dict(help="codec checkpoint")),
    "output_dir": ("--out", dict(help="output directory")),
    "variant": ("--variant", dict(choices=["factorized", "hyperprior"])),
    "lam": ("--lambda", dict(help="R-D weight on [0,1]-scale MSE, or low/mid/high")),
    "method": ("--method", dict(choices=["fgsm", "pgd"])),
    "target": ("--target", dict(choices=["quality", "rate"])),
    "epsilon": ("--epsilon", dict(help="L-inf budget (accepts fractions like 7/255)")),
    "step_size": ("--step-size", dict(help="per-step size delta")),
    "max_steps": ("--max-steps", dict(help="iteration budget T")),
    "seed": ("--seed", dict()),
    "batch_size": ("--batch-size", dict()),
    "learning_rate": ("--lr", dict()),
    "max_epochs": ("--epochs", dict()),
    "patch_size": ("--patch-size", dict()),
    "val_fraction": ("--val-fraction", dict()),
    "lr_decay_at": ("--lr-decay-at", dict(help="share of epochs after which the lr drops 10x")),
    "early_stopping": ("--early-stopping", dict(action="store_const", const=True)),
    "patience": ("--patience", dict()),
    "checkpoint_every": ("--checkpoint-every", dict()),
    "fast": ("--fast", dict(action="store_const", const=True, help="PGD with 10 steps")),
    "q": ("--q", dict(help="DCT codec quantization parameter")),
    "workers": ("--workers", dict(help="parallel test-image workers")),
    "heatmaps": ("--no-heatmaps", dict(action="store_const", const=False)),
}

_COMMAND_FLAGS = {
    "train": ["dataset_dir", "output_dir", "variant", "lam", "seed", "batch_size", "learning_rate",
              "max_epochs", "patch_size", "val_fraction", "lr_decay_at", "early_stopping", "patience",
              "checkpoint_every"],
    "attack": ["model_path", "test_dir", "output_dir", "lam", "method", "target", "epsilon",
               "step_size", "max_steps", "seed", "fast", "workers", "heatmaps"],
    "defend": ["model_path", "dataset_dir", "test_dir", "output_dir", "lam", "target", "epsilon",
               "step_size", "max_steps", "seed", "batch_size", "learning_rate", "max_epochs",
               "patch_size", "val_fraction", "lr_decay_at", "early_stopping", "patience",
               "checkpoint_every", "fast", "workers"],
    "transfer": ["model_path", "test_dir", "output_dir", "target", "epsilon", "seed", "q"],
}

_REQUIRED = {
    "train": ["dataset_dir", "output_dir"],
    "attack": ["model_path", "test_dir", "output_dir"],
    "defend": ["model_path", "dataset_dir", "output_dir"],
    "transfer": ["model_path", "test_dir", "output_dir"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advlic", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser.commands = {}
    for name, keys in _COMMAND_FLAGS.items():
        p = parser.commands[name] = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value settings file")
        for key in keys:
            flag, kw = _FLAGS[key]
            p.add_argument(flag, dest=key, default=None, **kw)
    p = parser.commands["report"] = sub.add_parser("report")
    p.add_argument("inputs", nargs="+", type=Path, help="per-image EvalRecord CSVs")
    p.add_argument("--out", dest="output_dir", required=True, type=Path)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None) is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        # a shared file may carry keys other commands use; unknown keys still fail
        cfg.update(load_config(args.config))
    cfg.update({k: getattr(args, k) for k in _COMMAND_FLAGS[args.command] if getattr(args, k) is not None})
    missing = [_FLAGS[k][0] for k in _REQUIRED[args.command] if getattr(cfg, k) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required {', '.join(missing)}")
    for key in ("dataset_dir", "test_dir"):
        path = getattr(cfg, key)
        if key in _COMMAND_FLAGS[args.command] and path is not None and not path.is_dir():
            raise UsageError(f"{_FLAGS[key][0]}: not a directory: {path}")
    if cfg.model_path is not None and "model_path" in _COMMAND_FLAGS[args.command] \
            and not cfg.model_path.is_file():
        raise UsageError(f"--model: no such file: {cfg.model_path}")
    if cfg.workers < 1:
        raise UsageError("--workers must be at least 1")
    return cfg


def _prepare_output(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.txt", cfg.to_text())
    return out


def _test_items(cfg: ExperimentConfig) -> list[tuple[str, np.ndarray]]:
    return [(r.id, r.chw()[None]) for r in load_dataset(cfg.test_dir)]


def _history_csv(history: list[dict]) -> str:
    if not history:
        return ""
    keys = list(dict.fromkeys(k for row in history for k in row))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in history:
        w.writerow([repr(row[k]) if isinstance(row.get(k), float) else row.get(k, "") for k in keys])
    return buf.getvalue()


def heatmap_png(path: Path, heatmap: np.ndarray) -> None:
    write_png(path, np.clip(heatmap, 0, 1))


def write_reports(records, out: Path, heatmaps: dict[str, np.ndarray] | None = None) -> list[Path]:
    """Per-image CSV, aggregate CSV and optional heatmap PNGs (``name -> map``)."""
    if not records:
        raise ValueError("no records to write")
    out = Path(out)
    written = [out / "records.csv", out / "aggregate.csv"]
    write_text(written[0], records_to_csv(records))
    write_text(written[1], aggregate_to_csv(aggregate(records)))
    for name, hm in (heatmaps or {}).items():
        path = out / "heatmaps" / f"{name}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        heatmap_png(path, hm)
        written.append(path)
    return written


# ---------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig) -> None:
    out = _prepare_output(cfg)
    tcfg = cfg.training()
    dataset = PatchSet.from_directory(cfg.dataset_dir, tcfg.patch_size, tcfg.seed)
    model = CodecModel.create(cfg.variant, tcfg.lam, seed=tcfg.seed)
    model, history = train_baseline(model, dataset, tcfg)
    save_checkpoint(model, out / "model.ckpt")
    write_text(out / "train_history.csv", _history_csv(history))


def cmd_attack(cfg: ExperimentConfig) -> None:
    model = load_checkpoint(cfg.model_path)
    items = _test_items(cfg)
    out = _prepare_output(cfg)
    attack = cfg.attack()
    lam = cfg.lam if cfg.lam is not None else model.lam
    results: list = []
    summary = evaluate_robustness(model, items, attack, lam, workers=cfg.workers, keep_results=results)
    maps = {}
    if cfg.heatmaps:
        tgt = attack.target.value
        for (image_id, x), res in zip(items, results):
            maps[f"{image_id}_{tgt}_grad"] = gradient_heatmap(model, x, attack.target)
            maps[f"{image_id}_{tgt}_adv_grad"] = gradient_heatmap(model, res.x_adv, attack.target, reference=x)
    write_reports(summary.records, out, maps)
    write_text(out / "trajectories.csv",
               trajectories_to_csv([(image_id, res) for (image_id, _), res in zip(items, results)]))


def cmd_defend(cfg: ExperimentConfig) -> None:
    model = load_checkpoint(cfg.model_path)
    if cfg.lam is None:
        cfg.lam = model.lam
    cfg.method = Method.PGD
    tcfg = cfg.training()
    dataset = PatchSet.from_directory(cfg.dataset_dir, tcfg.patch_size, tcfg.seed)
    eval_set = _test_items(cfg) if cfg.test_dir is not None else None
    out = _prepare_output(cfg)
    # fast mode shortens the inner attack only; the report is scored with the full PGD
    full = cfg.attack().replace(max_steps=AttackConfig.default(Method.PGD).max_steps) \
        if cfg.fast and cfg.max_steps is None else None
    model, report = pgd_train(model, dataset, tcfg, eval_set=eval_set, eval_attack=full)
    save_checkpoint(model, out / "defended.ckpt")
    write_text(out / "defense.csv", report.to_csv())
    write_text(out / "defense_history.csv", _history_csv(report.history))


def cmd_transfer(cfg: ExperimentConfig) -> None:
    model = load_checkpoint(cfg.model_path)
    items = _test_items(cfg)
    out = _prepare_output(cfg)
    eps = cfg.epsilon if cfg.epsilon is not None else AttackConfig.default(Method.FGSM).epsilon
    fgsm = AttackConfig(Method.FGSM, cfg.target, epsilon=eps, step_size=eps, max_steps=1, seed=cfg.seed)
    table = transfer_attack_eval(model, [x for _, x in items], fgsm, DctCodecConfig(cfg.q))
    write_text(out / "transfer.csv", table.to_csv())


def cmd_report(args: argparse.Namespace) -> None:
    records = []
    for path in args.inputs:
        if not path.is_file():
            raise UsageError(f"no such file: {path}")
        records.extend(records_from_csv(path.read_text()))
    if not records:
        raise UsageError("input CSVs hold no records")
    write_text(args.output_dir / "summary.csv", aggregate_to_csv(aggregate(records)))


_COMMANDS = {"train": cmd_train, "attack": cmd_attack, "defend": cmd_defend, "transfer": cmd_transfer}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args)
        else:
            _COMMANDS[args.command](resolve_config(args))
    except (UsageError, ConfigError) as exc:
        parser.commands[args.command].print_usage(sys.stderr)
        print(f"advlic {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ImageFormatError, CheckpointError, FloatingPointError,
            RuntimeError) as exc:
        print(f"advlic {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
