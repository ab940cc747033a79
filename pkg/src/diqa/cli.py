"""Command-line entry point: ``diqa {train,eval,sweep,pca,maps,toy}``.

Settings resolve as: command-line flags > ``--config`` file (``key=value``
lines, keys named like the long flags) > built-in defaults.  Every command
writes into ``<out>/<command>-seed<seed>/``.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

log = logging.getLogger("diqa")

DEFAULT_PCA_GRID = (0, 1, 2, 3, 4, 8, 16, 32, 64, 128, 256, 512)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    manifest: str | None = None
    descriptor: str | None = None
    task: str = "nr"
    pooling: str = "average"
    fusion: str | None = None
    depth: str = "full"
    epsilon: float = 1e-6
    epochs: int = 3000
    seed: int = 0
    np: str = "32"
    repeats: int = 3
    patch_mode: str = "random"
    split: str = "test"
    checkpoint: str | None = None
    out: str = "runs"
    group_by: str | None = None
    pca_k: str | None = None
    pca_samples: int = 4000
    logistic_fit: bool = False
    n_images: int = 8
    size: int = 64
    explicit: set[str] = field(default_factory=set)

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / f"{self.command}-seed{self.seed}"

    def np_values(self) -> list[int]:
        return _int_list(self.np, "--np")


def _int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise UsageError(f"{flag} expects non-negative integers, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diqa", description="Deep CNN image quality assessment (FR and NR).")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file of defaults")
    common.add_argument("--manifest")
    common.add_argument("--descriptor")
    common.add_argument("--task", choices=["fr", "nr"])
    common.add_argument("--pooling", choices=["average", "weighted"])
    common.add_argument("--fusion", choices=["diff", "concat", "concat_diff"])
    common.add_argument("--depth", choices=["full", "shallow"])
    common.add_argument("--epsilon", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--np", help="patches per image (comma list for sweep)")
    common.add_argument("--patch-mode", choices=["random", "dense"])
    common.add_argument("--split", choices=["train", "val", "test", "all"])
    common.add_argument("--checkpoint")
    common.add_argument("--out")
    common.add_argument("--group-by")
    common.add_argument("--logistic-fit", action="store_true", default=None)

    p = sub.add_parser("train", parents=[common], help="train a model, keep the best-validation snapshot")
    p.add_argument("--epochs", type=int)
    sub.add_parser("eval", parents=[common], help="LCC/SROCC report for a checkpoint")
    p = sub.add_parser("sweep", parents=[common], help="performance versus number of patches")
    p.add_argument("--repeats", type=int)
    p = sub.add_parser("pca", parents=[common], help="PCA-reduced reference features, k sweep")
    p.add_argument("--pca-k", help="comma list of component counts")
    p.add_argument("--pca-samples", type=int)
    sub.add_parser("maps", parents=[common], help="export local quality / weight maps")
    p = sub.add_parser("toy", parents=[common], help="write a small synthetic corpus")
    p.add_argument("--n-images", type=int)
    p.add_argument("--size", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    types = {f.name: f.type for f in fields(RunConfig)}
    if getattr(args, "config", None):
        from .data import read_key_values

        for key, value in read_key_values(args.config).items():
            key = key.replace("-", "_")
            if key not in types or key in ("command", "explicit"):
                raise UsageError(f"unknown key {key!r} in {args.config}")
            setattr(cfg, key, _coerce(getattr(cfg, key), value))
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None and f.name not in ("command", "explicit"):
            setattr(cfg, f.name, value)
            cfg.explicit.add(f.name)
    if cfg.task == "nr":
        cfg.fusion = None
    return cfg


def _coerce(current, value: str):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value or None


def _require_file(path: str | None, flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {p}")
    return p


def _limit_threads():
    from threadpoolctl import threadpool_limits

    threads = int(os.environ.get("DIQA_THREADS", "1") or 1)
    return threadpool_limits(limits=max(1, threads))


# -- shared setup -----------------------------------------------------------------

def _model_config(cfg: RunConfig):
    from .model import ModelConfig

    return ModelConfig(task=cfg.task, pooling=cfg.pooling, fusion=cfg.fusion, depth=cfg.depth, epsilon=cfg.epsilon)


def _records(cfg: RunConfig, split_seed: int, require_reference: bool):
    from . import streams
    from .data import Descriptor, load_descriptor, load_manifest, split_by_reference

    manifest = _require_file(cfg.manifest, "--manifest")
    descriptor = load_descriptor(_require_file(cfg.descriptor, "--descriptor")) if cfg.descriptor else Descriptor()
    records = load_manifest(manifest, descriptor, require_reference=require_reference)
    if all(r.split == "unassigned" for r in records) and descriptor.split_counts:
        records = split_by_reference(records, descriptor.split_counts, streams.stream(split_seed, "split"))
    return records


def _select(records, split: str):
    if split == "all" or all(r.split == "unassigned" for r in records):
        return list(records)
    chosen = [r for r in records if r.split == split]
    if not chosen:
        raise UsageError(f"no records in split {split!r}")
    return chosen


def _load_model(cfg: RunConfig):
    from .checkpoint import load_checkpoint
    from .model import QualityNet

    ckpt = load_checkpoint(_require_file(cfg.checkpoint, "--checkpoint"))
    flags_cfg = _model_config(cfg)
    stored = ckpt.config
    for key in ("task", "pooling", "fusion", "depth"):
        if key in cfg.explicit and getattr(flags_cfg, key) != getattr(stored, key):
            raise UsageError(f"--{key} {getattr(flags_cfg, key)} conflicts with checkpoint ({getattr(stored, key)})")
    return QualityNet(stored, ckpt.params), ckpt


# -- commands ---------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    from .checkpoint import save_checkpoint
    from .train import fit, write_history

    model_cfg = _model_config(cfg)
    records = _records(cfg, cfg.seed, require_reference=model_cfg.task == "fr")
    if cfg.epochs < 0:
        raise UsageError("--epochs must be non-negative")
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    with _limit_threads():
        result = fit(records, model_cfg, cfg.epochs, cfg.seed,
                     on_epoch=lambda e, tr, va: log.info("epoch %d train_loss %.4f val_loss %.4f", e, tr, va))
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else run_dir / "checkpoint.diqa"
    save_checkpoint(result.best, ckpt_path)
    save_checkpoint(result.last, run_dir / "last.diqa")
    write_history(run_dir / "history.csv", result.history)
    print(f"best_val_loss={result.best.best_val_loss:.6f} epoch={result.best.meta['epoch']} checkpoint={ckpt_path}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    from .evaluate import evaluate, write_report

    model, ckpt = _load_model(cfg)
    records = _select(_records(cfg, int(ckpt.meta.get("seed", cfg.seed)), model.config.task == "fr"), cfg.split)
    n = cfg.np_values()[0]
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    with _limit_threads():
        report = evaluate(records, model, n, cfg.patch_mode, cfg.seed, group_by=cfg.group_by,
                          logistic=cfg.logistic_fit)
    write_report(report, cfg.run_dir / "report.csv")
    print(report.summary())
    for key, (g_lcc, g_srocc, count) in report.groups.items():
        print(f"group={key},lcc={g_lcc:.6f},srocc={g_srocc:.6f},n={count}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    import csv

    from .evaluate import np_sweep

    model, ckpt = _load_model(cfg)
    records = _select(_records(cfg, int(ckpt.meta.get("seed", cfg.seed)), model.config.task == "fr"), cfg.split)
    values = cfg.np_values()
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    with _limit_threads():
        rows = np_sweep(records, model, values, cfg.repeats, cfg.seed, cfg.patch_mode)
    with open(cfg.run_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["np", "srocc", "lcc"])
        for n, s, l in rows:
            writer.writerow([n, repr(s), repr(l)])
            print(f"np={n},srocc={s:.6f},lcc={l:.6f}")
    return 0


def cmd_pca(cfg: RunConfig) -> int:
    import csv

    from .evaluate import evaluate, sample_reference_features
    from .pca import pca_fit, pca_reduce

    model, ckpt = _load_model(cfg)
    if model.config.task != "fr":
        raise UsageError("PCA reference reduction needs a full-reference checkpoint")
    all_records = _records(cfg, int(ckpt.meta.get("seed", cfg.seed)), True)
    train_records = _select(all_records, "train")
    test_records = _select(all_records, cfg.split)
    dim = model.config.feature_dim
    grid = _int_list(cfg.pca_k, "--pca-k") if cfg.pca_k else [k for k in DEFAULT_PCA_GRID if k <= dim]
    if any(k > dim for k in grid):
        raise UsageError(f"--pca-k values must not exceed the feature dimension {dim}")
    n = cfg.np_values()[0]
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    with _limit_threads():
        feats = sample_reference_features(train_records, model, cfg.pca_samples, cfg.seed)
        pca = pca_fit(feats)
        rows = []
        for k in grid:
            rep = evaluate(test_records, model, n, cfg.patch_mode, cfg.seed, logistic=cfg.logistic_fit,
                           ref_transform=lambda f, k=k: pca_reduce(f, pca, k))
            rows.append((k, rep.lcc, rep.srocc))
    with open(cfg.run_dir / "pca.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "lcc", "srocc"])
        for k, l, s in rows:
            writer.writerow([k, repr(l), repr(s)])
            print(f"k={k},lcc={l:.6f},srocc={s:.6f}")
    return 0


def cmd_maps(cfg: RunConfig) -> int:
    from .evaluate import export_maps, predict_image

    if cfg.patch_mode != "dense":
        raise UsageError("maps need --patch-mode dense (random-mode predictions have no grid)")
    model, ckpt = _load_model(cfg)
    records = _select(_records(cfg, int(ckpt.meta.get("seed", cfg.seed)), model.config.task == "fr"), cfg.split)
    out = cfg.run_dir
    with _limit_threads():
        for rec in records:
            pred = predict_image(rec, model, mode="dense", seed=cfg.seed)
            export_maps(pred, out)
            print(f"{rec.id},q_hat={pred.q_hat:.6f}")
    return 0


def cmd_toy(cfg: RunConfig) -> int:
    from .synthetic import make_corpus

    path = make_corpus(cfg.run_dir, n_images=cfg.n_images, size=cfg.size, seed=cfg.seed)
    print(f"manifest={path} descriptor={path.parent / 'dataset.txt'}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "pca": cmd_pca,
            "maps": cmd_maps, "toy": cmd_toy}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)

    from .checkpoint import CheckpointError
    from .data import DataError
    from .model import ConfigError
    from .nn import DimensionError

    validation = (UsageError, CheckpointError, DataError, ConfigError, DimensionError, FileNotFoundError)
    try:
        cfg = resolve_config(args)
        return COMMANDS[cfg.command](cfg)
    except validation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
