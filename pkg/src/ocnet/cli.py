"""Command-line entry point: data generation, pretraining, episodic training,
evaluation, ablations, and qualitative panels.

Every run takes an output directory and echoes its fully resolved settings to
``config.txt`` there, so a run can be reproduced from the directory alone.
Settings come from three layers: built-in defaults, then a ``key=value``
config file (``--config``), then explicit flags. Flags win.

Exit codes: 0 on success, 1 on runtime failure (one-line diagnostic on
stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    bundle_from_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    snapshot_encoder,
    snapshot_model,
)
from .encoder import PretrainConfig, pretrain_encoder
from .episodes import (
    SynthConfig,
    generate_synthetic,
    ingest_folder,
    make_folds,
    sample_episode,
    save_dataset,
)
from .evaluation import (
    ALLOCATION_VARIANTS,
    ablation_run,
    evaluate,
    resolve_variant,
    visualize,
)
from .model import OCNet, VARIANTS
from .trainer import TrainConfig, metrics_csv_lines, train

VARIANT_CHOICES = VARIANTS + ALLOCATION_VARIANTS


class UsageError(Exception):
    """Bad invocation: missing required setting or malformed value."""


# ------------------------------------------------------------ configuration

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "out": None,
        "seed": 0,
        "classes": 12,
        "images-per-class": 60,
        "image-size": 64,
    },
    "pretrain": {
        "data": None,
        "out": None,
        "fold": 0,
        "epochs": 40,
        "lr": 0.003,
        "batch-size": 16,
        "seed": 0,
    },
    "train": {
        "data": None,
        "out": None,
        "encoder": "",
        "fold": 0,
        "k": 1,
        "seed": 0,
        "variant": "full",
        "epochs": 40,
        "episodes-per-epoch": 48,
        "lr": 0.005,
        "momentum": 0.9,
        "batch-size": 4,
        "val-episodes": 16,
        "clip-norm": 10.0,
        "loss-g": True,
        "loss-p": True,
        "pretrain-epochs": 40,
    },
    "eval": {
        "ckpt": None,
        "data": None,
        "out": None,
        "episodes": 250,
        "seed": 0,
        "k": 1,
        "fold": -1,
    },
    "ablate": {
        "data": None,
        "out": None,
        "fold": 0,
        "k": 1,
        "seeds": "0,1,2,3,4",
        "variants": "baseline,gomm_only,ccm_only,full",
        "episodes": 250,
        "epochs": 40,
        "episodes-per-epoch": 48,
        "lr": 0.005,
        "momentum": 0.9,
        "batch-size": 4,
        "val-episodes": 16,
        "clip-norm": 10.0,
        "pretrain-epochs": 40,
    },
    "viz": {
        "ckpt": None,
        "data": None,
        "out": None,
        "seed": 0,
        "k": 1,
        "count": 4,
        "fold": -1,
    },
}

HELP = {
    "out": "output directory (created if missing)",
    "data": "dataset directory (see gen-data)",
    "ckpt": "checkpoint file to load",
    "encoder": "pretrained encoder checkpoint; trains one in-place when omitted",
    "fold": "which class quarter is held out (0..3); -1 means take it from the checkpoint",
    "k": "support shots per episode",
    "seed": "RNG seed",
    "seeds": "comma-separated seed list",
    "variant": "architecture or allocation row: " + ", ".join(VARIANT_CHOICES),
    "variants": "comma-separated variant list",
    "episodes": "evaluation episodes to sample",
    "count": "number of panels to render",
    "classes": "number of shape classes (multiple of 4)",
    "images-per-class": "samples rendered per class",
    "image-size": "square image side in pixels",
    "epochs": "training epochs",
    "pretrain-epochs": "encoder pretraining epochs",
    "episodes-per-epoch": "episodes sampled per epoch",
    "lr": "learning rate",
    "momentum": "SGD momentum",
    "batch-size": "episodes per optimizer step",
    "val-episodes": "held-in episodes for the per-epoch progress metric",
    "clip-norm": "gradient norm cap per step (0 disables)",
    "loss-g": "include the general-object loss term (true/false)",
    "loss-p": "include the allocation loss term (true/false)",
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _coerce(text: str, default):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def load_config_file(path) -> dict[str, str]:
    """Plain key=value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_settings(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file entries, then explicit flags."""
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if args.config:
        file_cfg = load_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, raw in file_cfg.items():
            try:
                cfg[key] = _coerce(raw, defaults[key])
            except ValueError as e:
                raise UsageError(f"bad value for {key}: {e}") from e
    for key in defaults:
        flag_val = getattr(args, key.replace("-", "_"))
        if flag_val is not None:
            cfg[key] = flag_val
    missing = sorted(k for k, v in cfg.items() if v is None)
    if missing:
        raise UsageError(f"{command} requires: {', '.join('--' + k for k in missing)}")
    if "variant" in cfg and cfg["variant"] not in VARIANT_CHOICES:
        raise UsageError(f"unknown variant {cfg['variant']!r}")
    return cfg


def _settings_lines(command: str, cfg: dict) -> list[str]:
    lines = [f"command={command}"]
    for key in sorted(cfg):
        lines.append(f"{key}={cfg[key]}")
    return lines


def _prepare_out(command: str, cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("\n".join(_settings_lines(command, cfg)) + "\n")
    return out


def _apply_threads(args) -> int:
    threads = args.threads
    if threads is None:
        env = os.environ.get("OCNET_THREADS", "")
        threads = int(env) if env else 1
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    torch.set_num_threads(threads)
    return threads


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as e:
        raise UsageError(f"bad {what} list {text!r}") from e


def _load_dataset(cfg: dict):
    return ingest_folder(cfg["data"])


def _fold_from(cfg: dict, ckpt) -> int:
    if cfg["fold"] >= 0:
        return cfg["fold"]
    fold = ckpt.config.get("train", {}).get("fold")
    if fold is None:
        raise UsageError("checkpoint carries no fold; pass --fold")
    return int(fold)


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: dict) -> int:
    out = _prepare_out("gen-data", cfg)
    dataset = generate_synthetic(
        SynthConfig(
            image_size=cfg["image-size"],
            num_classes=cfg["classes"],
            images_per_class=cfg["images-per-class"],
            seed=cfg["seed"],
        )
    )
    save_dataset(dataset, out)
    print(f"wrote {len(dataset)} samples across {dataset.num_classes} classes to {out}")
    return 0


def cmd_pretrain(cfg: dict) -> int:
    out = _prepare_out("pretrain", cfg)
    dataset = _load_dataset(cfg)
    split = make_folds(dataset.num_classes, cfg["fold"])
    pcfg = PretrainConfig(
        epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch-size"], seed=cfg["seed"]
    )
    bundle = pretrain_encoder(dataset, split.train_classes, cfg=pcfg)
    save_checkpoint(out / "encoder.ckpt", snapshot_encoder(bundle, asdict(pcfg)))
    print(f"encoder saved to {out / 'encoder.ckpt'} (val accuracy {bundle.val_accuracy:.3f})")
    return 0


def _train_one(dataset, split, bundle, cfg: dict, seed: int):
    """Build a model for the requested variant and train it; returns the
    model plus metric rows and the best-epoch weights."""
    torch.manual_seed(seed)
    model = OCNet(bundle, resolve_variant(cfg["variant"]))
    tcfg = TrainConfig(
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        batch_size=cfg["batch-size"],
        epochs=cfg["epochs"],
        episodes_per_epoch=cfg["episodes-per-epoch"],
        k=cfg["k"],
        seed=seed,
        use_loss_g=cfg.get("loss-g", True),
        use_loss_p=cfg.get("loss-p", True),
        val_episodes=cfg["val-episodes"],
        clip_norm=cfg["clip-norm"],
    )
    best = {"val": -1.0, "tensors": None, "epoch": 0}

    def keep_best(m, row):
        if row["val_miou"] > best["val"]:
            best["val"] = row["val_miou"]
            best["epoch"] = row["epoch"]
            best["tensors"] = {k: v.detach().clone() for k, v in m.state_dict().items()}

    result = train(model, dataset, split, tcfg, on_epoch=keep_best)
    return model, tcfg, result, best


def cmd_train(cfg: dict) -> int:
    out = _prepare_out("train", cfg)
    dataset = _load_dataset(cfg)
    split = make_folds(dataset.num_classes, cfg["fold"])
    if cfg["encoder"]:
        bundle = bundle_from_checkpoint(load_checkpoint(cfg["encoder"]))
    else:
        bundle = pretrain_encoder(
            dataset,
            split.train_classes,
            cfg=PretrainConfig(epochs=cfg["pretrain-epochs"], seed=cfg["seed"]),
        )
    model, tcfg, result, best = _train_one(dataset, split, bundle, cfg, cfg["seed"])
    (out / "metrics.csv").write_text("\n".join(metrics_csv_lines(result.metrics)) + "\n")
    train_meta = dict(asdict(tcfg), fold=cfg["fold"], variant=cfg["variant"])
    save_checkpoint(out / "last.ckpt", snapshot_model(model, train_meta))
    best_ckpt = snapshot_model(model, dict(train_meta, best_epoch=best["epoch"]))
    if best["tensors"] is not None:
        best_ckpt.tensors = best["tensors"]
    save_checkpoint(out / "best.ckpt", best_ckpt)
    print(
        f"trained {cfg['variant']} fold {cfg['fold']}: best val miou {best['val']:.4f} "
        f"at epoch {best['epoch']}; checkpoints in {out}"
    )
    return 0


def cmd_eval(cfg: dict, workers: int) -> int:
    out = _prepare_out("eval", cfg)
    ckpt = load_checkpoint(cfg["ckpt"])
    model = model_from_checkpoint(ckpt)
    dataset = _load_dataset(cfg)
    fold = _fold_from(cfg, ckpt)
    split = make_folds(dataset.num_classes, fold)
    result = evaluate(
        model, dataset, split, cfg["k"], cfg["episodes"], cfg["seed"], workers=workers
    )
    classes = sorted(split.test_classes)
    variant = ckpt.config.get("train", {}).get("variant", "full")
    header = "fold,variant,seed,miou,fbiou," + ",".join(f"class_{c:02d}" for c in classes)
    row = result.csv_line(fold, variant, cfg["seed"], classes)
    (out / "results.csv").write_text(header + "\n" + row + "\n")
    print(f"miou {result.miou:.4f} fbiou {result.fbiou:.4f} over {cfg['episodes']} episodes")
    return 0


def cmd_ablate(cfg: dict) -> int:
    out = _prepare_out("ablate", cfg)
    dataset = _load_dataset(cfg)
    seeds = _parse_int_list(cfg["seeds"], "seed")
    variants = [v.strip() for v in cfg["variants"].split(",") if v.strip()]
    for v in variants:
        if v not in VARIANT_CHOICES:
            raise UsageError(f"unknown variant {v!r}")
    tcfg = TrainConfig(
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        batch_size=cfg["batch-size"],
        epochs=cfg["epochs"],
        episodes_per_epoch=cfg["episodes-per-epoch"],
        k=cfg["k"],
        val_episodes=cfg["val-episodes"],
        clip_norm=cfg["clip-norm"],
    )

    def report(fold, variant, seed, result):
        print(f"fold {fold} {variant} seed {seed}: miou {result.miou:.4f}")

    table = ablation_run(
        dataset,
        cfg["fold"],
        variants=variants,
        seeds=seeds,
        k=cfg["k"],
        train_config=tcfg,
        eval_episodes=cfg["episodes"],
        pretrain_cfg=PretrainConfig(epochs=cfg["pretrain-epochs"]),
        progress=report,
    )
    classes = sorted(make_folds(dataset.num_classes, cfg["fold"]).test_classes)
    (out / "results.csv").write_text("\n".join(table.csv_lines(classes)) + "\n")
    (out / "summary.csv").write_text("\n".join(table.summary_lines()) + "\n")
    for line in table.summary_lines()[1:]:
        print(line.replace(",", "  "))
    return 0


def cmd_viz(cfg: dict) -> int:
    out = _prepare_out("viz", cfg)
    ckpt = load_checkpoint(cfg["ckpt"])
    model = model_from_checkpoint(ckpt)
    dataset = _load_dataset(cfg)
    fold = _fold_from(cfg, ckpt)
    split = make_folds(dataset.num_classes, fold)
    rng = np.random.default_rng(cfg["seed"])
    for i in range(cfg["count"]):
        ep = sample_episode(dataset, split.test_classes, cfg["k"], rng, split.fold_id)
        visualize(model, ep, out / f"episode_{i:02d}.png")
    print(f"wrote {cfg['count']} panel images to {out}")
    return 0


# ----------------------------------------------------------------- plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocnet",
        description="Few-shot segmentation with object mining and object-level correlation.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    summaries = {
        "gen-data": "render a synthetic shape dataset to disk",
        "pretrain": "train the frozen backbone on base-class labels",
        "train": "episodic training of one variant on one fold",
        "eval": "score a checkpoint on held-out classes",
        "ablate": "train and evaluate variants across seeds",
        "viz": "render qualitative panels for sampled episodes",
    }
    for command, defaults in DEFAULTS.items():
        p = sub.add_parser(command, help=summaries[command], description=summaries[command])
        p.add_argument("--config", default="", help="key=value settings file; flags win")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (fallback: OCNET_THREADS, then 1)")
        for key, default in defaults.items():
            kind = type(default) if default is not None else str
            if kind is bool:
                p.add_argument(f"--{key}", type=_parse_bool, default=None,
                               metavar="BOOL", help=HELP[key])
            else:
                p.add_argument(f"--{key}", type=kind, default=None, help=HELP[key])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        workers = _apply_threads(args)
        cfg = resolve_settings(args.command, args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, workers)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        return cmd_viz(cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # contract: one-line diagnostic, exit 1
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
