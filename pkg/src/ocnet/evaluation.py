"""Episodic evaluation: mIoU over novel classes, aggregate FB-IoU, the
ablation comparison harness, and qualitative panels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from PIL import Image

from .encoder import EncoderConfig, PretrainConfig, pretrain_encoder
from .episodes import ClassSplit, SegDataset, make_folds, sample_episode
from .model import ModelConfig, OCNet, VARIANTS, variant_config
from .trainer import TrainConfig, train

ALLOCATION_VARIANTS = ("mean", "cosine", "fore", "fore_back")


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of binary masks; both empty counts as 1.0."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


class ConfusionAccumulator:
    """Per-class and aggregate foreground/background intersection-union tallies."""

    def __init__(self):
        self.class_inter: dict[int, int] = {}
        self.class_union: dict[int, int] = {}
        self.fg_inter = 0
        self.fg_union = 0
        self.bg_inter = 0
        self.bg_union = 0
        self.episodes = 0

    def add(self, pred: np.ndarray, gt: np.ndarray, class_id: int) -> None:
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth shapes differ")
        p = pred.astype(bool)
        g = gt.astype(bool)
        inter = int(np.logical_and(p, g).sum())
        union = int(np.logical_or(p, g).sum())
        self.class_inter[class_id] = self.class_inter.get(class_id, 0) + inter
        self.class_union[class_id] = self.class_union.get(class_id, 0) + union
        self.fg_inter += inter
        self.fg_union += union
        self.bg_inter += int(np.logical_and(~p, ~g).sum())
        self.bg_union += int(np.logical_or(~p, ~g).sum())
        self.episodes += 1

    def merge(self, other: "ConfusionAccumulator") -> None:
        """Fold another accumulator in by summation; counts stay exact."""
        for cid, v in other.class_inter.items():
            self.class_inter[cid] = self.class_inter.get(cid, 0) + v
        for cid, v in other.class_union.items():
            self.class_union[cid] = self.class_union.get(cid, 0) + v
        self.fg_inter += other.fg_inter
        self.fg_union += other.fg_union
        self.bg_inter += other.bg_inter
        self.bg_union += other.bg_union
        self.episodes += other.episodes

    def class_iou(self, class_id: int) -> float:
        union = self.class_union.get(class_id, 0)
        if union == 0:
            return 1.0 if class_id in self.class_union else math.nan
        return self.class_inter[class_id] / union

    def miou(self, classes) -> float:
        scores = [self.class_iou(c) for c in classes if c in self.class_union]
        return float(np.mean(scores)) if scores else math.nan

    def fbiou(self) -> float:
        fg = self.fg_inter / self.fg_union if self.fg_union else 1.0
        bg = self.bg_inter / self.bg_union if self.bg_union else 1.0
        return float((fg + bg) / 2.0)


@dataclass
class EvalResult:
    miou: float
    fbiou: float
    per_class: dict[int, float]
    missing: list[int] = field(default_factory=list)
    num_episodes: int = 0

    def csv_line(self, fold: int, variant: str, seed: int, classes) -> str:
        cells = [str(fold), variant, str(seed), f"{self.miou:.6f}", f"{self.fbiou:.6f}"]
        for c in classes:
            v = self.per_class.get(c, math.nan)
            cells.append("" if math.isnan(v) else f"{v:.6f}")
        return ",".join(cells)


def evaluate(
    model: OCNet,
    dataset: SegDataset,
    split: ClassSplit,
    k: int = 1,
    num_episodes: int = 250,
    seed: int = 0,
    workers: int = 1,
) -> EvalResult:
    """Sample episodes from the held-out classes and score predictions.

    Episodes are drawn up front from one seeded stream, so results do not
    depend on ``workers``; per-worker tallies are integers and merging is a
    plain sum.
    """
    rng = np.random.default_rng(seed)
    episodes = [
        sample_episode(dataset, split.test_classes, k, rng, split.fold_id)
        for _ in range(num_episodes)
    ]
    model.eval()
    acc = ConfusionAccumulator()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        def score(ep):
            part = ConfusionAccumulator()
            part.add(model.predict(ep), ep.query_mask, ep.class_id)
            return part

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(score, episodes):
                acc.merge(part)
    else:
        for ep in episodes:
            acc.add(model.predict(ep), ep.query_mask, ep.class_id)
    classes = sorted(split.test_classes)
    missing = [c for c in classes if c not in acc.class_union]
    if missing:
        warnings.warn(f"classes never sampled during evaluation: {missing}")
    per_class = {c: acc.class_iou(c) for c in classes if c not in missing}
    return EvalResult(acc.miou(classes), acc.fbiou(), per_class, missing, num_episodes)


# ------------------------------------------------------------------ ablation


def resolve_variant(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Architecture rows by name, plus allocation rows on the full model."""
    base = base or ModelConfig()
    if name in VARIANTS:
        return variant_config(name, base)
    if name in ALLOCATION_VARIANTS:
        return replace(variant_config("full", base), allocation=name)
    raise ValueError(f"unknown variant {name!r}")


@dataclass
class AblationRow:
    fold: int
    variant: str
    seed: int
    result: EvalResult


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def mean_miou(self, variant: str) -> float:
        vals = [r.result.miou for r in self.rows if r.variant == variant]
        return float(np.mean(vals)) if vals else math.nan

    def std_miou(self, variant: str) -> float:
        vals = [r.result.miou for r in self.rows if r.variant == variant]
        return float(np.std(vals)) if vals else math.nan

    def csv_lines(self, classes) -> list[str]:
        header = "fold,variant,seed,miou,fbiou," + ",".join(f"class_{c:02d}" for c in classes)
        lines = [header]
        for r in self.rows:
            lines.append(r.result.csv_line(r.fold, r.variant, r.seed, classes))
        return lines

    def summary_lines(self) -> list[str]:
        lines = ["variant,mean_miou,std_miou"]
        for variant in dict.fromkeys(r.variant for r in self.rows):
            lines.append(f"{variant},{self.mean_miou(variant):.6f},{self.std_miou(variant):.6f}")
        return lines


def ablation_run(
    dataset: SegDataset,
    fold: int,
    variants=VARIANTS,
    seeds=(0, 1, 2, 3, 4),
    k: int = 1,
    train_config: TrainConfig | None = None,
    eval_episodes: int = 250,
    enc_cfg: EncoderConfig | None = None,
    pretrain_cfg: PretrainConfig | None = None,
    progress=None,
) -> AblationTable:
    """Train and evaluate every (variant, seed) pair on one fold.

    The pretrained encoder is shared by all variants within a seed so the
    comparison isolates the mining and correlation modules.
    """
    split = make_folds(len(dataset.class_names), fold)
    base_train = train_config or TrainConfig()
    table = AblationTable()
    for seed in seeds:
        pcfg = replace(pretrain_cfg or PretrainConfig(), seed=seed)
        bundle = pretrain_encoder(dataset, split.train_classes, enc_cfg=enc_cfg, cfg=pcfg)
        for variant in variants:
            torch.manual_seed(seed)
            model = OCNet(bundle, resolve_variant(variant))
            cfg = replace(base_train, seed=seed)
            train(model, dataset, split, cfg)
            result = evaluate(model, dataset, split, k, eval_episodes, seed=10_000 + seed)
            table.rows.append(AblationRow(fold, variant, seed, result))
            if progress is not None:
                progress(fold, variant, seed, result)
    return table


# ----------------------------------------------------------------- visuals


def overlay_mask(image: np.ndarray, mask: np.ndarray, color=(1.0, 0.15, 0.1)) -> np.ndarray:
    out = image.copy()
    sel = mask.astype(bool)
    out[sel] = 0.55 * out[sel] + 0.45 * np.asarray(color, dtype=image.dtype)
    return out


def _to_u8(panel: np.ndarray) -> np.ndarray:
    return (np.clip(panel, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _gray_panel(map2d: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(_to_u8(map2d), mode="L").resize((size, size), Image.NEAREST)
    return np.stack([np.asarray(img)] * 3, axis=-1)


def visualize(model: OCNet, episode, out_path) -> None:
    """Five panels: support+mask, query, prediction overlay, M_g, predicted M_g."""
    size = episode.query_image.shape[0]
    pred = model.predict(episode)
    with torch.no_grad():
        out = model(episode.without_query_mask())
    panels = [
        _to_u8(overlay_mask(episode.support_images[0], episode.support_masks[0])),
        _to_u8(episode.query_image),
        _to_u8(overlay_mask(episode.query_image, pred)),
    ]
    if out.general_target is not None:
        panels.append(_gray_panel(out.general_target.numpy(), size))
        pred_g = out.general_logits.argmax(dim=2).to(torch.float32).numpy()
        panels.append(_gray_panel(pred_g, size))
    else:
        panels.extend([np.full((size, size, 3), 127, dtype=np.uint8)] * 2)
    gap = np.full((size, 2, 3), 255, dtype=np.uint8)
    strips = []
    for i, p in enumerate(panels):
        if i:
            strips.append(gap)
        strips.append(p)
    Image.fromarray(np.concatenate(strips, axis=1)).save(out_path)
