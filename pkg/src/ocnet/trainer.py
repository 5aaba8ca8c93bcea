"""Episodic training: composite loss, SGD loop, metrics log.

The loss sums three cross-entropies: the final query prediction against the
ground-truth mask, the general-object prediction against the mined mask M_g,
and the allocation prediction against the transport-plan argmax M_pa. The
last two only exist when the corresponding module is active, and M_pa is
skipped (with a counter) for episodes whose query region vanishes at feature
resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import mask_to_tensor
from .episodes import SegDataset, ClassSplit, sample_episode
from .model import ForwardOutput, OCNet


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 40
    episodes_per_epoch: int = 48
    k: int = 1
    seed: int = 0
    use_loss_g: bool = True
    use_loss_p: bool = True
    val_episodes: int = 16
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0 (0 disables clipping)")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class LossBreakdown:
    loss_t: torch.Tensor
    loss_g: torch.Tensor
    loss_p: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.loss_t + self.loss_g + self.loss_p


def total_loss(
    out: ForwardOutput,
    query_mask: np.ndarray,
    use_loss_g: bool = True,
    use_loss_p: bool = True,
) -> LossBreakdown:
    """Sum of the three pixelwise cross-entropies; absent targets give 0."""
    dtype = out.query_logits.dtype
    target = mask_to_tensor(query_mask, torch.long)
    loss_t = F.cross_entropy(out.query_logits.reshape(-1, 2), target.reshape(-1))

    zero = torch.zeros((), dtype=dtype)
    loss_g = zero
    if use_loss_g and out.general_logits is not None:
        loss_g = F.cross_entropy(
            out.general_logits.reshape(-1, 2), out.general_target.reshape(-1).long()
        )

    loss_p = zero
    if use_loss_p and out.allocation_logits is not None and out.allocation_target is not None:
        k = out.allocation_logits.shape[2]
        per_pixel = F.cross_entropy(
            out.allocation_logits.reshape(-1, k),
            out.allocation_target.reshape(-1),
            reduction="none",
        )
        weight = out.allocation_weight.reshape(-1)
        denom = weight.sum()
        if denom > 0:
            loss_p = (per_pixel * weight).sum() / denom
    return LossBreakdown(loss_t, loss_g, loss_p)


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    skipped_allocations: int = 0
    final_train_loss: float = math.nan


def metrics_csv_lines(metrics: list[dict]) -> list[str]:
    lines = ["epoch,loss_t,loss_g,loss_p,val_miou"]
    for row in metrics:
        lines.append(
            f"{row['epoch']},{row['loss_t']:.6f},{row['loss_g']:.6f},"
            f"{row['loss_p']:.6f},{row['val_miou']:.6f}"
        )
    return lines


def _check_finite(breakdown: LossBreakdown, epoch: int) -> None:
    for name in ("loss_t", "loss_g", "loss_p"):
        value = getattr(breakdown, name)
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite {name} at epoch {epoch}; aborting")


def quick_miou(model: OCNet, episodes) -> float:
    """Mean per-episode foreground IoU; cheap progress signal during training."""
    from .evaluation import iou

    scores = []
    with torch.no_grad():
        for ep in episodes:
            pred = model.predict(ep)
            scores.append(iou(pred, ep.query_mask))
    return float(np.mean(scores)) if scores else math.nan


def train(
    model: OCNet,
    dataset: SegDataset,
    split: ClassSplit,
    config: TrainConfig | None = None,
    metrics_path=None,
    on_epoch=None,
) -> TrainResult:
    """SGD with momentum over sampled episodes; deterministic given seed.

    ``on_epoch(model, row)``, if given, fires after every epoch's metrics row
    so callers can snapshot weights.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    params = list(model.trainable_parameters())
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)

    val_rng = np.random.default_rng(config.seed + 1)
    val_episodes = [
        sample_episode(dataset, split.train_classes, config.k, val_rng, split.fold_id)
        for _ in range(config.val_episodes)
    ]

    result = TrainResult()
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums = {"loss_t": 0.0, "loss_g": 0.0, "loss_p": 0.0}
        seen = 0
        opt.zero_grad()
        for i in range(config.episodes_per_epoch):
            episode = sample_episode(dataset, split.train_classes, config.k, rng, split.fold_id)
            out = model(episode)
            if out.degenerate:
                result.skipped_allocations += 1
            breakdown = total_loss(
                out, episode.query_mask, config.use_loss_g, config.use_loss_p
            )
            _check_finite(breakdown, epoch)
            (breakdown.total / config.batch_size).backward()
            for name in sums:
                sums[name] += float(getattr(breakdown, name).detach())
            seen += 1
            if seen % config.batch_size == 0 or i == config.episodes_per_epoch - 1:
                if config.clip_norm > 0:
                    torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
                opt.step()
                opt.zero_grad()
        model.eval()
        row = {name: sums[name] / max(seen, 1) for name in sums}
        row["epoch"] = epoch
        row["val_miou"] = quick_miou(model, val_episodes)
        result.metrics.append(row)
        if on_epoch is not None:
            on_epoch(model, row)
    result.final_train_loss = sum(
        result.metrics[-1][k] for k in ("loss_t", "loss_g", "loss_p")
    )
    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            fh.write("\n".join(metrics_csv_lines(result.metrics)) + "\n")
    return result
