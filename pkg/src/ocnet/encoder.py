"""Feature extraction backbone and the class-activation head.

A four-stage conv net produces a mid-level map (prototype matching) and a
high-level map (prior mask and activation maps) on a shared stride-4 grid.
The backbone is pretrained on base-class classification, then frozen; the
episodic stages never update it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .numerics import minmax_normalize


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    mid_stage: int = 3
    high_stage: int = 4

    @property
    def mid_channels(self) -> int:
        return self.widths[self.mid_stage - 1]

    @property
    def high_channels(self) -> int:
        return self.widths[self.high_stage - 1]

    @property
    def feature_size(self) -> int:
        return self.input_size // 4


class Encoder(nn.Module):
    """Stride plan /2, /2, /1, /1-dilated: both output stages sit at stride 4."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.high_stage <= cfg.mid_stage:
            raise ValueError("high stage must be deeper than mid stage")
        w = cfg.widths
        self.cfg = cfg
        self.stage1 = nn.Conv2d(3, w[0], 3, stride=2, padding=1)
        self.stage2 = nn.Conv2d(w[0], w[1], 3, stride=2, padding=1)
        self.stage3 = nn.Conv2d(w[1], w[2], 3, stride=1, padding=1)
        self.stage4 = nn.Conv2d(w[2], w[3], 3, stride=1, padding=2, dilation=2)
        self.relu = nn.ReLU(inplace=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = (x - 0.5) / 0.25  # images arrive in [0, 1]; center for the convs
        x = self.relu(self.stage1(x))
        x = self.relu(self.stage2(x))
        mid = self.relu(self.stage3(x))
        high = self.relu(self.stage4(mid))
        return mid, high

    def extract(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Single image H x W x 3 -> channels-last (F_mid, F_high), both H' x W'."""
        if image.shape[0] != self.cfg.input_size or image.shape[1] != self.cfg.input_size:
            raise ValueError(
                f"expected {self.cfg.input_size}x{self.cfg.input_size} input, "
                f"got {tuple(image.shape[:2])}"
            )
        mid, high = self.forward(image.permute(2, 0, 1).unsqueeze(0))
        return mid[0].permute(1, 2, 0), high[0].permute(1, 2, 0)


class CamHead(nn.Module):
    """Linear classifier over globally pooled high-level features."""

    def __init__(self, high_channels: int, num_base_classes: int):
        super().__init__()
        if num_base_classes < 2:
            raise ValueError("activation maps need at least 2 base classes")
        self.classifier = nn.Linear(high_channels, num_base_classes, bias=False)

    def forward(self, high: torch.Tensor) -> torch.Tensor:
        pooled = high.mean(dim=(2, 3))
        return self.classifier(pooled)


def cam_map(f_high: torch.Tensor, head: CamHead) -> torch.Tensor:
    """Class-agnostic objectness: per-class activation maps, max-fused, in [0,1]."""
    per_class = torch.einsum("hwc,nc->hwn", f_high, head.classifier.weight)
    return minmax_normalize(per_class.max(dim=2).values)


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).to(dtype)


def mask_to_tensor(mask: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(mask)).to(dtype)


@dataclass
class EncoderBundle:
    """Frozen backbone + activation head, tied to the base classes they saw."""

    encoder: Encoder
    cam_head: CamHead
    base_classes: tuple[int, ...]
    val_accuracy: float = 0.0
    epoch_losses: list[float] = field(default_factory=list)

    def freeze(self) -> "EncoderBundle":
        for p in list(self.encoder.parameters()) + list(self.cam_head.parameters()):
            p.requires_grad_(False)
        self.encoder.eval()
        self.cam_head.eval()
        return self

    def to_dtype(self, dtype: torch.dtype) -> "EncoderBundle":
        self.encoder.to(dtype)
        self.cam_head.to(dtype)
        return self


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 40
    lr: float = 3e-3
    batch_size: int = 16
    seed: int = 0
    val_every: int = 5  # every val_every-th sample is held out for accuracy


def classification_accuracy(bundle: EncoderBundle, samples, dtype=torch.float32) -> float:
    """Top-1 accuracy of the base-class head on labeled samples."""
    index = {c: i for i, c in enumerate(bundle.base_classes)}
    hits = 0
    with torch.no_grad():
        for s in samples:
            x = image_to_tensor(s.image, dtype).permute(2, 0, 1).unsqueeze(0)
            _, high = bundle.encoder(x)
            pred = bundle.cam_head(high).argmax(dim=1).item()
            hits += int(pred == index[s.class_id])
    return hits / max(len(samples), 1)


def pretrain_encoder(
    dataset,
    train_classes,
    enc_cfg: EncoderConfig | None = None,
    cfg: PretrainConfig | None = None,
) -> EncoderBundle:
    """Train backbone + head jointly on per-image multi-label classification.

    A sample contributes a positive label only for its labeled target class;
    distractor shapes stay unlabeled, mirroring weak localization supervision.
    Returns a frozen bundle.
    """
    enc_cfg = enc_cfg or EncoderConfig()
    cfg = cfg or PretrainConfig()
    base_classes = tuple(sorted(train_classes))
    if len(base_classes) < 2:
        raise ValueError("pretraining needs at least 2 base classes")
    index = {c: i for i, c in enumerate(base_classes)}

    torch.manual_seed(cfg.seed)
    encoder = Encoder(enc_cfg)
    head = CamHead(enc_cfg.high_channels, len(base_classes))

    pool = [s for s in dataset.samples if s.class_id in index]
    if not pool:
        raise ValueError("no training-fold samples available")
    val = [s for i, s in enumerate(pool) if i % cfg.val_every == 0]
    train = [s for i, s in enumerate(pool) if i % cfg.val_every != 0]

    images = torch.stack([image_to_tensor(s.image).permute(2, 0, 1) for s in train])
    labels = torch.zeros(len(train), len(base_classes))
    for i, s in enumerate(train):
        labels[i, index[s.class_id]] = 1.0

    opt = torch.optim.Adam(
        list(encoder.parameters()) + list(head.parameters()), lr=cfg.lr
    )
    bce = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        nb = 0
        for start in range(0, len(train), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            _, high = encoder(images[idx])
            loss = bce(head(high), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            nb += 1
        losses.append(total / max(nb, 1))

    bundle = EncoderBundle(encoder, head, base_classes, epoch_losses=losses)
    bundle.val_accuracy = classification_accuracy(bundle, val)
    return bundle.freeze()
