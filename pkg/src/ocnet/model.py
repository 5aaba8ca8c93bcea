"""Full segmentation network: frozen encoder, object mining, object-level
correlation, and an FPN-style decoder.

Variant flags reproduce the ablation grid: ``use_gomm`` / ``use_ccm`` select
the architecture row (baseline feeds the decoder F_q twice; single-module
variants substitute F_g or run correlation straight on F_q), and
``allocation`` selects how prototypes reach the correlation feature:

- ``fore_back``: foreground + background prototypes, transport-mask loss
- ``fore``: foreground prototypes only, loss restricted to foreground pixels
- ``cosine``: same wiring as fore_back but no transport-mask supervision
- ``mean``: global prototype + mean of the selected rest, no allocation
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ccm import (
    Ccm,
    PrototypeSelection,
    allocating_mask,
    mask_distances,
    multi_frequency_pooling,
    optimal_query_mask,
    support_prototype_masks,
)
from .encoder import EncoderBundle, cam_map, image_to_tensor, mask_to_tensor
from .episodes import Episode
from .gomm import Gomm, prior_mask
from .numerics import argmax_lowest, downsample_mask, make_dct_basis

ALLOCATIONS = ("mean", "cosine", "fore", "fore_back")
VARIANTS = ("baseline", "gomm_only", "ccm_only", "full")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    num_general_prototypes: int = 16
    num_selected: int = 5
    tau: float = 0.6
    eps: float = 0.05
    sinkhorn_iters: int = 200
    sinkhorn_tol: float = 1e-6
    use_gomm: bool = True
    use_ccm: bool = True
    allocation: str = "fore_back"
    decoder_channels: int = 64

    def __post_init__(self):
        if self.allocation not in ALLOCATIONS:
            raise ValueError(f"unknown allocation mode {self.allocation!r}")

    @property
    def decoder_in_channels(self) -> int:
        if self.use_ccm and self.allocation == "mean":
            return 3 * self.channels
        return 2 * self.channels


def variant_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Ablation rows: baseline, gomm_only, ccm_only, full."""
    base = base or ModelConfig()
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}")
    return replace(
        base,
        use_gomm=name in ("gomm_only", "full"),
        use_ccm=name in ("ccm_only", "full"),
    )


class Decoder(nn.Module):
    """Two-scale top-down refinement, then bilinear upsample to image size."""

    def __init__(self, in_channels: int, width: int = 64):
        super().__init__()
        self.lateral = nn.Conv2d(in_channels, width, kernel_size=1)
        self.down = nn.Conv2d(width, width, kernel_size=3, stride=2, padding=1)
        self.coarse = nn.Conv2d(width, width, kernel_size=1)
        self.smooth = nn.Conv2d(width, width, kernel_size=3, padding=1)
        self.head = nn.Conv2d(width, 2, kernel_size=1)

    def forward(self, feat: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
        x = self.lateral(feat.permute(2, 0, 1).unsqueeze(0))
        top = self.coarse(self.down(F.relu(x)))
        x = x + F.interpolate(top, size=x.shape[-2:], mode="bilinear", align_corners=False)
        x = F.relu(self.smooth(F.relu(x)))
        logits = F.interpolate(
            self.head(x), size=out_size, mode="bilinear", align_corners=False
        )
        return logits[0].permute(1, 2, 0)


@dataclass
class ForwardOutput:
    query_logits: torch.Tensor  # H x W x 2
    general_logits: torch.Tensor | None = None
    general_target: torch.Tensor | None = None  # M_g, detached
    allocation_logits: torch.Tensor | None = None  # M_hat_pa
    allocation_target: torch.Tensor | None = None  # M_pa, long, detached
    allocation_weight: torch.Tensor | None = None  # per-pixel validity for the loss
    degenerate: bool = False


@dataclass
class SupportSummary:
    prototypes: torch.Tensor  # L x C, shot-averaged
    selection: PrototypeSelection
    shot_highs: list[torch.Tensor]
    shot_grids: list[torch.Tensor]


class OCNet(nn.Module):
    def __init__(self, bundle: EncoderBundle, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.bundle = bundle
        self.encoder = bundle.encoder  # registered so checkpoints carry it
        self.cam_head = bundle.cam_head
        self.gomm = (
            Gomm(self.cfg.channels, self.cfg.num_general_prototypes, self.cfg.tau)
            if self.cfg.use_gomm
            else None
        )
        self.ccm = Ccm(self.cfg.channels, self.cfg.num_selected) if self.cfg.use_ccm else None
        self.decoder = Decoder(self.cfg.decoder_in_channels, self.cfg.decoder_channels)
        self._basis_cache: dict = {}

    # ------------------------------------------------------------ plumbing

    def param_dtype(self) -> torch.dtype:
        return self.decoder.head.weight.dtype

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def _basis(self, h: int, w: int):
        key = (h, w, self.param_dtype())
        if key not in self._basis_cache:
            self._basis_cache[key] = make_dct_basis(h, w, dtype=self.param_dtype())
        return self._basis_cache[key]

    def _grid_mask(self, mask: np.ndarray, h: int, w: int) -> torch.Tensor:
        return downsample_mask(mask_to_tensor(mask, self.param_dtype()), h, w)

    # ------------------------------------------------------------ support

    def summarize_support(self, episode: Episode) -> SupportSummary:
        """Shot-averaged frequency prototypes and the fg/bg selection."""
        dtype = self.param_dtype()
        shot_protos, shot_mids, shot_highs, shot_grids = [], [], [], []
        for image, mask in zip(episode.support_images, episode.support_masks):
            f_mid, f_high = self.encoder.extract(image_to_tensor(image, dtype))
            grid = self._grid_mask(mask, f_mid.shape[0], f_mid.shape[1])
            if grid.sum() == 0:
                raise ValueError("support mask vanished at feature resolution")
            basis = self._basis(f_mid.shape[0], f_mid.shape[1])
            shot_protos.append(multi_frequency_pooling(f_mid, grid, basis))
            shot_mids.append(f_mid)
            shot_highs.append(f_high)
            shot_grids.append(grid)
        prototypes = torch.stack(shot_protos).mean(dim=0)
        distances = torch.stack(
            [
                mask_distances(support_prototype_masks(f_mid, prototypes), grid)
                for f_mid, grid in zip(shot_mids, shot_grids)
            ]
        ).mean(dim=0)
        ascending = torch.sort(distances, stable=True).indices
        descending = torch.sort(-distances, stable=True).indices
        selection = PrototypeSelection(
            foreground=ascending[: self.cfg.num_selected],
            background=descending[: self.cfg.num_selected],
        )
        return SupportSummary(prototypes, selection, shot_highs, shot_grids)

    # ------------------------------------------------------------ variants

    def _mean_correlation(self, summary: SupportSummary, f_g: torch.Tensor) -> torch.Tensor:
        """No allocation: global prototype and the mean of the selected rest."""
        h, w, _ = f_g.shape
        sel = torch.cat([summary.selection.background, summary.selection.foreground])
        rest = sel[sel != 0]
        rest_mean = (
            summary.prototypes[rest].mean(dim=0)
            if rest.numel()
            else torch.zeros_like(summary.prototypes[0])
        )
        global_part = summary.prototypes[0].expand(h, w, -1)
        rest_part = rest_mean.expand(h, w, -1)
        return torch.cat([global_part, rest_part, f_g], dim=2)

    def _allocation_targets(
        self,
        f_q: torch.Tensor,
        summary: SupportSummary,
        query_grid: torch.Tensor,
    ) -> tuple[torch.Tensor | None, torch.Tensor | None, bool]:
        """Transport-plan argmax target for the allocation prediction.

        Returns (target, weight, degenerate). The plans couple raw query
        features to selected prototypes inside each ground-truth region.
        """
        cfg = self.cfg
        kw = dict(eps=cfg.eps, max_iters=cfg.sinkhorn_iters, tol=cfg.sinkhorn_tol)
        with torch.no_grad():
            m_oqf = optimal_query_mask(
                f_q, summary.prototypes, summary.selection.foreground, query_grid, **kw
            )
            if cfg.allocation == "fore":
                if m_oqf is None:
                    return None, None, True
                target = argmax_lowest(m_oqf, dim=2)
                weight = (query_grid > 0.5).to(f_q.dtype)
                return target, weight, False
            m_oqb = optimal_query_mask(
                f_q, summary.prototypes, summary.selection.background, 1.0 - query_grid, **kw
            )
            if m_oqf is None or m_oqb is None:
                return None, None, True
            target = allocating_mask(m_oqb, m_oqf)
            weight = torch.ones_like(query_grid)
            return target, weight, False

    # ------------------------------------------------------------ forward

    def forward(self, episode: Episode) -> ForwardOutput:
        """Run one episode; builds training targets when the query mask exists."""
        dtype = self.param_dtype()
        query = image_to_tensor(episode.query_image, dtype)
        f_q, f_q_high = self.encoder.extract(query)
        h, w = f_q.shape[:2]
        needs_support = self.cfg.use_gomm or self.cfg.use_ccm
        summary = self.summarize_support(episode) if needs_support else None

        out = ForwardOutput(query_logits=torch.empty(0))

        if self.cfg.use_gomm:
            prior = torch.stack(
                [
                    prior_mask(f_q_high, f_high, grid)
                    for f_high, grid in zip(summary.shot_highs, summary.shot_grids)
                ]
            ).mean(dim=0)
            with torch.no_grad():
                cam = cam_map(f_q_high, self.cam_head)
            f_g, out.general_logits, m_g = self.gomm(f_q, prior, cam)
            out.general_target = m_g.detach()
        else:
            f_g = f_q

        if not self.cfg.use_ccm:
            feat = torch.cat([f_g, f_g], dim=2)
        elif self.cfg.allocation == "mean":
            feat = self._mean_correlation(summary, f_g)
        else:
            if self.cfg.allocation == "fore":
                m_hat = self.ccm.match_bank(f_g, summary.prototypes[summary.selection.foreground])
                p_q = self.ccm.query_prototypes(m_hat, f_g)
                feat = self.ccm.correlation_feature(p_q, m_hat, f_g)
            else:
                m_hat, p_q, feat = self.ccm(f_g, summary.prototypes, summary.selection)
            out.allocation_logits = m_hat
            if episode.query_mask is not None and self.cfg.allocation != "cosine":
                grid_q = self._grid_mask(episode.query_mask, h, w)
                target, weight, degenerate = self._allocation_targets(f_q, summary, grid_q)
                out.allocation_target = target
                out.allocation_weight = weight
                out.degenerate = degenerate

        out.query_logits = self.decoder(feat, episode.query_image.shape[:2])
        return out

    @torch.no_grad()
    def predict(self, episode: Episode) -> np.ndarray:
        """Binary query mask; never reads episode.query_mask."""
        out = self.forward(episode.without_query_mask())
        return out.query_logits.argmax(dim=2).to(torch.uint8).numpy()
