"""General object mining: find every salient object in the query, not just
the target class.

The query's objectness comes from two weak cues fused by pixelwise max: a
support-guided prior (max cosine against masked support features) and the
class-activation map from the frozen base classifier. Thresholding gives the
general object mask M_g. A bank of learned prototypes is allocated to query
pixels by cosine argmax, mixed back in with a 1x1 conv, supervised through a
small segment head, and fused with the query feature by cross-attention.
"""

from __future__ import annotations

import torch
from torch import nn

from .numerics import (
    argmax_lowest,
    cosine_similarity_map,
    minmax_normalize,
    pairwise_cosine,
)


def prior_mask(
    f_q_high: torch.Tensor,
    f_s_high: torch.Tensor,
    support_mask: torch.Tensor,
    normalize: bool = True,
) -> torch.Tensor:
    """Support-guided objectness prior on the query grid.

    Background support features are zeroed by the mask before matching; each
    query pixel keeps its best cosine match over all support pixels.
    """
    if support_mask.sum() == 0:
        raise ValueError("support mask has no foreground to match against")
    masked = f_s_high * support_mask.unsqueeze(-1)
    hq, wq, c = f_q_high.shape
    sim = pairwise_cosine(f_q_high.reshape(-1, c), masked.reshape(-1, c))
    best = sim.max(dim=1).values.reshape(hq, wq)
    return minmax_normalize(best) if normalize else best


def general_object_mask(prior: torch.Tensor, cam: torch.Tensor, tau: float) -> torch.Tensor:
    """Binary mask of general objects: max-fused cues thresholded at tau."""
    if prior.shape != cam.shape:
        raise ValueError("prior and activation maps must share a grid")
    fused = torch.maximum(prior, cam)
    return (fused >= tau).to(prior.dtype)


def general_prototype_masks(f_q: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    return cosine_similarity_map(f_q, prototypes)


def allocate(vectors: torch.Tensor, guide: torch.Tensor) -> torch.Tensor:
    """Place vectors[guide[h, w]] at every pixel; ties were already resolved."""
    return vectors[guide]


def initial_general_feature(
    prototypes: torch.Tensor,
    m_gp: torch.Tensor,
    f_q: torch.Tensor,
    fuse_conv: nn.Conv2d,
) -> torch.Tensor:
    """Concat per-pixel winning prototype with the query feature, mix by 1x1 conv."""
    guide = argmax_lowest(m_gp, dim=2)
    allocated = allocate(prototypes, guide)
    stacked = torch.cat([allocated, f_q], dim=2)
    out = fuse_conv(stacked.permute(2, 0, 1).unsqueeze(0))
    return out[0].permute(1, 2, 0)


class Gomm(nn.Module):
    """Learned pieces of the mining module plus its forward wiring."""

    def __init__(self, channels: int, num_prototypes: int = 16, tau: float = 0.6):
        super().__init__()
        if not 0.0 < tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {tau}")
        if num_prototypes < 2:
            raise ValueError("need at least 2 general prototypes")
        self.tau = tau
        self.prototypes = nn.Parameter(torch.randn(num_prototypes, channels) * 0.02)
        self.fuse_conv = nn.Conv2d(2 * channels, channels, kernel_size=1)
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)
        self.segment_head = nn.Conv2d(channels, 2, kernel_size=1)

    def attention_weights(self, f_q: torch.Tensor, f_ig: torch.Tensor) -> torch.Tensor:
        h, w, c = f_q.shape
        q = self.q_proj(f_q.reshape(-1, c))
        k = self.k_proj(f_ig.reshape(-1, c))
        logits = q @ k.t() / (c**0.5)
        return torch.softmax(logits, dim=1)

    def fuse_general_feature(self, f_q: torch.Tensor, f_ig: torch.Tensor) -> torch.Tensor:
        """Cross-attention (queries from F_q, keys/values from F_ig) + residual."""
        h, w, c = f_q.shape
        attn = self.attention_weights(f_q, f_ig)
        mixed = self.out_proj(attn @ self.v_proj(f_ig.reshape(-1, c)))
        return mixed.reshape(h, w, c) + f_q

    def general_head(self, f_ig: torch.Tensor) -> torch.Tensor:
        logits = self.segment_head(f_ig.permute(2, 0, 1).unsqueeze(0))
        return logits[0].permute(1, 2, 0)

    def forward(
        self, f_q: torch.Tensor, prior: torch.Tensor, cam: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (F_g, general-object logits, M_g target)."""
        with torch.no_grad():
            m_g = general_object_mask(prior, cam, self.tau)
        m_gp = general_prototype_masks(f_q, self.prototypes)
        f_ig = initial_general_feature(self.prototypes, m_gp, f_q, self.fuse_conv)
        logits = self.general_head(f_ig)
        f_g = self.fuse_general_feature(f_q, f_ig)
        return f_g, logits, m_g
