"""Object-level correlation between support prototypes and query features.

Support features are pooled into 49 frequency prototypes; the ones whose
similarity masks agree best (worst) with the support mask act as foreground
(background) prototypes. At training time an entropic optimal-transport plan
couples query region pixels to those prototypes, and its argmax becomes the
prototype allocating mask, the supervision target for the predicted
allocation. The predicted allocation then aggregates query-conditioned
prototypes and the final correlation feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .numerics import (
    argmax_lowest,
    assert_finite,
    cosine_similarity_map,
    dct_project,
    make_dct_basis,
    pairwise_cosine,
)

DEFAULT_EPSILON = 0.05
DEFAULT_NUM_SELECTED = 5
NUM_FREQUENCY_COMPONENTS = 49


@dataclass(frozen=True)
class PrototypeSelection:
    """Indices into the prototype bank: closest masks vs farthest masks."""

    foreground: torch.Tensor  # N_s indices, smallest mask distance
    background: torch.Tensor  # N_s indices, largest mask distance

    def __post_init__(self):
        if self.foreground.numel() != self.background.numel():
            raise ValueError("selection halves must have equal size")


@dataclass(frozen=True)
class TransportPlan:
    plan: torch.Tensor  # N_f x N_s, nonnegative, sums to 1
    row_marginals: torch.Tensor
    col_marginals: torch.Tensor
    eps: float
    iters_used: int
    marginal_error: float


def multi_frequency_pooling(
    f_s: torch.Tensor, support_mask: torch.Tensor, basis=None
) -> torch.Tensor:
    """Project the masked support feature onto 2D frequency components.

    Returns L x C prototypes scaled by the foreground pixel count, so the
    zero-frequency row is proportional to the masked average feature.
    """
    n_fg = support_mask.sum()
    if n_fg == 0:
        raise ValueError("support mask has no foreground pixels to pool")
    h, w, _ = f_s.shape
    if basis is None:
        basis = make_dct_basis(h, w, NUM_FREQUENCY_COMPONENTS, dtype=f_s.dtype)
    masked = f_s * support_mask.unsqueeze(-1)
    return dct_project(masked, basis) / n_fg


def support_prototype_masks(f_s: torch.Tensor, p_s: torch.Tensor) -> torch.Tensor:
    return cosine_similarity_map(f_s, p_s)


def mask_distances(m_sp: torch.Tensor, support_mask: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between each prototype's similarity mask and the mask."""
    l = m_sp.shape[2]
    diff = m_sp.reshape(-1, l) - support_mask.reshape(-1, 1).to(m_sp.dtype)
    return diff.pow(2).sum(dim=0).sqrt()


def select_prototype_indices(
    m_sp: torch.Tensor, support_mask: torch.Tensor, num_selected: int = DEFAULT_NUM_SELECTED
) -> PrototypeSelection:
    """Foreground = prototypes whose masks sit closest to the support mask."""
    l = m_sp.shape[2]
    if 2 * num_selected > l:
        raise ValueError(f"cannot select 2x{num_selected} from {l} prototypes")
    d = mask_distances(m_sp, support_mask)
    ascending = torch.sort(d, stable=True).indices
    descending = torch.sort(-d, stable=True).indices
    return PrototypeSelection(
        foreground=ascending[:num_selected], background=descending[:num_selected]
    )


def query_prototype_masks(f_q: torch.Tensor, p_s: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    return cosine_similarity_map(f_q, p_s[ids])


def sinkhorn(
    cost: torch.Tensor,
    row_marginals: torch.Tensor,
    col_marginals: torch.Tensor,
    eps: float = DEFAULT_EPSILON,
    max_iters: int = 200,
    tol: float = 1e-6,
) -> TransportPlan:
    """Entropic optimal transport in the log domain.

    Minimizes <T, cost> - eps * H(T) subject to the marginal constraints,
    alternating potential updates until the worst marginal violation drops
    below ``tol``.
    """
    if cost.ndim != 2 or cost.shape[0] == 0 or cost.shape[1] == 0:
        raise ValueError("cost matrix must be nonempty and 2-dimensional")
    assert_finite(cost, "sinkhorn cost")
    if eps <= 0:
        raise ValueError("entropic regularization must be positive")
    for name, m, n in (("row", row_marginals, cost.shape[0]), ("col", col_marginals, cost.shape[1])):
        if m.numel() != n:
            raise ValueError(f"{name} marginals do not match cost shape")
        if (m <= 0).any():
            raise ValueError(f"{name} marginals must be strictly positive")
        if abs(m.sum().item() - 1.0) > 1e-6:
            raise ValueError(f"{name} marginals must sum to 1")

    log_mu = row_marginals.log()
    log_nu = col_marginals.log()
    f = torch.zeros_like(row_marginals)
    g = torch.zeros_like(col_marginals)
    iters = 0
    err = float("inf")
    for iters in range(1, max_iters + 1):
        f = eps * (log_mu - torch.logsumexp((g.unsqueeze(0) - cost) / eps, dim=1))
        g = eps * (log_nu - torch.logsumexp((f.unsqueeze(1) - cost) / eps, dim=0))
        plan = torch.exp((f.unsqueeze(1) + g.unsqueeze(0) - cost) / eps)
        err = max(
            (plan.sum(dim=1) - row_marginals).abs().max().item(),
            (plan.sum(dim=0) - col_marginals).abs().max().item(),
        )
        if err < tol:
            break
    return TransportPlan(plan, row_marginals, col_marginals, eps, iters, err)


def optimal_query_mask(
    f_q: torch.Tensor,
    p_s: torch.Tensor,
    ids: torch.Tensor,
    region_mask: torch.Tensor,
    eps: float = DEFAULT_EPSILON,
    max_iters: int = 200,
    tol: float = 1e-6,
) -> torch.Tensor | None:
    """Transport plan between region pixels and selected prototypes, scattered
    back onto the feature grid (zeros outside the region).

    Returns None when the region is empty at feature resolution; the caller
    skips the allocation loss for that episode.
    """
    h, w, _ = f_q.shape
    flat_region = region_mask.reshape(-1) > 0.5
    n_f = int(flat_region.sum().item())
    if n_f == 0:
        return None
    similarity = query_prototype_masks(f_q, p_s, ids).reshape(-1, ids.numel())
    cost = 1.0 - similarity[flat_region]
    n_s = ids.numel()
    mu = torch.full((n_f,), 1.0 / n_f, dtype=cost.dtype)
    nu = torch.full((n_s,), 1.0 / n_s, dtype=cost.dtype)
    result = sinkhorn(cost, mu, nu, eps=eps, max_iters=max_iters, tol=tol)
    out = torch.zeros(h * w, n_s, dtype=cost.dtype)
    out[flat_region] = result.plan
    return out.reshape(h, w, n_s)


def allocating_mask(m_oqb: torch.Tensor, m_oqf: torch.Tensor) -> torch.Tensor:
    """Per-pixel best prototype over [background block | foreground block]."""
    if m_oqb.shape != m_oqf.shape:
        raise ValueError("background and foreground maps must share a shape")
    stacked = torch.cat([m_oqb, m_oqf], dim=2)
    return argmax_lowest(stacked, dim=2)


class Ccm(nn.Module):
    """Learned projections for predicted allocation and query prototypes."""

    def __init__(self, channels: int, num_selected: int = DEFAULT_NUM_SELECTED):
        super().__init__()
        if 2 * num_selected > NUM_FREQUENCY_COMPONENTS:
            raise ValueError("selection exceeds available frequency prototypes")
        self.num_selected = num_selected
        self.feat_proj = nn.Linear(channels, channels)
        self.proto_proj = nn.Linear(channels, channels)
        self.agg_in = nn.Linear(channels, channels)
        self.agg_out = nn.Linear(channels, channels)
        # The aggregation sums over all pixels, so a default-scale output map
        # would hand the decoder prototype channels far hotter than the
        # feature channels; start small and let training find the scale.
        nn.init.normal_(self.agg_out.weight, std=0.02)
        nn.init.zeros_(self.agg_out.bias)

    def selected_bank(self, p_s: torch.Tensor, selection: PrototypeSelection) -> torch.Tensor:
        """Background rows first, to line up with the allocating mask blocks."""
        return torch.cat([p_s[selection.background], p_s[selection.foreground]], dim=0)

    def match_bank(self, f_g: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
        """Cosine between projected pixels and projected prototype rows."""
        h, w, c = f_g.shape
        pixels = self.feat_proj(f_g.reshape(-1, c))
        return pairwise_cosine(pixels, self.proto_proj(bank)).reshape(h, w, -1)

    def allocating_prediction(
        self, f_g: torch.Tensor, p_s: torch.Tensor, selection: PrototypeSelection
    ) -> torch.Tensor:
        return self.match_bank(f_g, self.selected_bank(p_s, selection))

    def query_prototypes(self, m_hat_pa: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        h, w, c = f_g.shape
        weights = m_hat_pa.reshape(-1, m_hat_pa.shape[2])
        feats = self.agg_in(f_g.reshape(-1, c))
        return self.agg_out(weights.t() @ feats)

    def correlation_feature(
        self, p_q: torch.Tensor, m_hat_pa: torch.Tensor, f_g: torch.Tensor
    ) -> torch.Tensor:
        guide = argmax_lowest(m_hat_pa, dim=2)
        return torch.cat([p_q[guide], f_g], dim=2)

    def forward(
        self, f_g: torch.Tensor, p_s: torch.Tensor, selection: PrototypeSelection
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (M_hat_pa, P_q, F_c)."""
        m_hat_pa = self.allocating_prediction(f_g, p_s, selection)
        p_q = self.query_prototypes(m_hat_pa, f_g)
        f_c = self.correlation_feature(p_q, m_hat_pa, f_g)
        return m_hat_pa, p_q, f_c
