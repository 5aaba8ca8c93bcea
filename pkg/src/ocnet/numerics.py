"""Shared numeric primitives used across the pipeline.

Feature maps are channels-last ``H x W x C`` torch tensors; prototypes are
``N x C``. Training runs in float32, all finite-difference checks expect
float64. NaN/Inf is surfaced as an error, never propagated silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

EPS_NORM = 1e-8


def assert_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t


def cosine_similarity_map(feat: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    """Per-pixel cosine similarity between an H x W x C map and N x C prototypes.

    Returns H x W x N. Zero-norm pixels or prototypes yield 0 via the
    epsilon-guarded denominator.
    """
    if feat.ndim != 3 or protos.ndim != 2 or feat.shape[2] != protos.shape[1]:
        raise ValueError(
            f"shape mismatch: feature {tuple(feat.shape)} vs prototypes {tuple(protos.shape)}"
        )
    dots = torch.einsum("hwc,nc->hwn", feat, protos)
    feat_norm = feat.norm(dim=2).unsqueeze(2)
    proto_norm = protos.norm(dim=1).view(1, 1, -1)
    return dots / (feat_norm * proto_norm + EPS_NORM)


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Full cosine similarity matrix between rows of a (M x C) and b (N x C)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    dots = a @ b.T
    na = a.norm(dim=1, keepdim=True)
    nb = b.norm(dim=1, keepdim=True)
    return dots / (na * nb.T + EPS_NORM)


def minmax_normalize(m: torch.Tensor) -> torch.Tensor:
    """Affine rescale to [0, 1]; constant inputs collapse to ~0."""
    lo = m.min()
    hi = m.max()
    return (m - lo) / (hi - lo + EPS_NORM)


@dataclass(frozen=True)
class DctBasis:
    """First k x k lowest-frequency orthonormal 2D DCT-II basis functions.

    ``basis`` is L x H x W with L = k*k, ordered row-major by frequency pair
    (u, v); component 0 is the DC term.
    """

    height: int
    width: int
    num_components: int
    basis: torch.Tensor


def make_dct_basis(
    height: int, width: int, num_components: int = 49, dtype: torch.dtype = torch.float32
) -> DctBasis:
    k = math.isqrt(num_components)
    if k * k != num_components:
        raise ValueError(f"num_components must be a square, got {num_components}")
    if k > min(height, width):
        raise ValueError(f"{k}x{k} basis does not fit a {height}x{width} grid")
    hh = torch.arange(height, dtype=dtype)
    ww = torch.arange(width, dtype=dtype)
    basis = torch.empty(num_components, height, width, dtype=dtype)
    for u in range(k):
        au = math.sqrt((1.0 if u == 0 else 2.0) / height)
        cu = au * torch.cos(math.pi * (2.0 * hh + 1.0) * u / (2.0 * height))
        for v in range(k):
            av = math.sqrt((1.0 if v == 0 else 2.0) / width)
            cv = av * torch.cos(math.pi * (2.0 * ww + 1.0) * v / (2.0 * width))
            basis[u * k + v] = cu.unsqueeze(1) * cv.unsqueeze(0)
    return DctBasis(height, width, num_components, basis)


def dct_project(feat: torch.Tensor, basis: DctBasis) -> torch.Tensor:
    """Project an H x W x C map onto the basis: out[l] = sum_hw basis[l] * feat."""
    if feat.ndim != 3 or feat.shape[0] != basis.height or feat.shape[1] != basis.width:
        raise ValueError(
            f"feature {tuple(feat.shape)} does not match {basis.height}x{basis.width} basis"
        )
    return torch.einsum("lhw,hwc->lc", basis.basis.to(feat.dtype), feat)


def argmax_lowest(t: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Argmax with ties broken by the lowest index."""
    top = t.max(dim=dim, keepdim=True).values
    n = t.shape[dim]
    shape = [1] * t.ndim
    shape[dim] = n
    idx = torch.arange(n, device=t.device).view(shape)
    cand = torch.where(t == top, idx, torch.full_like(idx, n))
    out = cand.min(dim=dim).values
    if bool((out == n).any()):
        raise FloatingPointError("argmax over non-finite values")
    return out


def downsample_mask(mask: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Binary mask at feature resolution: box-average then threshold at 0.5."""
    pooled = torch.nn.functional.adaptive_avg_pool2d(
        mask[None, None].to(torch.float32), (height, width)
    )[0, 0]
    return (pooled >= 0.5).to(mask.dtype if mask.is_floating_point() else torch.float32)


def grad_check(loss_fn, params, h: float = 1e-5, max_coords: int = 50, rng=None) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` must be a deterministic scalar closure over ``params`` (float64
    leaf tensors). Coordinates are subsampled to ``max_coords`` when the
    parameter count is larger.
    """
    params = [p for p in params]
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check requires float64 parameters")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss in grad_check")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(c)] for c in picks]

    worst = 0.0
    for pi, j in coords:
        flat = params[pi].data.view(-1)
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + h
            up = loss_fn().item()
            flat[j] = orig - h
            down = loss_fn().item()
            flat[j] = orig
        fd = (up - down) / (2.0 * h)
        an = 0.0 if analytic[pi] is None else analytic[pi].view(-1)[j].item()
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, rel)
    return worst
