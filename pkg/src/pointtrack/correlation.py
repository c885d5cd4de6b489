"""Neighbourhood sampling and projected 4D correlation features.

Neighbourhood layout: the ``(2r+1)**2`` offsets are enumerated row-major,
``index = (dy + r) * (2r+1) + (dx + r)``.  A 4D correlation between a query
neighbourhood ``q`` and a track neighbourhood ``f`` is flattened as
``out[a * (2r+1)**2 + b] = <q[a], f[b]>``.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


def neighborhood_offsets(radius: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``((2r+1)**2, 2)`` integer offsets (dx, dy), row-major."""
    r = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=-1)


def bilinear_sample(fmap: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``fmap`` (n, d, h, w) at texel coordinates ``coords`` (n, m, 2) -> (n, m, d).

    Texel ``(u, v)`` sits at integer coordinates; out-of-range coordinates are
    clamped to the border.
    """
    n, d, h, w = fmap.shape
    gx = 2.0 * coords[..., 0] / (w - 1) - 1.0 if w > 1 else torch.zeros_like(coords[..., 0])
    gy = 2.0 * coords[..., 1] / (h - 1) - 1.0 if h > 1 else torch.zeros_like(coords[..., 1])
    grid = torch.stack([gx, gy], dim=-1)[:, :, None, :]
    out = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[..., 0].transpose(1, 2)


def _blend_basis(radius: int, dtype, device) -> torch.Tensor:
    """``(4, K, (2r+2)**2)`` 0/1 maps picking the four bilinear corners of each offset."""
    side = 2 * radius + 1
    K, Pn = side * side, (side + 1) ** 2
    basis = torch.zeros(4, K, Pn, dtype=dtype, device=device)
    for a in range(K):
        iy, ix = divmod(a, side)
        for j, (cy, cx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            basis[j, a, (iy + cy) * (side + 1) + ix + cx] = 1.0
    return basis


def _patch_and_weights(fmap, centers, radius, stride):
    """Integer texel patch ``(n, m, (2r+2)**2, d)`` and blend weights ``(n, m, K, (2r+2)**2)``.

    Every offset shares the centre's fractional part, so a single patch plus
    per-point bilinear weights describes the whole neighbourhood.  Clamping
    each texel index to the map reproduces border clamping of the sample
    coordinate exactly.
    """
    n, d, h, w = fmap.shape
    m = centers.shape[1]
    c = centers / stride
    base = torch.floor(c)
    frac = c - base
    base = base.long()
    r = torch.arange(-radius, radius + 2, device=fmap.device)
    xs = (base[..., 0:1] + r).clamp(0, w - 1)          # (n, m, side+1)
    ys = (base[..., 1:2] + r).clamp(0, h - 1)
    idx = ys[..., :, None] * w + xs[..., None, :]      # (n, m, side+1, side+1)
    idx = idx + (torch.arange(n, device=fmap.device) * (h * w))[:, None, None, None]
    rows = fmap.permute(0, 2, 3, 1).reshape(n * h * w, d)
    patch = rows.index_select(0, idx.reshape(-1)).reshape(n, m, -1, d)
    fx, fy = frac[..., 0], frac[..., 1]
    coef = torch.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], dim=-1)
    basis = _blend_basis(radius, fmap.dtype, fmap.device)
    weights = (coef @ basis.flatten(1)).reshape(n, m, basis.shape[1], basis.shape[2])
    return patch, weights


def sample_neighborhood(fmap: torch.Tensor, centers: torch.Tensor, radius: int,
                        stride: float) -> torch.Tensor:
    """Bilinear neighbourhoods around pixel-space ``centers``.

    Args:
        fmap: ``(n, d, h, w)`` feature maps.
        centers: ``(n, m, 2)`` pixel coordinates (x, y), one map per row of ``n``.
        radius: neighbourhood radius in texels.
        stride: pixels per texel at this scale.

    Returns:
        ``(n, m, (2r+1)**2, d)``; texel ``j`` is sampled at
        ``center / stride + offset_j`` with border clamping.
    """
    patch, weights = _patch_and_weights(fmap, centers, radius, stride)
    return weights @ patch


def corr4d(query_nbhd: torch.Tensor, track_nbhd: torch.Tensor) -> torch.Tensor:
    """All pairwise inner products, ``(..., K, d) x (..., K, d) -> (..., K*K)``."""
    if query_nbhd.shape[-2:] != track_nbhd.shape[-2:]:
        raise ShapeError(f"neighbourhood shapes differ: {tuple(query_nbhd.shape)} "
                         f"vs {tuple(track_nbhd.shape)}")
    c = torch.einsum("...ad,...bd->...ab", query_nbhd, track_nbhd)
    return c.flatten(-2)


class CorrMLP(nn.Module):
    """One MLP shared across scales: ``(2r+1)**4 -> hidden -> hidden -> p``."""

    def __init__(self, radius: int = 3, p: int = 64, hidden: int = 384):
        super().__init__()
        self.radius, self.p = radius, p
        self.in_dim = (2 * radius + 1) ** 4
        self.net = nn.Sequential(
            nn.Linear(self.in_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, p),
        )

    def forward(self, corrs):
        return self.net(corrs)


def project_corr(mlp: CorrMLP, per_scale_corrs) -> torch.Tensor:
    """Concatenate the shared MLP's output over scales -> ``(..., p * S)``.

    ``per_scale_corrs`` is a list of ``(..., (2r+1)**4)`` tensors or a single
    tensor whose second-to-last axis is the scale axis.
    """
    if isinstance(per_scale_corrs, torch.Tensor):
        per_scale_corrs = list(per_scale_corrs.unbind(-2))
    for c in per_scale_corrs:
        if c.shape[-1] != mlp.in_dim:
            raise ShapeError(f"correlation length {c.shape[-1]} != {mlp.in_dim}")
    return torch.cat([mlp(c) for c in per_scale_corrs], dim=-1)


def query_neighborhoods(pyramid, queries: torch.Tensor, radius: int) -> list:
    """Neighbourhoods at each query's own frame, per scale: list of ``(B, N, K, d)``.

    ``queries`` is ``(B, N, 3)`` holding ``(t, x, y)``; ``t`` is a frame index
    into the pyramid.
    """
    B, N, _ = queries.shape
    tq = queries[..., 0].long()
    out = []
    for s, fmap in enumerate(pyramid.maps):
        T = fmap.shape[1]
        flat = fmap.reshape(B * T, *fmap.shape[2:])
        idx = (torch.arange(B, device=tq.device)[:, None] * T + tq.clamp(0, T - 1)).reshape(-1)
        picked = flat[idx]  # (B*N, d, h, w)
        nb = sample_neighborhood(picked, queries[..., 1:].reshape(B * N, 1, 2), radius,
                                 pyramid.stride(s))
        out.append(nb.reshape(B, N, *nb.shape[2:]))
    return out


def correlation_features(pyramid, query_nbhds: list, tracks: torch.Tensor, mlp: CorrMLP,
                         radius: int) -> torch.Tensor:
    """Projected correlations for every (point, frame): ``(B, N, T, p * S)``.

    ``tracks`` is ``(B, N, T, 2)`` in pixels.
    """
    B, N, T, _ = tracks.shape
    centers = tracks.permute(0, 2, 1, 3).reshape(B * T, N, 2)
    feats = []
    for s, fmap in enumerate(pyramid.maps):
        flat = fmap.reshape(B * T, *fmap.shape[2:])
        nb = sample_neighborhood(flat, centers, radius, pyramid.stride(s))   # (BT, N, K, d)
        K, d = nb.shape[-2:]
        # one (K x d) @ (d x T*K) product per point covers every frame
        nb = nb.reshape(B, T, N, K, d).permute(0, 2, 4, 1, 3).reshape(B, N, d, T * K)
        c = query_nbhds[s] @ nb                                             # (B, N, K, T*K)
        c = c.reshape(B, N, K, T, K).transpose(2, 3).reshape(B, N, T, K * K)
        feats.append(mlp(c))
    return torch.cat(feats, dim=-1)
