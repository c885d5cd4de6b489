"""Token grid and the iterative track-refinement transformer.

Token layout for point ``i`` at frame ``t`` (width ``2 * (4 * bands + 2) + 2 + p * S``)::

    [ eta(P[t] - P[t-1]) | eta(P[t+1] - P[t]) | C[t] | V[t] | Corr[t] ]

with zero displacement at the sequence ends.  ``eta`` is laid out as
``[dx, dy, sin(f_0 dx), sin(f_0 dy), cos(f_0 dx), cos(f_0 dy), ..., cos(f_{B-1} dy)]``
with ``f_j = pi * 2**(j - bands + 1)`` radians per pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError


@dataclass
class TrackState:
    """Tracks ``P`` (B, N, T, 2) in pixels; confidence/visibility logits (B, N, T)."""

    P: torch.Tensor
    C: torch.Tensor
    V: torch.Tensor
    iteration: int = 0

    @classmethod
    def init(cls, queries: torch.Tensor, T: int) -> "TrackState":
        B, N, _ = queries.shape
        P = queries[:, :, None, 1:].expand(B, N, T, 2).clone()
        zeros = queries.new_zeros(B, N, T)
        return cls(P, zeros, zeros.clone(), 0)

    def detach(self) -> "TrackState":
        return TrackState(self.P.detach(), self.C.detach(), self.V.detach(), self.iteration)


def eta_dim(bands: int) -> int:
    return 4 * bands + 2


def token_dim(bands: int, p: int, S: int) -> int:
    return 2 * eta_dim(bands) + 2 + p * S


def fourier_encode_displacement(disp: torch.Tensor, bands: int) -> torch.Tensor:
    """``(..., 2)`` displacement in pixels -> ``(..., 4 * bands + 2)``."""
    freqs = math.pi * 2.0 ** (torch.arange(bands, dtype=disp.dtype, device=disp.device)
                              - (bands - 1))
    ang = disp[..., None, :] * freqs[:, None]          # (..., bands, 2)
    enc = torch.cat([ang.sin(), ang.cos()], dim=-1)    # (..., bands, 4)
    return torch.cat([disp, enc.flatten(-2)], dim=-1)


def build_tokens(state: TrackState, corr: torch.Tensor, bands: int) -> torch.Tensor:
    """Assemble the ``(B, N, T, D_tok)`` token grid."""
    P, C, V = state.P, state.C, state.V
    if corr.shape[:3] != P.shape[:3] or C.shape != P.shape[:3] or V.shape != P.shape[:3]:
        raise ShapeError(f"inconsistent shapes: P {tuple(P.shape)} C {tuple(C.shape)} "
                         f"V {tuple(V.shape)} corr {tuple(corr.shape)}")
    fwd = P[:, :, 1:] - P[:, :, :-1]                       # t -> t+1, length T-1
    zero = torch.zeros_like(P[:, :, :1])
    back = torch.cat([zero, fwd], dim=2)                   # t-1 -> t
    fwd = torch.cat([fwd, zero], dim=2)
    return torch.cat([
        fourier_encode_displacement(back, bands),
        fourier_encode_displacement(fwd, bands),
        C[..., None], V[..., None], corr,
    ], dim=-1)


def sinusoidal_embedding(length: int, width: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(width // 2, dtype=torch.float64)[None]
    ang = pos / (10000.0 ** (2 * i / width))
    emb = torch.zeros(length, width, dtype=torch.float64)
    emb[:, 0::2] = torch.sin(ang)
    emb[:, 1::2] = torch.cos(ang)[:, : (width - width // 2)]
    return emb.to(dtype)


def interpolate_time_embeddings(table: torch.Tensor, target_len: int) -> torch.Tensor:
    """Linearly resample a ``(max_len, width)`` table to ``target_len`` rows (end-aligned)."""
    if target_len < 2:
        raise ParameterError(f"target_len must be >= 2, got {target_len}")
    if target_len == table.shape[0]:
        return table
    x = table.t()[None]  # (1, width, max_len)
    return F.interpolate(x, size=target_len, mode="linear", align_corners=True)[0].t()


class TimeEmbedding(nn.Module):
    """``fourier``: fixed sinusoids at positions 0..T-1.  ``learned``: trainable table
    (initialised from sinusoids) linearly interpolated to T."""

    def __init__(self, kind: str, max_len: int, width: int):
        super().__init__()
        if kind not in ("fourier", "learned"):
            raise ParameterError(f"unknown time embedding kind {kind!r}")
        self.kind, self.max_len, self.width = kind, max_len, width
        if kind == "learned":
            self.table = nn.Parameter(sinusoidal_embedding(max_len, width))

    def forward(self, T: int, dtype=None, device=None) -> torch.Tensor:
        if self.kind == "learned":
            return interpolate_time_embeddings(self.table, T) if T >= 2 else self.table[:T]
        return sinusoidal_embedding(T, self.width, dtype or torch.float32).to(device)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ParameterError(f"width {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_mask=None):
        """``x`` (n, Lq, dim) attends ``context`` (n, Lk, dim); ``key_mask`` (n, Lk) bool."""
        context = x if context is None else context
        n, lq, dim = x.shape
        lk = context.shape[1]
        h = self.heads
        q = self.q(x).reshape(n, lq, h, -1).transpose(1, 2)
        k, v = self.kv(context).reshape(n, lk, 2, h, -1).permute(2, 0, 3, 1, 4)
        mask = None
        if key_mask is not None:
            # rows with no valid key fall back to attending everything
            key_mask = key_mask | ~key_mask.any(dim=1, keepdim=True)
            mask = key_mask[:, None, None, :]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(y.transpose(1, 2).reshape(n, lq, dim))


class Mlp(nn.Module):
    def __init__(self, dim, ratio=4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SelfBlock(nn.Module):
    def __init__(self, dim, heads, ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, ratio)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h)
        return x + self.mlp(self.norm2(x))


class CrossBlock(nn.Module):
    def __init__(self, dim, heads, ratio=4):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, ratio)

    def forward(self, x, context, key_mask=None):
        x = x + self.attn(self.norm_q(x), self.norm_kv(context), key_mask)
        return x + self.mlp(self.norm2(x))


class GroupBlock(nn.Module):
    """Cross-track attention through a pool of proxy tokens (cost linear in N)."""

    def __init__(self, dim, heads, ratio=4):
        super().__init__()
        self.proxy_from_tracks = CrossBlock(dim, heads, ratio)
        self.tracks_from_proxy = CrossBlock(dim, heads, ratio)

    def forward(self, tracks, proxies, track_mask=None):
        # tracks (n, N, dim), proxies (n, n_proxy, dim)
        proxies = self.proxy_from_tracks(proxies, tracks, track_mask)
        tracks = self.tracks_from_proxy(tracks, proxies)
        return tracks, proxies


class TrackTransformer(nn.Module):
    """Alternating time-attention / proxy group-attention blocks with two linear heads.

    ``forward`` maps a ``(B, N, T, D_tok)`` grid to ``(dP (B,N,T,2), dC, dV (B,N,T))``.
    """

    def __init__(self, in_dim: int, width: int = 64, layers: int = 2, heads: int = 4,
                 n_proxy: int = 64, time_embed: str = "fourier", max_time_len: int = 60,
                 mlp_ratio: int = 4, delta_scale: float = 1.0):
        super().__init__()
        self.width, self.n_proxy = width, n_proxy
        # track deltas are predicted in units of ``delta_scale`` pixels
        self.delta_scale = delta_scale
        self.input_proj = nn.Linear(in_dim, width)
        self.time_embed = TimeEmbedding(time_embed, max_time_len, width)
        self.proxy_tokens = nn.Parameter(torch.randn(n_proxy, width) * 0.02)
        self.time_blocks = nn.ModuleList([SelfBlock(width, heads, mlp_ratio) for _ in range(layers)])
        self.group_blocks = nn.ModuleList([GroupBlock(width, heads, mlp_ratio)
                                           for _ in range(layers)])
        self.norm = nn.LayerNorm(width)
        self.track_head = nn.Linear(width, 2)
        self.cv_head = nn.Linear(width, 2)
        for head in (self.track_head, self.cv_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, grid: torch.Tensor, point_mask: torch.Tensor | None = None,
                time_embed: torch.Tensor | None = None):
        B, N, T, _ = grid.shape
        x = self.input_proj(grid)
        if time_embed is None:
            time_embed = self.time_embed(T, x.dtype, x.device)
        x = x + time_embed.to(x.dtype)
        prox = (self.proxy_tokens.to(x.dtype)[None, :, None, :] + time_embed.to(x.dtype))
        prox = prox.expand(B, self.n_proxy, T, self.width)
        tmask = None
        if point_mask is not None:
            tmask = point_mask[:, None, :].expand(B, T, N).reshape(B * T, N)
        nall = N + self.n_proxy
        for tb, gb in zip(self.time_blocks, self.group_blocks):
            # time attention: each track (and proxy) attends over its own frames
            z = torch.cat([x, prox], dim=1).reshape(B * nall, T, self.width)
            z = tb(z).reshape(B, nall, T, self.width)
            x, prox = z[:, :N], z[:, N:]
            # group attention per frame
            xt = x.transpose(1, 2).reshape(B * T, N, self.width)
            pt = prox.transpose(1, 2).reshape(B * T, self.n_proxy, self.width)
            xt, pt = gb(xt, pt, tmask)
            x = xt.reshape(B, T, N, self.width).transpose(1, 2)
            prox = pt.reshape(B, T, self.n_proxy, self.width).transpose(1, 2)
        x = self.norm(x)
        dP = self.track_head(x) * self.delta_scale
        cv = self.cv_head(x)
        return dP, cv[..., 0], cv[..., 1]


def transformer_step(model: TrackTransformer, grid, time_embed=None, point_mask=None):
    return model(grid, point_mask=point_mask, time_embed=time_embed)
