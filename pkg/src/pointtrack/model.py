"""The full tracker: feature pyramid + correlation features + refinement transformer."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .container import CorruptedFileError, read_container, write_container
from .correlation import CorrMLP, correlation_features, query_neighborhoods
from .features import FeatureNet, FeaturePyramid
from .transformer import TrackState, TrackTransformer, build_tokens, token_dim

CHECKPOINT_KIND = "checkpoint"


@dataclass
class ModelConfig:
    d: int = 64
    k: int = 4
    S: int = 4
    fnet_width: int = 64
    fnet_blocks: int = 2
    radius: int = 3
    p: int = 64
    corr_hidden: int = 384
    width: int = 64
    layers: int = 2
    heads: int = 4
    n_proxy: int = 64
    fourier_bands: int = 10
    time_embed: str = "fourier"
    max_time_len: int = 60
    iters_train: int = 4
    iters_eval: int = 6
    mlp_ratio: int = 4
    delta_scale: float = 4.0
    detach_tracks: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class TrackerModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.fnet = FeatureNet(cfg.d, cfg.k, cfg.S, cfg.fnet_width, cfg.fnet_blocks)
        self.corr_mlp = CorrMLP(cfg.radius, cfg.p, cfg.corr_hidden)
        self.transformer = TrackTransformer(
            token_dim(cfg.fourier_bands, cfg.p, cfg.S), cfg.width, cfg.layers, cfg.heads,
            cfg.n_proxy, cfg.time_embed, cfg.max_time_len, cfg.mlp_ratio, cfg.delta_scale)

    # -- pieces ---------------------------------------------------------

    def pyramid(self, video: torch.Tensor) -> FeaturePyramid:
        return self.fnet.pyramid(video)

    def query_features(self, pyramid: FeaturePyramid, queries: torch.Tensor) -> list:
        return query_neighborhoods(pyramid, queries, self.cfg.radius)

    def correlations(self, pyramid, qfeats, tracks):
        return correlation_features(pyramid, qfeats, tracks, self.corr_mlp, self.cfg.radius)

    def cv_head_parameters(self):
        return list(self.transformer.cv_head.parameters())

    # -- refinement -----------------------------------------------------

    def iterate(self, pyramid: FeaturePyramid, queries: torch.Tensor, state: TrackState,
                iters: int, qfeats: list | None = None, point_mask=None, pin_mask=None,
                time_embed=None) -> list:
        """Run ``iters`` refinement steps and return every intermediate state.

        Args:
            pyramid: features of the frames being refined (T frames).
            queries: ``(B, N, 3)`` (t, x, y) with ``t`` relative to ``pyramid``.
            state: initial state.
            qfeats: precomputed query neighbourhoods (default: sampled from
                ``pyramid`` at the query frames).
            point_mask: ``(B, N)`` bool; masked points do not influence others.
            pin_mask: ``(B, N, T)`` bool; cells reset to the query coordinates
                after every update (default: the query frame when in range).
        """
        B, N, _ = queries.shape
        T = pyramid.maps[0].shape[1]
        if qfeats is None:
            qfeats = self.query_features(pyramid, queries)
        if pin_mask is None:
            pin_mask = query_pin_mask(queries, T)
        qxy = queries[:, :, None, 1:].expand(B, N, T, 2)
        pin2 = pin_mask[..., None].expand(B, N, T, 2)
        bands = self.cfg.fourier_bands
        states = []
        P, C, V = state.P, state.C, state.V
        for m in range(iters):
            Pin = P.detach() if self.cfg.detach_tracks else P
            corr = self.correlations(pyramid, qfeats, Pin)
            grid = build_tokens(TrackState(Pin, C, V), corr, bands)
            dP, dC, dV = self.transformer(grid, point_mask=point_mask, time_embed=time_embed)
            P = torch.where(pin2, qxy, P + dP)
            C = C + dC
            V = V + dV
            states.append(TrackState(P, C, V, state.iteration + m + 1))
        return states

    def forward(self, video, queries, iters=None, state=None):
        """Track ``queries`` (B, N, 3) through ``video`` (B, T, 3, H, W) in one window."""
        iters = iters or (self.cfg.iters_train if self.training else self.cfg.iters_eval)
        pyr = self.pyramid(video)
        T = video.shape[1]
        state = state or TrackState.init(queries, T)
        return self.iterate(pyr, queries, state, iters)


def query_pin_mask(queries: torch.Tensor, T: int) -> torch.Tensor:
    tq = queries[..., 0].long()
    return tq[..., None] == torch.arange(T, device=queries.device)


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TrackerModel, path, extra: dict | None = None) -> None:
    meta = {"kind": CHECKPOINT_KIND, "config": asdict(model.cfg), "extra": extra or {}}
    tensors = {name: t.detach().cpu().numpy().astype("<f4")
               for name, t in model.state_dict().items()}
    write_container(path, meta, tensors)


def load_checkpoint(path, device="cpu") -> TrackerModel:
    meta, tensors = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CorruptedFileError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    model = TrackerModel(ModelConfig.from_dict(meta["config"]))
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    model.load_state_dict(state)
    model.checkpoint_meta = meta
    return model.to(device).eval()


def parameter_hash(model_or_params) -> str:
    """SHA-256 over parameter bytes (order-stable)."""
    h = hashlib.sha256()
    if isinstance(model_or_params, nn.Module):
        items = sorted(model_or_params.state_dict().items())
        tensors = [t for _, t in items]
    else:
        tensors = list(model_or_params)
    for t in tensors:
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
