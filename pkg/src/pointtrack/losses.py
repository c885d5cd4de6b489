"""Discounted multi-iteration track, confidence and visibility losses.

Each loss is ``sum_m gamma**(M - m) * mean_{cells}(term_m)`` where ``m = 1..M``
runs over the refinement iterations and the mean is taken over the
(point, frame) cells selected by ``mask`` (all cells by default).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError

# evaluation counters; the distillation loop asserts conf/vis are never evaluated
loss_calls: Counter = Counter()


@dataclass
class LossConfig:
    gamma: float = 0.8
    huber_delta: float = 6.0
    occluded_weight: float = 0.2
    conf_radius: float = 12.0
    w_track: float = 1.0
    w_conf: float = 1.0
    w_vis: float = 1.0


def huber(pred: torch.Tensor, target: torch.Tensor, delta: float = 6.0) -> torch.Tensor:
    """Huber penalty on the Euclidean residual ``r = |pred - target|_2`` (last axis)."""
    r2 = (pred - target).square().sum(-1)
    quad = 0.5 * r2
    # clamp keeps the sqrt away from 0 so the unused branch has finite gradients
    lin = delta * (torch.sqrt(r2.clamp_min(delta * delta)) - 0.5 * delta)
    return torch.where(r2 <= delta * delta, quad, lin)


def _masked_mean(x, mask):
    if mask is None:
        return x.mean()
    mask = mask.to(x.dtype)
    return (x * mask).sum() / mask.sum().clamp_min(1.0)


def _check(states, ref):
    if not states:
        raise ShapeError("need at least one iteration")
    for s in states:
        if s.P.shape[:-1] != ref.shape:
            raise ShapeError(f"track shape {tuple(s.P.shape)} vs target {tuple(ref.shape)}")


def _discounts(M, gamma):
    return [gamma ** (M - m) for m in range(1, M + 1)]


def track_loss(states, gt_tracks, gt_visibility, cfg: LossConfig = LossConfig(), mask=None):
    """Huber track loss, visible cells weighted 1, occluded ``cfg.occluded_weight``."""
    _check(states, gt_visibility)
    loss_calls["track"] += 1
    vis = gt_visibility.to(gt_tracks.dtype)
    weight = vis + cfg.occluded_weight * (1.0 - vis)
    total = 0.0
    for g, s in zip(_discounts(len(states), cfg.gamma), states):
        total = total + g * _masked_mean(weight * huber(s.P, gt_tracks, cfg.huber_delta), mask)
    return total


def conf_loss(states, gt_tracks, cfg: LossConfig = LossConfig(), mask=None):
    """BCE of confidence logits against ``|P^(m) - P*| < conf_radius`` (recomputed per m)."""
    _check(states, gt_tracks[..., 0])
    loss_calls["conf"] += 1
    total = 0.0
    for g, s in zip(_discounts(len(states), cfg.gamma), states):
        err2 = (s.P.detach() - gt_tracks).square().sum(-1)
        target = (err2 < cfg.conf_radius ** 2).to(s.C.dtype)
        bce = F.binary_cross_entropy_with_logits(s.C, target, reduction="none")
        total = total + g * _masked_mean(bce, mask)
    return total


def vis_loss(states, gt_visibility, cfg: LossConfig = LossConfig(), mask=None):
    _check(states, gt_visibility)
    loss_calls["vis"] += 1
    target = gt_visibility.to(states[0].V.dtype)
    total = 0.0
    for g, s in zip(_discounts(len(states), cfg.gamma), states):
        bce = F.binary_cross_entropy_with_logits(s.V, target, reduction="none")
        total = total + g * _masked_mean(bce, mask)
    return total


def total_loss(states, gt_tracks, gt_visibility, cfg: LossConfig = LossConfig(), mask=None):
    lt = track_loss(states, gt_tracks, gt_visibility, cfg, mask)
    lc = conf_loss(states, gt_tracks, cfg, mask)
    lv = vis_loss(states, gt_visibility, cfg, mask)
    return cfg.w_track * lt + cfg.w_conf * lc + cfg.w_vis * lv, (lt, lc, lv)
