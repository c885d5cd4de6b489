"""TAP-Vid style point-tracking metrics and the first-query evaluation protocol.

All thresholds are strict: a prediction is "within k px" when its Euclidean
error is ``< k``.  Metrics over an empty cell set return ``None`` (undefined),
never 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engines import (TrackResult, add_support_points, gate_visibility, track_offline,
                      track_online)
from .errors import ShapeError

THRESHOLDS = (1, 2, 4, 8, 16)
METRIC_FRAME = 256


def _check_same(*arrays):
    shapes = [np.shape(a) for a in arrays]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"shape mismatch: {shapes}")


def _sq_err(pred, gt):
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ShapeError(f"track shapes differ or lack an (x, y) axis: {pred.shape} vs {gt.shape}")
    return np.square(pred - gt).sum(-1)


def delta_avg(pred_tracks, gt_tracks, eval_mask=None, thresholds=THRESHOLDS):
    """Fraction of masked cells within each threshold, and their mean.

    Returns ``(per_threshold: dict, mean)``; ``(None, None)`` for an empty mask.
    """
    err2 = _sq_err(pred_tracks, gt_tracks)
    mask = np.ones(err2.shape, bool) if eval_mask is None else np.asarray(eval_mask, bool)
    _check_same(err2, mask)
    n = int(mask.sum())
    if n == 0:
        return None, None
    per = {int(k): float(((err2 < k * k) & mask).sum() / n) for k in thresholds}
    return per, float(np.mean(list(per.values())))


def occlusion_accuracy(pred_visible, gt_visible, eval_mask=None):
    pv, gv = np.asarray(pred_visible, bool), np.asarray(gt_visible, bool)
    _check_same(pv, gv)
    mask = np.ones(pv.shape, bool) if eval_mask is None else np.asarray(eval_mask, bool)
    _check_same(pv, mask)
    n = int(mask.sum())
    if n == 0:
        return None
    return float(((pv == gv) & mask).sum() / n)


def jaccard_per_threshold(pred_tracks, pred_visible, gt_tracks, gt_visible, eval_mask=None,
                          thresholds=THRESHOLDS):
    err2 = _sq_err(pred_tracks, gt_tracks)
    pv, gv = np.asarray(pred_visible, bool), np.asarray(gt_visible, bool)
    mask = np.ones(pv.shape, bool) if eval_mask is None else np.asarray(eval_mask, bool)
    _check_same(err2, pv, gv, mask)
    gt_pos = int((gv & mask).sum())
    if gt_pos == 0:
        return None
    out = {}
    for k in thresholds:
        within = err2 < k * k
        tp = int((within & gv & pv & mask).sum())
        fp = int((pv & (~gv | ~within) & mask).sum())
        out[int(k)] = tp / (gt_pos + fp)   # gt_pos = TP + FN
    return out


def average_jaccard(pred_tracks, pred_visible, gt_tracks, gt_visible, eval_mask=None,
                    thresholds=THRESHOLDS):
    per = jaccard_per_threshold(pred_tracks, pred_visible, gt_tracks, gt_visible, eval_mask,
                                thresholds)
    return None if per is None else float(np.mean(list(per.values())))


def to_metric_frame(tracks, H: int, W: int, size: int = METRIC_FRAME):
    """Scale pixel coordinates from an ``H x W`` frame to ``size x size``."""
    t = np.asarray(tracks, np.float64)
    return t * np.array([size / W, size / H])


# ----------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    aj: float | None = None
    delta_avg_vis: float | None = None
    delta_avg_occ: float | None = None
    oa: float | None = None
    per_threshold: dict = field(default_factory=dict)
    n_points: int = 0
    n_frames: int = 0
    n_videos: int = 0
    n_excluded: int = 0
    epe_vis: float | None = None     # mean end-point error on visible cells, native pixels
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["per_threshold"] = {int(k): v for k, v in d.get("per_threshold", {}).items()}
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text())


def video_metrics(pred_tracks, pred_visible, gt_tracks, gt_visible, query_frames, H, W,
                  size: int = METRIC_FRAME) -> dict:
    """Metrics for one video in first-query mode (frames strictly after the query)."""
    N, T = np.shape(gt_visible)
    tq = np.asarray(query_frames, np.int64)
    after = np.arange(T)[None, :] > tq[:, None]
    gv = np.asarray(gt_visible, bool)
    p = to_metric_frame(pred_tracks, H, W, size)
    g = to_metric_frame(gt_tracks, H, W, size)
    per_vis, d_vis = delta_avg(p, g, gv & after)
    _, d_occ = delta_avg(p, g, ~gv & after)
    err = np.sqrt(_sq_err(pred_tracks, gt_tracks))
    sel = gv & after
    return {
        "aj": average_jaccard(p, pred_visible, g, gv, after),
        "delta_avg_vis": d_vis,
        "delta_avg_occ": d_occ,
        "oa": occlusion_accuracy(pred_visible, gv, after),
        "per_threshold": per_vis,
        "epe_vis": float(err[sel].mean()) if sel.any() else None,
    }


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(per_video: list[dict], n_points=0, n_frames=0, n_excluded=0) -> MetricsReport:
    """Average per-video metrics (undefined entries skipped)."""
    keys = ("aj", "delta_avg_vis", "delta_avg_occ", "oa", "epe_vis")
    out = {k: _mean_defined([v[k] for v in per_video]) for k in keys}
    per = {}
    for k in THRESHOLDS:
        per[k] = _mean_defined([v["per_threshold"][k] for v in per_video
                                if v["per_threshold"] is not None])
    return MetricsReport(per_threshold=per, n_points=n_points, n_frames=n_frames,
                         n_videos=len(per_video), n_excluded=n_excluded, **out)


# ----------------------------------------------------------------------
# protocol


def first_visible_queries(gt_tracks, gt_visible):
    """Queries at each track's first visible frame; returns ``(queries, kept_index)``."""
    gv = np.asarray(gt_visible, bool)
    kept = np.flatnonzero(gv.any(axis=1))
    tq = gv[kept].argmax(axis=1)
    xy = np.asarray(gt_tracks)[kept, tq]
    q = np.concatenate([tq[:, None].astype(np.float32), xy.astype(np.float32)], axis=1)
    return q, kept


def gt_predictor(scene, queries) -> TrackResult:
    """Oracle predictor returning ground truth (requires queries on gt tracks)."""
    tq = queries[:, 0].astype(np.int64)
    d2 = np.square(scene.gt_tracks[:, tq].transpose(1, 0, 2) - queries[:, None, 1:]).sum(-1)
    idx = np.argmin(d2, axis=1)  # (M,) track nearest to each query
    vis = scene.gt_visibility[idx].astype(np.float32)
    return TrackResult(scene.gt_tracks[idx].copy(), vis, vis.copy(),
                       np.asarray(queries, np.float32))


def model_predictor(model, mode: str = "offline", window: int = 8, max_len: int = 96,
                    iters: int | None = None):
    def predict(scene, queries):
        if mode == "offline":
            return track_offline(model, scene.video, queries, iters=iters, max_len=max_len)
        return track_online(model, scene.video, queries, window=window, iters=iters)
    return predict


def eval_first_query(predict, dataset, vis_threshold: float = 0.6, one_at_a_time: bool = True,
                     support: bool = True, max_tracks: int | None = None, seed: int = 0,
                     size: int = METRIC_FRAME) -> MetricsReport:
    """First-query evaluation.

    Args:
        predict: ``fn(scene, queries) -> TrackResult`` (see :func:`model_predictor`).
        dataset: indexable of scenes with ground truth.
        one_at_a_time: run each benchmark query separately (with support points);
            otherwise all queries of a video run jointly.
        max_tracks: evaluate at most this many tracks per video (seeded subsample).
    """
    rng = np.random.default_rng(seed)
    per_video, n_points, n_frames, n_excl = [], 0, 0, 0
    for i in range(len(dataset)):
        sc = dataset[i]
        T, _, H, W = sc.video.shape
        queries, kept = first_visible_queries(sc.gt_tracks, sc.gt_visibility)
        n_excl += sc.gt_tracks.shape[0] - len(kept)
        if max_tracks is not None and len(kept) > max_tracks:
            pick = np.sort(rng.choice(len(kept), max_tracks, replace=False))
            queries, kept = queries[pick], kept[pick]
        if len(kept) == 0:
            continue
        groups = [[j] for j in range(len(kept))] if one_at_a_time else [list(range(len(kept)))]
        P = np.zeros((len(kept), T, 2), np.float32)
        Vb = np.zeros((len(kept), T), bool)
        for g in groups:
            q = queries[g]
            if support:
                # jointly evaluated queries already give each other local context
                q, mask = add_support_points(q, H, W, grid_local=8 if one_at_a_time else 0)
            else:
                mask = np.ones(len(q), bool)
            res = predict(sc, q)
            vis = gate_visibility(res, vis_threshold)
            P[g] = res.tracks[mask]
            Vb[g] = vis[mask]
        per_video.append(video_metrics(P, Vb, sc.gt_tracks[kept], sc.gt_visibility[kept],
                                       queries[:, 0], H, W, size))
        n_points += len(kept)
        n_frames += T
    return aggregate(per_video, n_points, n_frames, n_excl)
