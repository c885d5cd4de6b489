"""Offline (single window) and online (sliding window) inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .container import CorruptedFileError, read_container, write_container
from .errors import CapacityError, ParameterError, ShapeError, StreamError
from .model import TrackerModel
from .transformer import TrackState

TRACKS_KIND = "tracks"


@dataclass
class TrackResult:
    tracks: np.ndarray            # (N, T, 2)
    visibility_prob: np.ndarray   # (N, T)
    confidence_prob: np.ndarray   # (N, T)
    queries: np.ndarray           # (N, 3) (t, x, y)
    meta: dict = field(default_factory=dict)

    def subset(self, mask) -> "TrackResult":
        mask = np.asarray(mask, dtype=bool)
        return TrackResult(self.tracks[mask], self.visibility_prob[mask],
                           self.confidence_prob[mask], self.queries[mask], dict(self.meta))


def _as_queries(queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float32)
    if q.ndim != 2 or q.shape[1] != 3:
        raise ShapeError(f"queries must be (N, 3) rows of (t, x, y), got {q.shape}")
    return q


def _as_video(video) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(video, dtype=np.float32))
    if v.dim() != 4 or v.shape[1] != 3:
        raise ShapeError(f"video must be (T, 3, H, W), got {tuple(v.shape)}")
    return v


def _check_queries(q, T):
    t = q[:, 0]
    if np.any(t < 0) or np.any(t >= T) or np.any(t != np.round(t)):
        raise ShapeError(f"query frames must be integers in [0, {T})")


def _result(states: TrackState, queries: np.ndarray, meta=None) -> TrackResult:
    P = states.P[0].detach().cpu().numpy().astype(np.float32)
    # pinning is exact already; rewriting from the float32 query keeps it bit-exact
    tq = queries[:, 0].astype(np.int64)
    P[np.arange(len(queries)), tq] = queries[:, 1:]
    return TrackResult(P, torch.sigmoid(states.V[0]).cpu().numpy().astype(np.float32),
                       torch.sigmoid(states.C[0]).cpu().numpy().astype(np.float32),
                       queries.copy(), meta or {})


# ----------------------------------------------------------------------
# offline


@torch.no_grad()
def track_offline(model: TrackerModel, video, queries, iters: int | None = None,
                  max_len: int = 96) -> TrackResult:
    """Bidirectional tracking over the whole video as one window."""
    v = _as_video(video)
    q = _as_queries(queries)
    T = v.shape[0]
    if T > max_len:
        raise CapacityError(f"video has {T} frames; offline engine is capped at {max_len}")
    _check_queries(q, T)
    model.eval()
    qt = torch.from_numpy(q)[None]
    states = model(v[None], qt, iters=iters or model.cfg.iters_eval)
    return _result(states[-1], q, {"mode": "offline"})


# ----------------------------------------------------------------------
# online


def window_stride(window: int) -> int:
    if window < 4 or window % 2:
        raise ParameterError(f"window length must be even and >= 4, got {window}")
    return window // 2


def num_windows(T: int, window: int) -> int:
    s = window_stride(window)
    if T <= window:
        return 1
    return math.ceil((T - window) / s) + 1


def first_window(tq, window: int):
    """Index of the first window containing frame ``tq`` (array-friendly)."""
    s = window_stride(window)
    tq = np.asarray(tq, dtype=np.int64)
    return np.maximum(0, -((-(tq - window + 1)) // s))


def handoff_state(prev: TrackState, stride: int, window: int, fresh: TrackState,
                  carried: torch.Tensor) -> TrackState:
    """Initial state of the next window.

    The overlapping half comes from the previous window's output; frames beyond
    the overlap copy the last overlapped frame.  Points not in ``carried``
    (B, N) keep ``fresh`` (query-initialised) values.
    """
    def shift(x):
        ov = x[:, :, stride:]
        pad = ov[:, :, -1:].expand(*ov.shape[:2], window - ov.shape[2], *ov.shape[3:])
        return torch.cat([ov, pad], dim=2)

    c3 = carried[:, :, None]
    return TrackState(
        torch.where(c3[..., None], shift(prev.P), fresh.P),
        torch.where(c3, shift(prev.C), fresh.C),
        torch.where(c3, shift(prev.V), fresh.V),
    )


class OnlineTracker:
    """Streaming tracker.  Feed frames in order with :meth:`push`; each call returns
    the frames finalised so far as ``(frame_indices, tracks, vis_prob, conf_prob)`` or
    ``None``.  :meth:`finish` flushes the tail (padding the last window by repeating
    the final frame) and returns the full :class:`TrackResult`.
    """

    def __init__(self, model: TrackerModel, queries, window: int = 8, iters: int | None = None):
        self.model = model.eval()
        self.q = _as_queries(queries)
        self.window = window
        self.stride = window_stride(window)
        self.iters = iters or model.cfg.iters_eval
        self.N = len(self.q)
        self.first = first_window(self.q[:, 0].astype(np.int64), window)
        self.frames: list = []          # buffered frames, starting at self.buf_start
        self.buf_start = 0
        self.next_t = 0
        self.w = 0                      # next window to run
        self.prev = None                # previous window output (TrackState)
        self.qfeats = None              # per scale (1, N, K, d)
        self.out_P, self.out_V, self.out_C = [], [], []
        self.emitted = 0
        self._pending = None            # outputs of the last window, not yet final

    def push(self, t: int, frame):
        if t != self.next_t:
            raise StreamError(f"expected frame {self.next_t}, got {t}")
        self.frames.append(torch.as_tensor(np.asarray(frame, dtype=np.float32)))
        self.next_t += 1
        end = self.w * self.stride + self.window
        if self.next_t == end:
            self._run_window(self.next_t)
            return self._emit_upto((self.w) * self.stride)
        return None

    def finish(self) -> TrackResult:
        T = self.next_t
        if T == 0:
            raise StreamError("no frames received")
        _check_queries(self.q, T)
        while self.w < num_windows(T, self.window):
            self._run_window(T)
        self._emit_upto(T)
        P = np.concatenate(self.out_P, axis=1)[:, :T]
        V = np.concatenate(self.out_V, axis=1)[:, :T]
        C = np.concatenate(self.out_C, axis=1)[:, :T]
        tq = self.q[:, 0].astype(np.int64)
        P[np.arange(self.N), tq] = self.q[:, 1:]
        return TrackResult(P, V, C, self.q.copy(), {"mode": "online", "window": self.window})

    # -- internals -------------------------------------------------------

    @torch.no_grad()
    def _run_window(self, T_known: int):
        w, s, W = self.w, self.stride, self.window
        start = w * s
        idx = [min(t, T_known - 1) - self.buf_start for t in range(start, start + W)]
        clip = torch.stack([self.frames[i] for i in idx])[None]
        pyr = self.model.pyramid(clip)
        q = torch.from_numpy(self.q)[None].clone()
        q_rel = q.clone()
        q_rel[..., 0] = q[..., 0] - start
        new = torch.from_numpy(self.first == w)[None]
        active = torch.from_numpy(self.first <= w)[None]
        # query features of points activated in this window
        if new.any():
            local = q_rel.clone()
            local[..., 0] = local[..., 0].clamp(0, W - 1)
            feats = self.model.query_features(pyr, local)
            if self.qfeats is None:
                self.qfeats = [torch.zeros_like(f) for f in feats]
            self.qfeats = [torch.where(new[..., None, None], f, old)
                           for f, old in zip(feats, self.qfeats)]
        fresh = TrackState.init(q, W)
        if self.prev is None:
            init = fresh
        else:
            init = handoff_state(self.prev, s, W, fresh, active & ~new)
        t_rel = q_rel[..., 0].long()
        pin = (t_rel[..., None] == torch.arange(W)) & active[..., None]
        if self.qfeats is None:   # nothing active yet
            out = init
        else:
            states = self.model.iterate(pyr, q_rel, init, self.iters, qfeats=self.qfeats,
                                        point_mask=active, pin_mask=pin)
            out = states[-1]
        self.prev = out
        self._pending = (start, out, active[0].numpy())
        self.w += 1
        # drop frames no later window needs
        keep_from = self.w * s
        drop = keep_from - self.buf_start
        if drop > 0:
            self.frames = self.frames[drop:]
            self.buf_start = keep_from

    def _emit_upto(self, stop: int):
        """Finalise frames ``[emitted, stop)`` from the latest window."""
        if self._pending is None or stop <= self.emitted:
            return None
        start, st, active = self._pending
        lo, hi = self.emitted - start, stop - start
        P = st.P[0, :, lo:hi].numpy().copy()
        V = torch.sigmoid(st.V[0, :, lo:hi]).numpy().copy()
        C = torch.sigmoid(st.C[0, :, lo:hi]).numpy().copy()
        frames = np.arange(self.emitted, stop)
        tq = self.q[:, 0].astype(np.int64)
        before = (frames[None, :] < tq[:, None]) | ~active[:, None]
        P[before] = np.broadcast_to(self.q[:, None, 1:], P.shape)[before]
        V[before] = 0.0
        C[before] = 0.0
        self.out_P.append(P.astype(np.float32))
        self.out_V.append(V.astype(np.float32))
        self.out_C.append(C.astype(np.float32))
        self.emitted = stop
        return frames, P, V, C


def track_online(model: TrackerModel, frame_stream, queries, window: int = 8,
                 iters: int | None = None) -> TrackResult:
    """Forward-only sliding-window tracking over an iterable of frames (or a video array)."""
    tracker = OnlineTracker(model, queries, window, iters)
    for t, frame in enumerate(frame_stream):
        tracker.push(t, frame)
    return tracker.finish()


# ----------------------------------------------------------------------
# support points and gating


def add_support_points(queries, H: int, W: int, grid_global: int = 5, grid_local: int = 8,
                       local_radius: float | None = None):
    """Append a global regular grid (per distinct query frame) and a local grid around
    every query.  Returns ``(extended_queries, is_original_mask)``.

    ``grid_global`` or ``grid_local`` of 0 disables that grid.
    """
    q = _as_queries(queries)
    if local_radius is None:
        local_radius = min(H, W) / 16.0
    rows = [q]
    if grid_global > 0:
        margin_x, margin_y = (W - 1) / (2 * grid_global), (H - 1) / (2 * grid_global)
        gx = np.linspace(margin_x, W - 1 - margin_x, grid_global)
        gy = np.linspace(margin_y, H - 1 - margin_y, grid_global)
        gyy, gxx = np.meshgrid(gy, gx, indexing="ij")
        for t in np.unique(q[:, 0]):
            rows.append(np.stack([np.full(gxx.size, t), gxx.ravel(), gyy.ravel()], axis=1))
    off = np.linspace(-local_radius, local_radius, grid_local)
    oyy, oxx = np.meshgrid(off, off, indexing="ij")
    for t, x, y in q if grid_local > 0 else ():
        lx = np.clip(x + oxx.ravel(), 0, W - 1)
        ly = np.clip(y + oyy.ravel(), 0, H - 1)
        rows.append(np.stack([np.full(lx.size, t), lx, ly], axis=1))
    ext = np.concatenate(rows).astype(np.float32)
    mask = np.zeros(len(ext), dtype=bool)
    mask[: len(q)] = True
    return ext, mask


def gate_visibility(result: TrackResult, threshold: float = 0.6) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    return result.visibility_prob * result.confidence_prob > threshold


# ----------------------------------------------------------------------
# track files


def write_tracks(result: TrackResult, path, config: dict | None = None) -> None:
    N, T = result.visibility_prob.shape
    meta = {"kind": TRACKS_KIND, "N": int(N), "T": int(T),
            "queries": result.queries.tolist(), "config": config or {}, "meta": result.meta}
    write_container(path, meta, {
        "tracks": result.tracks.astype("<f4"),
        "visibility": result.visibility_prob.astype("<f4"),
        "confidence": result.confidence_prob.astype("<f4"),
        "queries": result.queries.astype("<f4"),
    })


def read_tracks(path) -> TrackResult:
    meta, t = read_container(path)
    if meta.get("kind") != TRACKS_KIND:
        raise CorruptedFileError(f"{path}: not a track file (kind={meta.get('kind')!r})")
    return TrackResult(t["tracks"], t["visibility"], t["confidence"], t["queries"],
                       meta.get("meta", {}))
