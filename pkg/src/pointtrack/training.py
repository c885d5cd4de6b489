"""Supervised training on synthetic scenes: offline (variable length) and online (unrolled windows)."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .engines import first_window, handoff_state, num_windows, window_stride
from .errors import TrainingError
from .losses import LossConfig, total_loss
from .model import TrackerModel, query_pin_mask, save_checkpoint
from .presets import TrainConfig
from .synth import SyntheticScene, list_scenes, read_scene
from .transformer import TrackState

log = logging.getLogger(__name__)

CURVE_FIELDS = ("step", "track_loss", "conf_loss", "vis_loss", "lr")


# ----------------------------------------------------------------------
# data


class SceneDataset:
    """Scenes from a directory (read lazily) or an in-memory list."""

    def __init__(self, source):
        if isinstance(source, (str, Path)):
            self.paths = list_scenes(source)
            self.scenes = None
            n = len(self.paths)
        else:
            self.paths = None
            self.scenes = list(source)
            n = len(self.scenes)
        if n == 0:
            raise TrainingError(f"dataset is empty: {source!r}")

    def __len__(self):
        return len(self.paths) if self.paths is not None else len(self.scenes)

    def __getitem__(self, i) -> SyntheticScene:
        if self.scenes is not None:
            return self.scenes[i]
        return read_scene(self.paths[i])

    def subset(self, indices) -> "SceneDataset":
        ds = object.__new__(SceneDataset)
        ds.paths = [self.paths[i] for i in indices] if self.paths is not None else None
        ds.scenes = [self.scenes[i] for i in indices] if self.scenes is not None else None
        return ds


@dataclass
class Batch:
    video: torch.Tensor        # (B, T, 3, H, W)
    queries: torch.Tensor      # (B, N, 3)
    tracks: torch.Tensor       # (B, N, T, 2)
    visibility: torch.Tensor   # (B, N, T) bool


def sample_queries(vis: np.ndarray, n: int, rng: np.random.Generator, early_bias: float = 0.0):
    """Pick ``n`` tracks visible somewhere in the clip and a visible query frame for each.

    With probability ``early_bias`` the query frame is the track's first visible
    frame, otherwise uniform over its visible frames.  Returns ``(track_idx, frames)``
    or ``None`` when no track is visible.
    """
    ok = np.flatnonzero(vis.any(axis=1))
    if len(ok) == 0:
        return None
    idx = rng.choice(ok, size=n, replace=len(ok) < n)
    frames = np.empty(n, dtype=np.int64)
    for j, i in enumerate(idx):
        visible = np.flatnonzero(vis[i])
        frames[j] = visible[0] if rng.random() < early_bias else rng.choice(visible)
    return idx, frames


def make_batch(dataset: SceneDataset, rng: np.random.Generator, batch: int, n_queries: int,
               length: int, early_bias: float = 0.0) -> Batch:
    """Random clips of exactly ``length`` frames (random start) with sampled queries."""
    videos, queries, tracks, visib = [], [], [], []
    while len(videos) < batch:
        sc = dataset[int(rng.integers(len(dataset)))]
        T = sc.video.shape[0]
        L = min(length, T)
        t0 = int(rng.integers(0, T - L + 1))
        vis = sc.gt_visibility[:, t0:t0 + L]
        pick = sample_queries(vis, n_queries, rng, early_bias)
        if pick is None:
            continue
        idx, tq = pick
        gt = sc.gt_tracks[idx, t0:t0 + L]
        q = np.concatenate([tq[:, None].astype(np.float32), gt[np.arange(len(idx)), tq]], axis=1)
        videos.append(sc.video[t0:t0 + L])
        queries.append(q)
        tracks.append(gt)
        visib.append(vis[idx])
    return Batch(torch.from_numpy(np.stack(videos)), torch.from_numpy(np.stack(queries)),
                 torch.from_numpy(np.stack(tracks)), torch.from_numpy(np.stack(visib)))


def offline_length(rng: np.random.Generator, T: int) -> int:
    """One trimmed length in ``[ceil(T/2), T]`` shared by the whole batch."""
    return int(rng.integers(math.ceil(T / 2), T + 1))


# ----------------------------------------------------------------------
# losses per mode


def full_criterion(loss_cfg: LossConfig):
    """``criterion(states, gt_tracks, gt_vis, mask) -> (loss, (track, conf, vis))``."""
    def crit(states, gt, vis, mask):
        return total_loss(states, gt, vis, loss_cfg, mask=mask)
    return crit


def offline_loss(model: TrackerModel, b: Batch, iters: int, loss_cfg: LossConfig,
                 criterion=None, mask=None):
    criterion = criterion or full_criterion(loss_cfg)
    states = model(b.video, b.queries, iters=iters)
    return criterion(states, b.tracks, b.visibility, mask)


def pad_time(x: torch.Tensor, total: int, dim: int) -> torch.Tensor:
    """Repeat the final slice along ``dim`` up to ``total`` entries."""
    extra = total - x.shape[dim]
    if extra <= 0:
        return x
    last = x.narrow(dim, x.shape[dim] - 1, 1)
    reps = [1] * x.dim()
    reps[dim] = extra
    return torch.cat([x, last.repeat(*reps)], dim=dim)


def window_loss_masks(queries: torch.Tensor, T: int, window: int):
    """Per-window ``(active (B,N), cell_mask (B,N,window))``.

    A point contributes from the first window containing its query frame
    onwards, and only on real (unpadded) frames at or after the query frame.
    """
    s = window_stride(window)
    tq = queries[..., 0].long()
    first = torch.from_numpy(first_window(tq.cpu().numpy(), window)).to(tq.device)
    out = []
    for w in range(num_windows(T, window)):
        frames = w * s + torch.arange(window, device=tq.device)
        active = first <= w
        cells = active[..., None] & (frames >= tq[..., None]) & (frames < T)
        out.append((active, cells))
    return out


def online_loss(model: TrackerModel, b: Batch, iters: int, window: int, loss_cfg: LossConfig,
                criterion=None):
    """Unrolled sliding-window loss: per-window losses averaged over windows.

    The state handed from one window to the next is detached, so gradients do
    not cross window boundaries.
    """
    criterion = criterion or full_criterion(loss_cfg)
    B, N, T, _ = b.tracks.shape
    if N == 0:
        raise TrainingError("batch has no queries")
    s = window_stride(window)
    n = num_windows(T, window)
    total_len = (n - 1) * s + window
    video = pad_time(b.video, total_len, 1)
    gt = pad_time(b.tracks, total_len, 2)
    gv = pad_time(b.visibility, total_len, 2)
    pyr = model.pyramid(video)
    qfeats = model.query_features(pyr, b.queries)
    fresh = TrackState.init(b.queries, window)
    first = torch.from_numpy(first_window(b.queries[..., 0].long().numpy(), window))
    prev = None
    losses, parts = [], []
    for w, (active, cells) in enumerate(window_loss_masks(b.queries, T, window)):
        start = w * s
        q_rel = b.queries.clone()
        q_rel[..., 0] -= start
        if prev is None:
            init = fresh
        else:
            init = handoff_state(prev.detach(), s, window, fresh, active & (first < w))
        pin = query_pin_mask(q_rel, window) & active[..., None]
        states = model.iterate(pyr.frames(start, start + window), q_rel, init, iters,
                               qfeats=qfeats, point_mask=active, pin_mask=pin)
        prev = states[-1]
        if not cells.any():
            continue
        sl = slice(start, start + window)
        loss, comps = criterion(states, gt[:, :, sl], gv[:, :, sl], cells)
        losses.append(loss)
        parts.append(comps)
    if not losses:
        raise TrainingError("no window has an active query")
    k = len(losses)
    return sum(losses) / k, tuple(sum(p[i] for p in parts) / k for i in range(3))


# ----------------------------------------------------------------------
# optimisation


def warmup_cosine(step: int, total: int, warmup: int) -> float:
    """LR multiplier: linear warm-up to 1, then cosine decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    span = max(1, total - warmup)
    prog = min(1.0, (step - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * prog))


def write_loss_curve(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow([int(r["step"])] + [repr(float(r[k])) for k in CURVE_FIELDS[1:]])


def read_loss_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"step": int(r["step"]), **{k: float(r[k]) for k in CURVE_FIELDS[1:]}} for r in rows]


@dataclass
class TrainResult:
    model: TrackerModel
    curve: list = field(default_factory=list)
    checkpoint: Path | None = None


def train_supervised(model: TrackerModel, dataset: SceneDataset, mode: str = "offline",
                     cfg: TrainConfig | None = None, out_dir=None,
                     loss_cfg: LossConfig | None = None, extra_meta: dict | None = None,
                     on_log=None) -> TrainResult:
    """Train ``model`` on ground-truth tracks.

    Offline: every batch is trimmed to one random length in ``[T/2, T]``.
    Online: full clips, losses over unrolled sliding windows.
    Writes ``model.ckpt``, periodic ``step_XXXXXXX.ckpt`` and ``loss_curve.csv``
    into ``out_dir`` when given.
    """
    if mode not in ("offline", "online"):
        raise ValueError(f"mode must be 'offline' or 'online', got {mode!r}")
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                            betas=tuple(cfg.betas))
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: warmup_cosine(s, cfg.steps, cfg.warmup))
    meta = {"mode": mode, "train": asdict(cfg), **(extra_meta or {})}
    iters = model.cfg.iters_train
    curve, acc, n_acc = [], np.zeros(3), 0
    t_start = time.time()
    model.train()
    for step in range(1, cfg.steps + 1):
        if mode == "offline":
            L = offline_length(rng, cfg.clip_len)
            b = make_batch(dataset, rng, cfg.batch, cfg.n_queries, L)
            loss, parts = offline_loss(model, b, iters, loss_cfg)
        else:
            b = make_batch(dataset, rng, cfg.batch, cfg.n_queries, cfg.clip_len, early_bias=0.5)
            loss, parts = online_loss(model, b, iters, cfg.window, loss_cfg)
        vals = [float(p.detach()) for p in parts]
        if not math.isfinite(float(loss.detach())):
            raise TrainingError(
                f"non-finite loss at step {step}: track={vals[0]} conf={vals[1]} vis={vals[2]} "
                f"lr={sched.get_last_lr()[0]:.3g}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        lr = sched.get_last_lr()[0]
        opt.step()
        sched.step()
        acc += vals
        n_acc += 1
        if step % cfg.log_every == 0 or step == cfg.steps:
            row = {"step": step, "track_loss": acc[0] / n_acc, "conf_loss": acc[1] / n_acc,
                   "vis_loss": acc[2] / n_acc, "lr": lr}
            curve.append(row)
            acc[:], n_acc = 0.0, 0
            log.info("step %d track %.3f conf %.3f vis %.3f lr %.2e (%.1fs)", step,
                     row["track_loss"], row["conf_loss"], row["vis_loss"], lr,
                     time.time() - t_start)
            if on_log is not None:
                on_log(row)
            if out_dir is not None:
                write_loss_curve(out_dir / "loss_curve.csv", curve)
        if out_dir is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
            save_checkpoint(model, out_dir / f"step_{step:07d}.ckpt", {**meta, "step": step})
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(model, ckpt, {**meta, "step": cfg.steps})
        write_loss_curve(out_dir / "loss_curve.csv", curve)
    return TrainResult(model, curve, ckpt)
