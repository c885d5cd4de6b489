"""Pseudo-label fine-tuning: keypoint queries, frozen teachers, track-loss-only student updates."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .engines import TrackResult, read_tracks, track_offline, track_online, write_tracks
from .errors import CapacityError, ShapeError, StreamError, TrainingError
from .losses import LossConfig, loss_calls, track_loss
from .model import TrackerModel, parameter_hash, save_checkpoint
from .presets import DistillConfig
from .sift import detect_keypoints
from .training import (Batch, offline_loss, online_loss, warmup_cosine, write_loss_curve)

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# query sampling


def sample_keyframes(T: int, n: int, rng: np.random.Generator, early_bias: bool = False):
    """``n`` distinct sorted frame indices; linearly decaying weights when ``early_bias``."""
    n = min(n, T)
    if early_bias:
        w = np.arange(T, 0, -1, dtype=np.float64)
        p = w / w.sum()
    else:
        p = None
    return np.sort(rng.choice(T, size=n, replace=False, p=p))


def allocate_quota(available, total: int) -> list[int]:
    """Equal share per frame; frames short of their share pass the deficit to richer frames."""
    k = len(available)
    base = [total // k + (1 if i < total % k else 0) for i in range(k)]
    take = [min(a, b) for a, b in zip(available, base)]
    deficit = total - sum(take)
    while deficit > 0:
        spare = [i for i in range(k) if available[i] > take[i]]
        if not spare:
            break
        for i in spare:
            if deficit == 0:
                break
            take[i] += 1
            deficit -= 1
    return take


def sift_queries(video, cfg: DistillConfig, rng: np.random.Generator, online: bool = False,
                 use_numba=None):
    """Keypoint queries ``(n, 3)`` rows ``(t, x, y)``, or ``None`` to skip the video.

    The video is skipped when any selected keyframe yields fewer than
    ``cfg.min_points_per_frame`` keypoints.  Within each frame, keypoints are
    drawn at random from the detections.
    """
    video = np.asarray(video)
    frames = sample_keyframes(video.shape[0], cfg.n_keyframes, rng, early_bias=online)
    dets = []
    for t in frames:
        kp = detect_keypoints(video[t], use_numba=use_numba)
        if len(kp) < cfg.min_points_per_frame:
            return None
        dets.append(kp)
    quota = allocate_quota([len(d) for d in dets], cfg.n_queries)
    rows = []
    for t, kp, q in zip(frames, dets, quota):
        sel = np.sort(rng.choice(len(kp), size=q, replace=False))
        rows.append(np.concatenate([np.full((q, 1), t, np.float64), kp[sel, :2]], axis=1))
    return np.concatenate(rows).astype(np.float32)


# ----------------------------------------------------------------------
# teachers


@dataclass
class Teacher:
    name: str
    model: TrackerModel
    mode: str = "offline"
    window: int = 8
    max_len: int = 96

    def predict(self, video, queries, iters=None) -> TrackResult:
        if self.mode == "offline":
            return track_offline(self.model, video, queries, iters=iters, max_len=self.max_len)
        return track_online(self.model, video, queries, window=self.window, iters=iters)


def freeze(model: TrackerModel) -> TrackerModel:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def frozen_copy(model: TrackerModel) -> TrackerModel:
    """Independent frozen copy (the self-training teacher)."""
    return freeze(copy.deepcopy(model))


class TeacherRegistry:
    """Frozen teachers with a seeded per-batch uniform draw."""

    def __init__(self, teachers, seed: int = 0, window: int = 8, max_len: int = 96):
        items = []
        for i, t in enumerate(teachers):
            if isinstance(t, Teacher):
                items.append(t)
            elif isinstance(t, TrackerModel):
                items.append(Teacher(f"teacher{i}", t, "offline", window, max_len))
            else:
                name, model, mode = t
                items.append(Teacher(str(name), model, mode, window, max_len))
        if not items:
            raise ValueError("teacher registry is empty")
        for t in items:
            freeze(t.model)
        self.teachers = items
        self.seed = seed
        self.initial_hashes = self.hashes()

    def __len__(self):
        return len(self.teachers)

    def hashes(self) -> list[str]:
        return [parameter_hash(t.model) for t in self.teachers]

    def verify_unchanged(self) -> None:
        if self.hashes() != self.initial_hashes:
            raise TrainingError("a teacher's parameters changed during distillation")


def sample_teacher(registry: TeacherRegistry, batch_index: int) -> Teacher:
    """Uniform draw, reproducible from ``(registry.seed, batch_index)``."""
    if len(registry) == 0:
        raise ValueError("teacher registry is empty")
    rng = np.random.default_rng([registry.seed, batch_index])
    return registry.teachers[int(rng.integers(len(registry)))]


# ----------------------------------------------------------------------
# pseudo-labels


def _video_key(video) -> str:
    return hashlib.sha1(np.ascontiguousarray(video, dtype=np.float32).tobytes()).hexdigest()[:16]


class PseudoLabelCache:
    """Track files keyed by (video content, teacher parameters, sampling seed)."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._teacher_keys = {}
        self.hits = self.misses = 0

    def path(self, video, teacher: Teacher, seed) -> Path:
        tk = self._teacher_keys.get(id(teacher.model))
        if tk is None:
            tk = parameter_hash(teacher.model)[:16]
            self._teacher_keys[id(teacher.model)] = tk
        return self.root / f"{_video_key(video)}_{tk}_{teacher.mode}_{seed}.tracks"


@torch.no_grad()
def pseudo_label(teacher: Teacher, video, queries, cache: PseudoLabelCache | None = None,
                 seed=None) -> TrackResult:
    """Teacher predictions used as training targets (no gradient reaches the teacher)."""
    if cache is not None and seed is not None:
        p = cache.path(video, teacher, seed)
        if p.exists():
            res = read_tracks(p)
            if np.array_equal(res.queries, np.asarray(queries, np.float32)):
                cache.hits += 1
                return res
        res = teacher.predict(video, queries)
        write_tracks(res, p, {"teacher": teacher.name})
        cache.misses += 1
        return res
    return teacher.predict(video, queries)


def aggregate_labels(results: list[TrackResult], how: str) -> TrackResult:
    """Combine several teachers' labels coordinate-wise (``mean`` or ``median``)."""
    fn = {"mean": np.mean, "median": np.median}[how]
    tr = np.stack([r.tracks for r in results])
    vis = np.stack([r.visibility_prob for r in results])
    conf = np.stack([r.confidence_prob for r in results])
    out = TrackResult(fn(tr, axis=0).astype(np.float32), fn(vis, axis=0).astype(np.float32),
                      fn(conf, axis=0).astype(np.float32), results[0].queries.copy())
    tq = out.queries[:, 0].astype(np.int64)
    out.tracks[np.arange(len(tq)), tq] = out.queries[:, 1:]
    return out


# ----------------------------------------------------------------------
# fine-tuning


@dataclass
class DistillResult:
    model: TrackerModel
    curve: list = field(default_factory=list)
    skipped: int = 0
    teacher_counts: dict = field(default_factory=dict)
    teacher_hashes: list = field(default_factory=list)
    skipped_videos: list = field(default_factory=list)


def _track_only(loss_cfg):
    def crit(states, gt, vis, mask):
        lt = track_loss(states, gt, vis, loss_cfg, mask=mask)
        nan = torch.tensor(float("nan"))
        return lt, (lt, nan, nan)
    return crit


def finetune_student(student: TrackerModel, registry: TeacherRegistry, videos,
                     cfg: DistillConfig | None = None, mode: str = "offline", window: int = 8,
                     max_len: int = 96, out_dir=None, cache_dir=None,
                     loss_cfg: LossConfig | None = None) -> DistillResult:
    """Fine-tune ``student`` on pseudo-labels from randomly drawn frozen teachers.

    Only the track loss is optimised; the confidence/visibility head is frozen
    and left out of the optimizer.  ``videos`` is indexable, yielding scenes
    (only ``.video`` is used).
    """
    cfg = cfg or DistillConfig()
    loss_cfg = loss_cfg or LossConfig()
    if cfg.teacher_agg not in ("random", "mean", "median"):
        raise ValueError(f"unknown teacher aggregation {cfg.teacher_agg!r}")
    if len(videos) == 0:
        raise TrainingError("no unlabeled videos")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    cache = PseudoLabelCache(cache_dir) if cache_dir else None
    frozen = {id(p) for p in student.cv_head_parameters()}
    for p in student.cv_head_parameters():
        p.requires_grad_(False)
    params = [p for p in student.parameters() if id(p) not in frozen]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=1e-5)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: warmup_cosine(s, cfg.steps, 0))
    crit = _track_only(loss_cfg)
    conf_before, vis_before = loss_calls["conf"], loss_calls["vis"]
    iters = student.cfg.iters_train
    curve, acc, n_acc, skipped = [], 0.0, 0, 0
    counts = {t.name: 0 for t in registry.teachers}
    bad = set()
    t_start = time.time()
    student.train()
    for step in range(1, cfg.steps + 1):
        teacher = sample_teacher(registry, step)
        items = []
        for j in range(cfg.batch):
            item = None
            for vi in rng.permutation(len(videos)):
                if int(vi) in bad and len(bad) < len(videos):
                    continue
                qseed = int(rng.integers(2 ** 31))
                video = videos[int(vi)].video
                q = sift_queries(video, cfg, np.random.default_rng(qseed),
                                 online=teacher.mode == "online")
                if q is None:
                    skipped += 1
                    bad.add(int(vi))
                    log.info("skipping video %d: too few keypoints", vi)
                    continue
                try:
                    if cfg.teacher_agg == "random":
                        lab = pseudo_label(teacher, video, q, cache, qseed)
                    else:
                        lab = aggregate_labels([pseudo_label(t, video, q, cache, qseed)
                                                for t in registry.teachers], cfg.teacher_agg)
                except (ShapeError, CapacityError, StreamError, RuntimeError) as exc:
                    skipped += 1
                    log.warning("teacher %s failed on video %d: %s", teacher.name, vi, exc)
                    continue
                item = (video, q, lab)
                break
            if item is None:
                raise TrainingError(f"all {len(videos)} videos were skipped "
                                    "(too few keypoints or teacher failures)")
            items.append(item)
        counts[teacher.name] += 1
        b, mask = _pseudo_batch(items, cfg, online_teacher=teacher.mode == "online"
                                and cfg.teacher_agg == "random")
        if mode == "offline":
            loss, _ = offline_loss(student, b, iters, loss_cfg, criterion=crit, mask=mask)
        else:
            loss, _ = online_loss(student, b, iters, window, loss_cfg, criterion=crit)
        if not math.isfinite(float(loss.detach())):
            raise TrainingError(f"non-finite track loss at distillation step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        lr = sched.get_last_lr()[0]
        opt.step()
        sched.step()
        acc += float(loss.detach())
        n_acc += 1
        if step % cfg.log_every == 0 or step == cfg.steps:
            curve.append({"step": step, "track_loss": acc / n_acc, "conf_loss": float("nan"),
                          "vis_loss": float("nan"), "lr": lr})
            log.info("distill step %d track %.3f (%.1fs)", step, acc / n_acc,
                     time.time() - t_start)
            acc, n_acc = 0.0, 0
            if out_dir is not None:
                write_loss_curve(Path(out_dir) / "loss_curve.csv", curve)
    student.eval()
    if loss_calls["conf"] != conf_before or loss_calls["vis"] != vis_before:
        raise TrainingError("confidence/visibility losses were evaluated during distillation")
    registry.verify_unchanged()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(student, Path(out_dir) / "model.ckpt", {"distill": asdict(cfg)})
        write_loss_curve(Path(out_dir) / "loss_curve.csv", curve)
    return DistillResult(student, curve, skipped, counts, registry.hashes(), sorted(bad))


def _pseudo_batch(items, cfg: DistillConfig, online_teacher: bool):
    """Stack ``(video, queries, label)`` items into a training batch and a loss mask."""
    vids, qs, trs, vis, masks = [], [], [], [], []
    for video, q, lab in items:
        T = video.shape[0]
        vids.append(np.asarray(video, np.float32))
        qs.append(q)
        trs.append(lab.tracks)
        if cfg.use_teacher_visibility:
            vis.append(lab.visibility_prob > cfg.vis_gate)
        else:
            vis.append(np.ones_like(lab.visibility_prob, dtype=bool))
        m = np.ones((len(q), T), bool)
        if online_teacher:   # forward-only labels: frames before the query carry no signal
            m = np.arange(T)[None, :] >= q[:, :1].astype(np.int64)
        masks.append(m)
    b = Batch(torch.from_numpy(np.stack(vids)), torch.from_numpy(np.stack(qs)),
              torch.from_numpy(np.stack(trs)), torch.from_numpy(np.stack(vis)))
    return b, torch.from_numpy(np.stack(masks))
