"""Static figures: track overlays, loss curves, scaling curves.

Rendering uses the Agg backend and strips the software/date metadata so a
fixed input produces identical PNG bytes with a given matplotlib version.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .engines import TrackResult, gate_visibility  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return out


def visible_mask(result: TrackResult, threshold: float = 0.6) -> np.ndarray:
    return gate_visibility(result, threshold)


def plot_tracks(video, tracks, visible, out, frames: int = 4, tail: int = 8) -> Path:
    """Overlay tracks on ``frames`` evenly spaced frames.

    Visible positions are filled dots, occluded ones hollow; each frame also
    shows the last ``tail`` positions of every track.  An empty track set
    yields the bare frames.
    """
    video = np.asarray(video)
    tracks = np.asarray(tracks, dtype=np.float64).reshape(-1, video.shape[0], 2)
    visible = np.asarray(visible, dtype=bool).reshape(tracks.shape[:2])
    T, _, H, W = video.shape
    idx = np.unique(np.linspace(0, T - 1, max(1, min(frames, T))).round().astype(int))
    fig, axes = plt.subplots(1, len(idx), figsize=(2.4 * len(idx), 2.6), squeeze=False)
    colors = plt.get_cmap("hsv")(np.linspace(0, 1, max(1, len(tracks)), endpoint=False))
    for ax, t in zip(axes[0], idx):
        ax.imshow(np.clip(video[t].transpose(1, 2, 0), 0, 1), interpolation="nearest")
        for i in range(len(tracks)):
            lo = max(0, t - tail)
            seg = tracks[i, lo:t + 1]
            ax.plot(seg[:, 0], seg[:, 1], "-", lw=0.8, color=colors[i])
            x, y = tracks[i, t]
            ax.scatter([x], [y], s=12, edgecolors=[colors[i]],
                       facecolors=[colors[i]] if visible[i, t] else "none", linewidths=0.8)
        ax.set_xlim(-0.5, W - 0.5)
        ax.set_ylim(H - 0.5, -0.5)
        ax.set_title(f"t={t}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, out)


def plot_loss_curve(rows, out) -> Path:
    """One line per loss component against step (log scale when all positive)."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = [r["step"] for r in rows]
    for key in ("track_loss", "conf_loss", "vis_loss"):
        vals = np.array([r[key] for r in rows], dtype=float)
        if np.isfinite(vals).any():
            ax.plot(steps, vals, marker="o", ms=2, label=key)
    finite = [r[k] for r in rows for k in ("track_loss", "conf_loss", "vis_loss")
              if np.isfinite(r[k])]
    if finite and min(finite) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out)


def plot_scaling(data: dict, out, ylabel: str = "delta_avg (visible)") -> Path:
    """``data`` maps corpus size -> metric value, or is ``{"series": {name: {size: value}}}``."""
    series = data.get("series") if isinstance(data.get("series"), dict) else {"model": data}
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, pts in sorted(series.items()):
        xs = sorted(pts, key=float)
        ax.plot([float(x) for x in xs], [float(pts[x]) for x in xs], marker="o", label=name)
    ax.set_xscale("log")
    ax.set_xlabel("training videos")
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out)
