"""Named configurations: ``toy`` (desk scale, 64x64) and ``full`` (256x256 scale values)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .model import ModelConfig


@dataclass
class TrainConfig:
    steps: int = 10_000
    batch: int = 2
    n_queries: int = 32
    clip_len: int = 24
    window: int = 8
    lr: float = 5e-4
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    warmup: int = 200
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    ckpt_every: int = 1000


@dataclass
class DistillConfig:
    n_queries: int = 32
    n_keyframes: int = 4
    min_points_per_frame: int = 8
    lr: float = 5e-5
    steps: int = 2000
    batch: int = 1
    seed: int = 0
    teacher_agg: str = "random"
    vis_gate: float = 0.5
    use_teacher_visibility: bool = True
    log_every: int = 50


@dataclass
class Preset:
    name: str
    size: int
    frames: int
    sprites: int
    tracks: int
    model_offline: ModelConfig
    model_online: ModelConfig
    train: TrainConfig
    distill: DistillConfig
    vis_threshold: float = 0.6
    max_offline_len: int = 64
    extra: dict = field(default_factory=dict)

    def model(self, mode: str) -> ModelConfig:
        return self.model_offline if mode == "offline" else self.model_online


_TOY_MODEL = ModelConfig(
    d=32, k=2, S=4, fnet_width=32, fnet_blocks=2, radius=2, p=32, corr_hidden=128,
    width=64, layers=2, heads=4, n_proxy=16, fourier_bands=8, time_embed="learned",
    max_time_len=24, iters_train=4, iters_eval=6,
)

TOY = Preset(
    name="toy", size=64, frames=24, sprites=3, tracks=64,
    model_offline=_TOY_MODEL,
    model_online=replace(_TOY_MODEL, time_embed="fourier"),
    train=TrainConfig(lr=1e-3),
    distill=DistillConfig(),
    max_offline_len=96,
)

_FULL_MODEL = ModelConfig(
    d=128, k=4, S=4, fnet_width=128, fnet_blocks=4, radius=3, p=64, corr_hidden=384,
    width=256, layers=6, heads=8, n_proxy=64, fourier_bands=10, time_embed="learned",
    max_time_len=60, iters_train=4, iters_eval=6,
)

FULL = Preset(
    name="full", size=256, frames=64, sprites=8, tracks=512,
    model_offline=_FULL_MODEL,
    model_online=replace(_FULL_MODEL, time_embed="fourier"),
    train=TrainConfig(steps=50_000, batch=1, n_queries=384, clip_len=64, window=16,
                      lr=5e-4, warmup=1000, ckpt_every=5000),
    distill=DistillConfig(n_queries=384, n_keyframes=8, min_points_per_frame=48,
                          steps=15_000),
    max_offline_len=300,
)

PRESETS = {"toy": TOY, "full": FULL}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
