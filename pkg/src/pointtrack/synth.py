"""Procedural toy videos with closed-form point tracks.

A scene is a stack of depth-ordered textured layers.  Layers ``0..n_sprites-1``
are sprites (rectangles or ellipses; index 0 is frontmost) and layer
``n_sprites`` is a full-frame periodic background.  Every layer translates
rigidly along

    position(t) = a + b * t + c * sin(omega * t + phi)        (per axis)

so a point glued to a layer has an exact trajectory, and its visibility is the
geometric test "inside the frame and not covered by a layer in front".

Coordinates are pixel coordinates with pixel ``(row i, col j)`` centred at
``(x=j, y=i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _accel
from .container import CorruptedFileError, read_container, write_container

SCENE_KIND = "scene"
RECT, ELLIPSE, PLANE = 0, 1, 2
SPRITE_TEXTURE = 32
SPRITE_BIAS = 0.8


@dataclass
class SyntheticScene:
    video: np.ndarray          # (T, 3, H, W) float32 in [0, 1]
    gt_tracks: np.ndarray      # (N, T, 2) float32, (x, y)
    gt_visibility: np.ndarray  # (N, T) bool
    seed: int
    sprite_params: list = field(default_factory=list)
    track_layers: np.ndarray = None   # (N,) int64 layer each track is glued to
    textures: np.ndarray = None       # (L, S, S, 3) float32, S = max texture size

    @property
    def shape(self):
        return self.video.shape

    def layer_positions(self, t=None) -> np.ndarray:
        """Layer centres, ``(L, T, 2)`` (or ``(L, len(t), 2)``)."""
        if t is None:
            t = np.arange(self.video.shape[0])
        return layer_positions(self.sprite_params, t)

    def equals(self, other: "SyntheticScene") -> bool:
        return (
            self.seed == other.seed
            and self.sprite_params == other.sprite_params
            and _bits_equal(self.video, other.video)
            and _bits_equal(self.gt_tracks, other.gt_tracks)
            and np.array_equal(self.gt_visibility, other.gt_visibility)
            and np.array_equal(self.track_layers, other.track_layers)
            and _bits_equal(self.textures, other.textures)
        )


def _bits_equal(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def layer_positions(sprite_params, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    out = np.empty((len(sprite_params), t.shape[0], 2), dtype=np.float64)
    for k, sp in enumerate(sprite_params):
        for ax in range(2):
            out[k, :, ax] = (sp["a"][ax] + sp["b"][ax] * t
                             + sp["c"][ax] * np.sin(sp["omega"] * t + sp["phi"][ax]))
    return out


def covers(sp: dict, dx, dy):
    """Whether the layer described by ``sp`` covers the offset (dx, dy) from its centre."""
    dx = np.asarray(dx)
    if sp["shape"] == PLANE:
        return np.ones(dx.shape, dtype=bool)
    rx, ry = sp["radii"]
    if sp["shape"] == RECT:
        return (np.abs(dx) < rx) & (np.abs(dy) < ry)
    return (dx / rx) ** 2 + (dy / ry) ** 2 < 1.0


def in_frame(xy, H, W):
    return (xy[..., 0] >= 0) & (xy[..., 0] < W) & (xy[..., 1] >= 0) & (xy[..., 1] < H)


def compute_visibility(sprite_params, track_layers, gt_tracks, H, W) -> np.ndarray:
    """Visible iff in frame and no layer with a smaller depth index covers the point."""
    T = gt_tracks.shape[1]
    pos = layer_positions(sprite_params, np.arange(T))
    vis = in_frame(gt_tracks, H, W)
    for i, li in enumerate(track_layers):
        for k in range(int(li)):
            d = gt_tracks[i].astype(np.float64) - pos[k]
            vis[i] &= ~covers(sprite_params[k], d[:, 0], d[:, 1])
    return vis


# --------------------------------------------------------------------------
# rasterization kernels


@_accel.njit
def _render_numba(pos, kinds, radii, tex_sizes, textures, H, W):
    L, T = pos.shape[0], pos.shape[1]
    out = np.empty((T, 3, H, W), dtype=np.float32)
    for t in range(T):
        for i in range(H):
            for j in range(W):
                for k in range(L):
                    dx = j - pos[k, t, 0]
                    dy = i - pos[k, t, 1]
                    kind = kinds[k]
                    if kind == 0:
                        hit = abs(dx) < radii[k, 0] and abs(dy) < radii[k, 1]
                    elif kind == 1:
                        hit = (dx / radii[k, 0]) ** 2 + (dy / radii[k, 1]) ** 2 < 1.0
                    else:
                        hit = True
                    if hit:
                        s = tex_sizes[k]
                        u = dx + 0.5 * s
                        v = dy + 0.5 * s
                        u0 = math.floor(u)
                        v0 = math.floor(v)
                        fu = u - u0
                        fv = v - v0
                        iu0 = int(u0) % s
                        iv0 = int(v0) % s
                        iu1 = (iu0 + 1) % s
                        iv1 = (iv0 + 1) % s
                        for c in range(3):
                            top = textures[k, iv0, iu0, c] * (1.0 - fu) + textures[k, iv0, iu1, c] * fu
                            bot = textures[k, iv1, iu0, c] * (1.0 - fu) + textures[k, iv1, iu1, c] * fu
                            out[t, c, i, j] = top * (1.0 - fv) + bot * fv
                        break
    return out


def _render_numpy(pos, kinds, radii, tex_sizes, textures, H, W):
    L, T = pos.shape[0], pos.shape[1]
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                         indexing="ij")
    out = np.empty((T, 3, H, W), dtype=np.float32)
    for t in range(T):
        frame = np.zeros((3, H, W), dtype=np.float64)
        # painter's order: back to front
        for k in range(L - 1, -1, -1):
            dx = xs - pos[k, t, 0]
            dy = ys - pos[k, t, 1]
            if kinds[k] == RECT:
                hit = (np.abs(dx) < radii[k, 0]) & (np.abs(dy) < radii[k, 1])
            elif kinds[k] == ELLIPSE:
                hit = (dx / radii[k, 0]) ** 2 + (dy / radii[k, 1]) ** 2 < 1.0
            else:
                hit = np.ones((H, W), dtype=bool)
            s = int(tex_sizes[k])
            u = dx + 0.5 * s
            v = dy + 0.5 * s
            u0 = np.floor(u)
            v0 = np.floor(v)
            fu = u - u0
            fv = v - v0
            iu0 = u0.astype(np.int64) % s
            iv0 = v0.astype(np.int64) % s
            iu1 = (iu0 + 1) % s
            iv1 = (iv0 + 1) % s
            tex = textures[k]
            for c in range(3):
                top = tex[iv0, iu0, c] * (1.0 - fu) + tex[iv0, iu1, c] * fu
                bot = tex[iv1, iu0, c] * (1.0 - fu) + tex[iv1, iu1, c] * fu
                frame[c] = np.where(hit, top * (1.0 - fv) + bot * fv, frame[c])
        out[t] = frame
    return out


def render_video(sprite_params, textures, T, H, W, use_numba=None) -> np.ndarray:
    pos = layer_positions(sprite_params, np.arange(T))
    kinds = np.array([sp["shape"] for sp in sprite_params], dtype=np.int64)
    radii = np.array([sp.get("radii", [1.0, 1.0]) for sp in sprite_params], dtype=np.float64)
    tex_sizes = np.array([sp["tex_size"] for sp in sprite_params], dtype=np.int64)
    kernel = _accel.pick(_render_numba, _render_numpy, use_numba)
    video = kernel(pos, kinds, radii, tex_sizes, textures.astype(np.float64), H, W)
    return np.clip(video, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# generation


def _texture(rng, size, base):
    fine = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(1.0, 1.0, 0),
                                   mode="wrap")
    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(3.0, 3.0, 0),
                                     mode="wrap")
    tex = 0.6 * fine / (fine.std() + 1e-8) + 0.8 * coarse / (coarse.std() + 1e-8)
    return np.clip(base + 0.15 * tex, 0.0, 1.0)


def _motion(rng, centre_mid, t_mid, axis_speed, slow=1.0):
    """Sample (a, b, c, omega, phi) with per-axis |b| + |c|*omega <= axis_speed."""
    omega = float(rng.uniform(0.1, 0.6))
    budget = axis_speed * slow * float(rng.uniform(0.2, 1.0))
    b = np.empty(2)
    c = np.empty(2)
    phi = rng.uniform(0, 2 * np.pi, size=2)
    for ax in range(2):
        share = rng.uniform(0.0, 1.0)
        b[ax] = budget * share * rng.choice([-1.0, 1.0])
        c[ax] = budget * (1 - share) / omega * rng.choice([-1.0, 1.0])
    # place the layer so its centre sits at centre_mid at t_mid
    a = np.asarray(centre_mid) - b * t_mid - c * np.sin(omega * t_mid + phi)
    return {
        "a": [float(v) for v in a], "b": [float(v) for v in b], "c": [float(v) for v in c],
        "omega": omega, "phi": [float(v) for v in phi],
    }


def _sample_scene_params(rng, T, H, W, n_sprites, axis_speed):
    t_mid = (T - 1) / 2.0
    params = []
    for k in range(n_sprites):
        sp = {
            "shape": int(rng.integers(0, 2)),
            "radii": [float(rng.uniform(W / 10, W / 4)), float(rng.uniform(H / 10, H / 4))],
            "depth": k,
            "tex_size": SPRITE_TEXTURE,
        }
        centre = [rng.uniform(0.2 * W, 0.8 * W), rng.uniform(0.2 * H, 0.8 * H)]
        sp.update(_motion(rng, centre, t_mid, axis_speed))
        params.append(sp)
    if n_sprites >= 2 and T >= 16:
        # sprite 0 passes over sprite 1's centre at t_mid -> guaranteed overlap
        p1 = layer_positions(params[1:2], [t_mid])[0, 0]
        s0 = params[0]
        for ax in range(2):
            s0["a"][ax] = float(p1[ax] - s0["b"][ax] * t_mid
                                - s0["c"][ax] * math.sin(s0["omega"] * t_mid + s0["phi"][ax]))
    bg = {"shape": PLANE, "depth": n_sprites, "tex_size": int(max(H, W))}
    bg.update(_motion(rng, [W / 2.0, H / 2.0], t_mid, axis_speed, slow=0.5))
    params.append(bg)
    return params


def _sample_tracks(rng, params, n_tracks, T, H, W, force_occluder):
    n_sprites = len(params) - 1
    pos = layer_positions(params, np.arange(T))
    layers = np.empty(n_tracks, dtype=np.int64)
    tracks = np.empty((n_tracks, T, 2), dtype=np.float64)
    for i in range(n_tracks):
        for _ in range(100):
            if i == 0 and force_occluder:
                layer = 1
                off = rng.uniform(-0.3, 0.3, size=2) * np.asarray(params[1]["radii"])
            elif rng.random() < SPRITE_BIAS:
                layer = int(rng.integers(0, n_sprites))
                rx, ry = params[layer]["radii"]
                r = math.sqrt(rng.random()) * 0.9
                ang = rng.uniform(0, 2 * np.pi)
                if params[layer]["shape"] == RECT:
                    off = rng.uniform(-0.9, 0.9, size=2) * np.array([rx, ry])
                else:
                    off = np.array([r * rx * math.cos(ang), r * ry * math.sin(ang)])
            else:
                layer = n_sprites
                t0 = int(rng.integers(0, T))
                off = np.array([rng.uniform(0, W - 1), rng.uniform(0, H - 1)]) - pos[layer, t0]
            traj = pos[layer] + off
            vis = compute_visibility(params, [layer], traj[None], H, W)[0]
            if vis.any():
                break
        layers[i] = layer
        tracks[i] = traj
    return layers, tracks


def generate_scene(seed: int, T: int = 24, H: int = 64, W: int = 64, n_sprites: int = 3,
                   n_tracks: int = 64, max_speed: float | None = None,
                   use_numba=None) -> SyntheticScene:
    """Generate a toy scene; a pure function of its arguments."""
    if T < 2 or H < 32 or W < 32 or n_sprites < 1 or n_tracks < 1:
        raise ValueError(f"invalid scene dimensions: T={T} H={H} W={W} "
                         f"n_sprites={n_sprites} n_tracks={n_tracks}")
    if max_speed is None:
        max_speed = 5.0 * min(H, W) / 64.0
    axis_speed = max_speed / math.sqrt(2.0)
    rng = np.random.default_rng(seed)
    # a static scene has no occlusion events to require
    force = n_sprites >= 2 and T >= 16 and max_speed > 0
    for _ in range(1000):
        params = _sample_scene_params(rng, T, H, W, n_sprites, axis_speed)
        layers, tracks = _sample_tracks(rng, params, n_tracks, T, H, W, force)
        vis = compute_visibility(params, layers, tracks, H, W)
        if not vis.any(axis=1).all():
            continue
        if force and not _has_occlusion_event(params, layers, tracks, vis, H, W):
            continue
        break
    else:  # pragma: no cover
        raise RuntimeError(f"seed {seed}: could not sample a valid scene")

    L = len(params)
    smax = max(sp["tex_size"] for sp in params)
    textures = np.zeros((L, smax, smax, 3), dtype=np.float64)
    for k, sp in enumerate(params):
        s = sp["tex_size"]
        base = rng.uniform(0.25, 0.75, size=3)
        textures[k, :s, :s] = _texture(rng, s, base)
    textures = textures.astype(np.float32)
    video = render_video(params, textures, T, H, W, use_numba=use_numba)
    gt_tracks = tracks.astype(np.float32)
    # visibility on the stored float32 coordinates keeps the invariant exact for readers
    gt_vis = compute_visibility(params, layers, gt_tracks.astype(np.float64), H, W)
    return SyntheticScene(video=video, gt_tracks=gt_tracks, gt_visibility=gt_vis, seed=int(seed),
                          sprite_params=params, track_layers=layers, textures=textures)


def _has_occlusion_event(params, layers, tracks, vis, H, W):
    inside = in_frame(tracks, H, W)
    occluded = inside & ~vis
    return bool((occluded.any(axis=1) & vis.any(axis=1)).any())


# --------------------------------------------------------------------------
# I/O


def write_scene(scene: SyntheticScene, path) -> None:
    T, _, H, W = scene.video.shape
    meta = {
        "kind": SCENE_KIND,
        "T": int(T), "H": int(H), "W": int(W),
        "seed": int(scene.seed),
        "sprite_params": scene.sprite_params,
    }
    tensors = {
        "video": scene.video.astype("<f4"),
        "gt_tracks": scene.gt_tracks.astype("<f4"),
        "gt_visibility": scene.gt_visibility.astype("<f4"),
        "track_layers": np.asarray(scene.track_layers, dtype="<f4"),
        "textures": np.asarray(scene.textures, dtype="<f4"),
    }
    write_container(path, meta, tensors)


def read_scene(path) -> SyntheticScene:
    meta, t = read_container(path)
    if meta.get("kind") != SCENE_KIND:
        raise CorruptedFileError(f"{path}: not a scene file (kind={meta.get('kind')!r})")
    try:
        return SyntheticScene(
            video=t["video"],
            gt_tracks=t["gt_tracks"],
            gt_visibility=t["gt_visibility"] > 0.5,
            seed=int(meta["seed"]),
            sprite_params=meta["sprite_params"],
            track_layers=t["track_layers"].astype(np.int64),
            textures=t["textures"],
        )
    except KeyError as exc:
        raise CorruptedFileError(f"{path}: missing field {exc}") from None


def scene_from_video(video) -> SyntheticScene:
    """Wrap a bare video (no ground truth) so it can travel in the scene format."""
    video = np.asarray(video, dtype=np.float32)
    T = video.shape[0]
    return SyntheticScene(video=video, gt_tracks=np.zeros((0, T, 2), np.float32),
                          gt_visibility=np.zeros((0, T), bool), seed=-1, sprite_params=[],
                          track_layers=np.zeros(0, np.int64),
                          textures=np.zeros((0, 1, 1, 3), np.float32))


def list_scenes(data_dir) -> list[Path]:
    return sorted(Path(data_dir).glob("*.scene"))


def make_dataset(out_dir, seed: int, count: int, T: int, size: int, n_sprites: int,
                 n_tracks: int, workers: int = 1) -> list[Path]:
    """Write ``count`` scenes with seeds ``seed, seed+1, ...`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(seed + k, out_dir / f"scene_{seed + k:07d}.scene") for k in range(count)]

    def one(job):
        s, path = job
        write_scene(generate_scene(s, T=T, H=size, W=size, n_sprites=n_sprites,
                                   n_tracks=n_tracks), path)
        return path

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]
