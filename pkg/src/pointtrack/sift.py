"""Scale-space difference-of-Gaussians keypoint detector (locations only, no descriptors)."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from ._accel import njit, pick


def to_gray(frame) -> np.ndarray:
    """(3, H, W) or (H, W, 3) RGB in [0, 1] -> (H, W) float64 luma."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        return f
    if f.shape[0] == 3:
        f = f.transpose(1, 2, 0)
    return f @ np.array([0.299, 0.587, 0.114])


def gaussian_octaves(img: np.ndarray, n_octaves: int, scales: int = 3, sigma0: float = 1.6,
                     assumed_blur: float = 0.5):
    """Per octave, ``scales + 3`` progressively blurred images."""
    k = 2.0 ** (1.0 / scales)
    base_sigma = math.sqrt(max(sigma0 ** 2 - assumed_blur ** 2, 1e-6))
    base = ndimage.gaussian_filter(img, base_sigma, mode="nearest")
    octaves = []
    for _ in range(n_octaves):
        levels = [base]
        for i in range(1, scales + 3):
            prev_sigma = sigma0 * k ** (i - 1)
            inc = prev_sigma * math.sqrt(k * k - 1.0)
            levels.append(ndimage.gaussian_filter(levels[-1], inc, mode="nearest"))
        octaves.append(np.stack(levels))
        base = levels[scales][::2, ::2]
    return octaves


def upsample2(img: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling; output pixel ``i`` samples input coordinate ``i / 2``."""
    h, w = img.shape
    yy, xx = np.meshgrid(np.arange(2 * h) / 2.0, np.arange(2 * w) / 2.0, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


@njit
def _extrema_numba(dog, thr):
    L, h, w = dog.shape
    out = np.zeros((L, h, w), dtype=np.bool_)
    for l in range(1, L - 1):
        for y in range(1, h - 1):
            for x in range(1, w - 1):
                v = dog[l, y, x]
                if abs(v) <= thr:
                    continue
                is_max = True
                is_min = True
                for dl in range(-1, 2):
                    for dy in range(-1, 2):
                        for dx in range(-1, 2):
                            if dl == 0 and dy == 0 and dx == 0:
                                continue
                            u = dog[l + dl, y + dy, x + dx]
                            if u > v:
                                is_max = False
                            if u < v:
                                is_min = False
                    if not is_max and not is_min:
                        break
                out[l, y, x] = is_max or is_min
    return out


def _extrema_numpy(dog, thr):
    fp = np.ones((3, 3, 3), bool)
    mx = ndimage.maximum_filter(dog, footprint=fp, mode="nearest")
    mn = ndimage.minimum_filter(dog, footprint=fp, mode="nearest")
    out = ((dog >= mx) | (dog <= mn)) & (np.abs(dog) > thr)
    out[0] = out[-1] = False
    out[:, 0] = out[:, -1] = False
    out[:, :, 0] = out[:, :, -1] = False
    return out


def scale_space_extrema(dog: np.ndarray, thr: float, use_numba=None) -> np.ndarray:
    """Boolean mask of interior 3x3x3 extrema of ``dog`` (L, h, w) with ``|v| > thr``."""
    fn = pick(_extrema_numba, _extrema_numpy, use_numba)
    return fn(np.ascontiguousarray(dog, dtype=np.float64), float(thr))


def _edge_ok(d, l, y, x, edge_ratio):
    dxx = d[l, y, x + 1] + d[l, y, x - 1] - 2 * d[l, y, x]
    dyy = d[l, y + 1, x] + d[l, y - 1, x] - 2 * d[l, y, x]
    dxy = 0.25 * (d[l, y + 1, x + 1] - d[l, y + 1, x - 1] - d[l, y - 1, x + 1] + d[l, y - 1, x - 1])
    tr, det = dxx + dyy, dxx * dyy - dxy * dxy
    return (det > 0) & (tr * tr * edge_ratio < (edge_ratio + 1) ** 2 * det)


def detect_keypoints(frame, contrast_threshold: float = 0.02, edge_ratio: float = 10.0,
                     scales: int = 3, sigma0: float = 1.6, upsample: bool = True,
                     min_size: int = 8, use_numba=None) -> np.ndarray:
    """Difference-of-Gaussians keypoints of one frame.

    Returns ``(K, 3)`` rows ``(x, y, |response|)`` in input pixel coordinates,
    sorted by decreasing response.
    """
    img = to_gray(frame)
    scale = 1.0
    if upsample:
        img = upsample2(img)
        scale = 0.5
    n_oct = max(1, int(math.floor(math.log2(min(img.shape) / min_size))) + 1)
    thr = contrast_threshold / scales
    rows = []
    for o, gauss in enumerate(gaussian_octaves(img, n_oct, scales, sigma0,
                                               1.0 if upsample else 0.5)):
        dog = gauss[1:] - gauss[:-1]
        if min(dog.shape[1:]) < 3:
            break
        mask = scale_space_extrema(dog, thr, use_numba)
        l, y, x = np.nonzero(mask)
        if len(l) == 0:
            continue
        ok = _edge_ok(dog, l, y, x, edge_ratio)
        l, y, x = l[ok], y[ok], x[ok]
        f = scale * 2 ** o
        rows.append(np.stack([x * f, y * f, np.abs(dog[l, y, x])], axis=1))
    if not rows:
        return np.zeros((0, 3))
    kp = np.concatenate(rows)
    # the same location can fire in several octaves; keep the strongest
    kp = kp[np.argsort(-kp[:, 2], kind="stable")]
    _, first = np.unique(np.round(kp[:, :2], 3), axis=0, return_index=True)
    kp = kp[np.sort(first)]
    return kp
