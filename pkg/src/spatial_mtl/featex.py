"""Spatial feature extraction: edges, depth back-projection, masks, pooling.

All functions are pure; arrays in, arrays out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics

# tan(22.5 deg): boundary between axis-aligned and diagonal gradient sectors
_TAN_22_5 = math.sqrt(2.0) - 1.0
# gradient magnitudes are snapped to this grid so ulp-level noise cannot flip NMS ties
_MAG_QUANTUM = 1e9

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class EdgeParams:
    gaussian_sigma: float = 1.0
    low_threshold: float = 0.1
    high_threshold: float = 0.3

    def __post_init__(self):
        if not self.gaussian_sigma > 0:
            raise ValueError(f"gaussian_sigma must be positive, got {self.gaussian_sigma}")
        if not 0 < self.low_threshold < self.high_threshold < 1:
            raise ValueError("thresholds must satisfy 0 < low < high < 1, got "
                             f"{self.low_threshold}, {self.high_threshold}")


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    r, g, b = LUMA
    return r * image[..., 0] + g * image[..., 1] + b * image[..., 2]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    k = np.exp(-(np.arange(-radius, radius + 1, dtype=np.float64) ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def _smooth(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    h, w = img.shape
    p = np.pad(img, ((0, 0), (r, r)), mode="edge")
    acc = np.zeros_like(img)
    for i, wk in enumerate(kernel):
        acc = acc + wk * p[:, i:i + w]
    p = np.pad(acc, ((r, r), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for i, wk in enumerate(kernel):
        out = out + wk * p[i:i + h, :]
    return out


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = img.shape
    p = np.pad(img, 1, mode="edge")

    def at(dr, dc):
        return p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    gx = (at(-1, 1) - at(-1, -1)) + 2.0 * (at(0, 1) - at(0, -1)) + (at(1, 1) - at(1, -1))
    gy = (at(1, -1) - at(-1, -1)) + 2.0 * (at(1, 0) - at(-1, 0)) + (at(1, 1) - at(-1, 1))
    return gx, gy


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    h, w = mag.shape
    ax, ay = np.abs(gx), np.abs(gy)
    horiz = ay <= _TAN_22_5 * ax
    vert = ~horiz & (ax <= _TAN_22_5 * ay)
    diag = ~horiz & ~vert
    main_diag = diag & (gx * gy > 0)
    anti_diag = diag & ~main_diag

    p = np.pad(mag, 1)

    def at(dr, dc):
        return p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    n1 = np.select([horiz, vert, main_diag, anti_diag], [at(0, -1), at(-1, 0), at(-1, -1), at(-1, 1)])
    n2 = np.select([horiz, vert, main_diag, anti_diag], [at(0, 1), at(1, 0), at(1, 1), at(1, -1)])
    keep = (mag > 0) & (mag >= n1) & (mag >= n2)
    keep[0, :] = keep[-1, :] = keep[:, 0] = keep[:, -1] = False
    return np.where(keep, mag, 0.0)


def canny_edges(gray: np.ndarray, params: EdgeParams = EdgeParams()) -> np.ndarray:
    """Binary edge map: Gaussian blur, Sobel, 4-sector NMS, 8-connected hysteresis.

    Thresholds are fractions of the strongest surviving gradient, so the
    result does not depend on the image's absolute intensity scale.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or min(gray.shape) < 5:
        raise ValueError(f"canny_edges needs a 2-D image of at least 5x5, got {gray.shape}")
    smooth = _smooth(gray, gaussian_kernel(params.gaussian_sigma))
    gx, gy = _sobel(smooth)
    mag = np.rint(np.sqrt(gx * gx + gy * gy) * _MAG_QUANTUM)
    nms = _non_max_suppression(mag, gx, gy)
    top = nms.max()
    if top <= 0:
        return np.zeros(gray.shape, dtype=np.uint8)
    strong = nms >= params.high_threshold * top
    weak = nms >= params.low_threshold * top
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.uint8)


def backproject(depth: np.ndarray, intrinsics: CameraIntrinsics, inverse_depth: bool = False) -> np.ndarray:
    """Per-pixel camera-frame points (h, w, 3) from planar depth.

    x = (u - cx) z / fx and y = (v - cy) z / fy with u the column and v the row.
    With ``inverse_depth`` the input holds 1/z (zeros stay at the origin).
    """
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"depth must be 2-D, got {depth.shape}")
    if inverse_depth:
        with np.errstate(divide="ignore"):
            depth = np.where(depth > 0, 1.0 / np.where(depth > 0, depth, 1), 0).astype(depth.dtype)
    if (depth < 0).any():
        raise ValueError("depth must be non-negative")
    h, w = depth.shape
    z = depth.astype(np.float64)
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    out = np.empty((h, w, 3), dtype=depth.dtype if depth.dtype.kind == "f" else np.float64)
    out[..., 0] = (u - intrinsics.cx) * z / intrinsics.fx
    out[..., 1] = (v - intrinsics.cy) * z / intrinsics.fy
    out[..., 2] = depth
    return out


def project(coords: np.ndarray, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`backproject`: returns (u, v, z) arrays."""
    coords = np.asarray(coords, dtype=np.float64)
    x, y, z = coords[..., 0], coords[..., 1], coords[..., 2]
    if (z == 0).any():
        raise ValueError("cannot project points with z == 0")
    return intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy, z


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth)
    lo, hi = depth.min(), depth.max()
    if hi == lo:
        return np.zeros_like(depth)
    return (depth - lo) / (hi - lo)


def resize_nearest(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    mh, mw = mask.shape
    if (mh, mw) == (h, w):
        return mask
    rows = (np.arange(h) * mh) // h
    cols = (np.arange(w) * mw) // w
    return mask[rows[:, None], cols[None, :]]


def apply_masks(feature_map: np.ndarray, masks: Sequence[np.ndarray], mode: str = "union"):
    """Zero ``feature_map`` (h, w[, c]) outside the masks.

    ``union`` returns one array; ``per_object`` returns one array per mask.
    """
    if len(masks) == 0:
        raise ValueError("apply_masks needs at least one mask")
    feature_map = np.asarray(feature_map)
    h, w = feature_map.shape[:2]
    resized = [resize_nearest(np.asarray(m) != 0, h, w) for m in masks]

    def masked(m):
        m = m.reshape(m.shape + (1,) * (feature_map.ndim - 2))
        return feature_map * m.astype(feature_map.dtype)

    if mode == "union":
        return masked(np.logical_or.reduce(resized))
    if mode == "per_object":
        return [masked(m) for m in resized]
    raise ValueError(f"unknown mask mode {mode!r}")


def downsample_map(feature_map: np.ndarray, target_h: int, target_w: int, kind: str = "mean") -> np.ndarray:
    """Block-pool the two leading (spatial) axes; ``max`` keeps binary maps binary."""
    feature_map = np.asarray(feature_map)
    h, w = feature_map.shape[:2]
    if target_h <= 0 or target_w <= 0 or h % target_h or w % target_w:
        raise ValueError(f"cannot pool {h}x{w} to {target_h}x{target_w}: non-divisible")
    fh, fw = h // target_h, w // target_w
    blocks = feature_map.reshape(target_h, fh, target_w, fw, *feature_map.shape[2:])
    if kind == "mean":
        return blocks.mean(axis=(1, 3)).astype(feature_map.dtype if feature_map.dtype.kind == "f" else np.float64)
    if kind == "max":
        return blocks.max(axis=(1, 3))
    raise ValueError(f"unknown pooling kind {kind!r}")
