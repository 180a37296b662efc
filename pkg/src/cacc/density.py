"""Ground-truth density maps, the pixel-wise counting loss and count metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class DensityConfig:
    sigma: float = 4.0
    truncate: float = 3.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.truncate < 2.0:
            raise ValueError("truncation radius must be at least 2 sigma")

    @property
    def radius(self):
        return int(math.ceil(self.truncate * self.sigma))


def _check_points(points, h, w):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts):
        bad = ~((pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"point {i} at {tuple(pts[i])} lies outside the {w}x{h} image")
    return pts


def make_density_map(points, h, w, config: DensityConfig = DensityConfig()):
    """Sum of truncated Gaussians, one per point, each with unit mass in the image.

    Each kernel is evaluated at pixel coordinates within ``config.radius`` of
    the point's pixel, clipped to the image and renormalized, so the map sums
    to exactly ``len(points)`` up to rounding.
    """
    pts = _check_points(points, h, w)
    out = np.zeros((h, w), dtype=np.float64)
    r = config.radius
    inv = 1.0 / (2.0 * config.sigma ** 2)
    for x, y in pts:
        cx, cy = int(x), int(y)
        x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
        gx = np.exp(-((np.arange(x0, x1) - x) ** 2) * inv)
        gy = np.exp(-((np.arange(y0, y1) - y) ** 2) * inv)
        gx /= gx.sum()
        gy /= gy.sum()
        out[y0:y1, x0:x1] += np.outer(gy, gx)
    return out


def count(density) -> float:
    return float(np.asarray(density, dtype=np.float64).sum())


def euclidean_loss(est, gt):
    """``sum((est - gt)**2) / (2M)`` and its gradient ``(est - gt) / M``."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {gt.shape}")
    diff = est - gt
    m = diff.size
    return float((diff ** 2).sum() / (2 * m)), diff / m


def density_loss(est: T.Tensor, gt) -> T.Tensor:
    """Differentiable counting loss; averages the per-image loss over a batch."""
    gt = np.asarray(gt, dtype=est.dtype)
    if gt.shape != est.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {gt.shape}")
    diff = est - T.Tensor(gt)
    return T.square(diff).sum() / (2.0 * diff.data.size)


def _pair(est_counts, gt_counts):
    est = np.asarray(est_counts, dtype=np.float64).ravel()
    gt = np.asarray(gt_counts, dtype=np.float64).ravel()
    if est.size == 0 or est.size != gt.size:
        raise ValueError("count lists must be nonempty and of equal length")
    return est, gt


def mae(est_counts, gt_counts) -> float:
    est, gt = _pair(est_counts, gt_counts)
    return float(np.abs(est - gt).mean())


def rmse(est_counts, gt_counts) -> float:
    est, gt = _pair(est_counts, gt_counts)
    return float(np.sqrt(((est - gt) ** 2).mean()))
