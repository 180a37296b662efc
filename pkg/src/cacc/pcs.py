"""Point-derived crowd segmentation.

Bags are rectangles tiled over a scene. A bag is a crowd bag iff an annotated
head point lies inside it; background bags that sit under a head (the region
directly above holds a point and so does the doubled region around the bag)
are discarded because they likely contain bodies. A small fully-convolutional
weak learner is trained to classify bags from the spatial average of its two
response channels, and its channel-0 response on a whole image serves as the
crowd segmentation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

CROWD, BACKGROUND = 0, 1


@dataclass(frozen=True)
class AnchorConfig:
    scales: tuple = ((8, 8), (16, 16))
    stride: int = 4

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("anchor stride must be >= 1")
        if not self.scales:
            raise ValueError("need at least one anchor scale")
        for w, h in self.scales:
            if w < 1 or h < 1:
                raise ValueError("anchor sizes must be positive")


def sample_bags(h, w, anchors: AnchorConfig) -> np.ndarray:
    """All anchor placements that fit inside an ``h`` x ``w`` image, as (x, y, w, h) rows."""
    rects = []
    for bw, bh in anchors.scales:
        if bw > w or bh > h:
            continue
        ys = np.arange(0, h - bh + 1, anchors.stride)
        xs = np.arange(0, w - bw + 1, anchors.stride)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        rects.append(np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, bw), np.full(xx.size, bh)]))
    if not rects:
        return np.zeros((0, 4), dtype=np.int64)
    return np.concatenate(rects).astype(np.int64)


def _contains_any(rects, points):
    """For each (x, y, w, h) row: does any point fall in [x, x+w) x [y, y+h)?"""
    rects = np.asarray(rects, dtype=np.float64).reshape(-1, 4)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0 or len(rects) == 0:
        return np.zeros(len(rects), dtype=bool)
    px, py = pts[:, 0][None, :], pts[:, 1][None, :]
    x, y, w, h = (rects[:, i][:, None] for i in range(4))
    inside = (px >= x) & (px < x + w) & (py >= y) & (py < y + h)
    return inside.any(axis=1)


def partition_bags(rects, points):
    """Split rects into (crowd, background) by point containment."""
    rects = np.asarray(rects).reshape(-1, 4)
    crowd = _contains_any(rects, points)
    return rects[crowd], rects[~crowd]


def upper_rects(rects):
    r = np.asarray(rects, dtype=np.float64).reshape(-1, 4).copy()
    r[:, 1] -= r[:, 3]
    return r


def larger_rects(rects, h, w):
    """Rects of doubled size sharing each bag's centre, clipped to the image."""
    r = np.asarray(rects, dtype=np.float64).reshape(-1, 4)
    x0 = np.clip(r[:, 0] - r[:, 2] / 2, 0, w)
    y0 = np.clip(r[:, 1] - r[:, 3] / 2, 0, h)
    x1 = np.clip(r[:, 0] + 1.5 * r[:, 2], 0, w)
    y1 = np.clip(r[:, 1] + 1.5 * r[:, 3], 0, h)
    return np.column_stack([x0, y0, x1 - x0, y1 - y0])


def refine_background(background, points, image_bounds):
    """Drop background bags whose upper neighbour and doubled region both hold a point.

    A bag whose upper neighbour would leave the image is always kept.
    """
    h, w = image_bounds
    bg = np.asarray(background).reshape(-1, 4)
    if len(bg) == 0 or len(np.asarray(points).reshape(-1, 2)) == 0:
        return bg.copy()
    up = upper_rects(bg)
    up_ok = up[:, 1] >= 0
    up_hit = up_ok & _contains_any(up, points)
    big_hit = _contains_any(larger_rects(bg, h, w), points)
    return bg[~(up_hit & big_hit)]


# -- weak learner -------------------------------------------------------------------

class WeakLearner(nn.Module):
    """Stride-1, size-preserving conv stack with a 2-channel (crowd, background) head."""

    def __init__(self, in_channels=1, width=16, seed=0):
        rng = np.random.default_rng(seed)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, rng=rng),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, rng=rng),
            nn.ReLU(),
            nn.Conv2d(width, 2, 3, rng=rng),
        )
        self.in_channels = in_channels
        self.width = width
        self.trained = False

    def forward(self, x):
        return self.net(x)


def bag_scores(m: Tensor) -> Tensor:
    """Spatially averaged responses, shape (N, 2)."""
    return T.global_avg_pool(m)


def bag_loss(m: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax over the averaged (crowd, background) responses."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if m.ndim != 4 or m.shape[1] != 2 or m.shape[0] != len(labels):
        raise ValueError(f"expected responses of shape (N, 2, h, w) for {len(labels)} labels, got {m.shape}")
    logp = T.log_softmax2(bag_scores(m))
    onehot = np.zeros((len(labels), 2), dtype=m.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(logp * onehot).sum() / float(len(labels))


@dataclass(frozen=True)
class PCSTrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 2e-3
    width: int = 16


@dataclass
class BagSet:
    """Flat table of labelled bags drawn from a list of scenes."""

    scene_index: np.ndarray
    rects: np.ndarray
    labels: np.ndarray
    stats: dict = field(default_factory=dict)


def collect_bags(scenes, anchors: AnchorConfig, refine=True) -> BagSet:
    idx, rects, labels = [], [], []
    removed = 0
    for i, sc in enumerate(scenes):
        all_rects = sample_bags(sc.height, sc.width, anchors)
        crowd, bg = partition_bags(all_rects, sc.points)
        if refine:
            kept = refine_background(bg, sc.points, (sc.height, sc.width))
            removed += len(bg) - len(kept)
            bg = kept
        for group, lab in ((crowd, CROWD), (bg, BACKGROUND)):
            idx.append(np.full(len(group), i))
            rects.append(group)
            labels.append(np.full(len(group), lab))
    bags = BagSet(np.concatenate(idx), np.concatenate(rects).astype(np.int64), np.concatenate(labels))
    bags.stats = {
        "crowd": int((bags.labels == CROWD).sum()),
        "background": int((bags.labels == BACKGROUND).sum()),
        "removed_by_refinement": removed,
    }
    return bags


def _stack(scenes):
    return np.stack([sc.chw() for sc in scenes])


def _crop_batch(images, bags: BagSet, which):
    out = []
    for j in which:
        x, y, w, h = bags.rects[j]
        out.append(images[bags.scene_index[j], :, y:y + h, x:x + w])
    return np.stack(out)


def train_weak_learner(source, anchors: AnchorConfig, config: PCSTrainConfig = PCSTrainConfig(), seed=0,
                       callback=None) -> WeakLearner:
    """Fit the weak learner on bags from the source training scenes.

    Each step picks one anchor scale and draws half the batch from crowd bags
    and half from background bags of that scale.
    """
    scenes = source.train if hasattr(source, "train") else list(source)
    bags = collect_bags(scenes, anchors)
    if bags.stats["crowd"] == 0 or bags.stats["background"] == 0:
        raise ValueError(f"degenerate bag set: {bags.stats}")
    rng = np.random.default_rng(seed)
    model = WeakLearner(scenes[0].image.shape[2], config.width, seed=int(rng.integers(2**31)))
    opt = Adam(model.parameters(), lr=config.lr)

    sizes = [tuple(r) for r in bags.rects[:, 2:]]
    pools = {}
    for s in sorted(set(sizes)):
        same = np.array([sz == s for sz in sizes])
        pools[s] = (np.flatnonzero(same & (bags.labels == CROWD)), np.flatnonzero(same & (bags.labels == BACKGROUND)))
    usable = [s for s, (c, b) in pools.items() if len(c) and len(b)]
    if not usable:
        raise ValueError("no anchor scale has both crowd and background bags")

    images = _stack(scenes)
    half = max(config.batch_size // 2, 1)
    labels = np.array([CROWD] * half + [BACKGROUND] * half)
    for it in range(config.iterations):
        crowd_pool, bg_pool = pools[usable[int(rng.integers(len(usable)))]]
        which = np.concatenate([rng.choice(crowd_pool, half), rng.choice(bg_pool, half)])
        x = Tensor(_crop_batch(images, bags, which))
        opt.zero_grad()
        loss = bag_loss(model(x), labels)
        loss.backward()
        opt.step()
        if callback is not None:
            callback(it, loss.item())
    model.trained = True
    return model


def bag_accuracy(model: WeakLearner, scenes, anchors: AnchorConfig, batch=256):
    """Accuracy of argmax over averaged responses on every refined bag of ``scenes``.

    Returns ``(accuracy, balanced_accuracy)``.
    """
    bags = collect_bags(scenes, anchors)
    images = _stack(scenes)
    pred = np.empty(len(bags.labels), dtype=np.int64)
    sizes = [tuple(r) for r in bags.rects[:, 2:]]
    with T.no_grad():
        for s in sorted(set(sizes)):
            which = np.flatnonzero(np.array([sz == s for sz in sizes]))
            for k in range(0, len(which), batch):
                part = which[k:k + batch]
                scores = bag_scores(model(Tensor(_crop_batch(images, bags, part)))).data
                pred[part] = np.where(scores[:, 0] > scores[:, 1], CROWD, BACKGROUND)
    correct = pred == bags.labels
    per_class = [correct[bags.labels == c].mean() for c in (CROWD, BACKGROUND)]
    return float(correct.mean()), float(np.mean(per_class))


def infer_segmentation(model: WeakLearner, image) -> np.ndarray:
    """Apply the weak learner to a whole image; returns (2, H, W) responses.

    ``image`` is (C, H, W), (H, W) or a :class:`CrowdScene`.
    """
    if not getattr(model, "trained", False):
        raise RuntimeError("weak learner is untrained; train it or load a checkpoint first")
    arr = image.chw() if hasattr(image, "chw") else np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    with T.no_grad():
        out = model(Tensor(arr[None].astype(np.float32)))
    return out.data[0]


def coverage(hard_seg, points) -> float:
    """Percentage of points whose pixel (floor of the coordinates) is marked crowd."""
    seg = np.asarray(hard_seg).astype(bool)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return 100.0
    h, w = seg.shape
    if not ((pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)).all():
        raise ValueError("points must lie inside the segmentation map")
    cols = np.floor(pts[:, 0]).astype(int)
    rows = np.floor(pts[:, 1]).astype(int)
    return 100.0 * float(seg[rows, cols].mean())


def body_contamination(rects, body_mask) -> float:
    """Fraction of rects overlapping at least one ground-truth body pixel."""
    rects = np.asarray(rects).reshape(-1, 4)
    if len(rects) == 0:
        return 0.0
    integral = np.pad(body_mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    x, y, w, h = rects.T
    total = integral[y + h, x + w] - integral[y, x + w] - integral[y + h, x] + integral[y, x]
    return float((total > 0).mean())
