"""Synthetic two-domain crowd scenes, scene I/O and crop/flip augmentation.

Coordinates follow image conventions: ``x`` is the column, ``y`` the row,
origin at the top-left, and pixel ``(row i, col j)`` is centred on the
coordinate ``(j, i)``. Valid points satisfy ``0 <= x < W`` and ``0 <= y < H``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes
from .pgm import read_pgm, write_pgm

DOMAINS = ("source", "target")


@dataclass
class CrowdScene:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    points: np.ndarray  # (K, 2) float64 (x, y)
    domain: str = "source"
    body_mask: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        validate_scene(self)

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]

    @property
    def count(self):
        return len(self.points)

    def chw(self):
        """Image as a (C, H, W) array, the layout the networks consume."""
        return np.ascontiguousarray(self.image.transpose(2, 0, 1))


def validate_scene(scene: CrowdScene):
    h, w = scene.image.shape[:2]
    if h % 8 or w % 8:
        raise ValueError(f"image size {w}x{h} must be divisible by 8")
    if scene.domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {scene.domain!r}")
    if scene.image.size and (scene.image.min() < 0 or scene.image.max() > 1):
        raise ValueError("image intensities must lie in [0, 1]")
    pts = scene.points
    if len(pts):
        bad = ~((pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"point {i} at {tuple(pts[i])} is outside the {w}x{h} image")
    if scene.body_mask is not None and scene.body_mask.shape != (h, w):
        raise ValueError("body_mask must match the image size")


@dataclass
class Dataset:
    train: list
    test: list
    domain: str

    def __post_init__(self):
        if not self.train and not self.test:
            raise ValueError("dataset is empty")
        names = [s.name for s in self.train]
        if set(names) & {s.name for s in self.test}:
            raise ValueError("train and test splits overlap")


# -- synthetic generation -----------------------------------------------------

@dataclass(frozen=True)
class BackgroundStyle:
    base: float = 0.2
    gradient: float = 0.05
    noise: float = 0.03
    stripe_amp: float = 0.0
    stripe_period: float = 8.0
    blob_count: int = 0
    blob_amp: float = 0.0
    blob_radius: tuple = (3.0, 6.0)


@dataclass(frozen=True)
class SynthConfig:
    domain: str = "source"
    size: tuple = (64, 64)  # (H, W)
    channels: int = 1
    background: BackgroundStyle = field(default_factory=BackgroundStyle)
    count_range: tuple = (10, 30)
    head_radius: tuple = (1.6, 2.4)
    head_intensity: float = 0.9
    body_size: tuple = (4, 7)  # (width, height) in pixels
    body_intensity: float = 0.6
    n_train: int = 160
    n_test: int = 40
    seed: int = 0

    def __post_init__(self):
        h, w = self.size
        if h % 8 or w % 8:
            raise ValueError(f"image size {w}x{h} must be divisible by 8")
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError("count range must satisfy 0 <= min <= max")
        if self.head_radius[0] < 1 or self.head_radius[1] < self.head_radius[0]:
            raise ValueError("head radius range must start at >= 1 pixel")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        if self.n_train + self.n_test < 1:
            raise ValueError("need at least one scene")


def source_config(**overrides) -> SynthConfig:
    """Dark, smooth backgrounds."""
    cfg = SynthConfig(
        domain="source",
        background=BackgroundStyle(base=0.15, gradient=0.05, noise=0.02),
        count_range=(10, 30),
        seed=1,
    )
    return replace(cfg, **overrides)


def target_config(**overrides) -> SynthConfig:
    """Brighter, striped and blotchy backgrounds."""
    cfg = SynthConfig(
        domain="target",
        background=BackgroundStyle(
            base=0.4, gradient=0.1, noise=0.05, stripe_amp=0.1, stripe_period=6.0,
            blob_count=4, blob_amp=0.12, blob_radius=(4.0, 8.0),
        ),
        count_range=(10, 30),
        seed=2,
    )
    return replace(cfg, **overrides)


def _render_background(rng, h, w, style: BackgroundStyle):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * (xx / w - 0.5) + np.sin(angle) * (yy / h - 0.5))
    img = style.base + style.gradient * ramp
    if style.stripe_amp:
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        img = img + style.stripe_amp * np.sign(np.sin(2 * np.pi * proj / style.stripe_period + phase))
    for _ in range(style.blob_count):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(*style.blob_radius)
        amp = style.blob_amp * rng.choice([-1.0, 1.0])
        img = img + amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    img = img + style.noise * rng.standard_normal((h, w))
    return img


def render_scene(rng, config: SynthConfig, name=""):
    h, w = config.size
    img = _render_background(rng, h, w, config.background)
    mask = np.zeros((h, w), dtype=bool)
    k = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
    pts = np.column_stack([rng.uniform(0, w - 1, k), rng.uniform(0, h - 1, k)]) if k else np.zeros((0, 2))
    radii = rng.uniform(*config.head_radius, k)
    shade = rng.uniform(-0.05, 0.05, k)
    yy, xx = np.mgrid[0:h, 0:w]
    bw, bh = config.body_size
    for (x, y), r, s in zip(pts, radii, shade):
        top = int(np.floor(y + r))
        left = int(round(x - bw / 2))
        body = np.zeros((h, w), dtype=bool)
        body[max(top, 0):max(top + bh, 0), max(left, 0):max(left + bw, 0)] = True
        img[body] = config.body_intensity + s
        mask |= body
    for (x, y), r, s in zip(pts, radii, shade):
        head = (xx - x) ** 2 + (yy - y) ** 2 <= r * r
        head[int(y), int(x)] = True
        img[head] = config.head_intensity + s
        mask |= head
    img = np.clip(img, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0
    tint = np.linspace(1.0, 0.8, config.channels)
    image = np.stack([img * t for t in tint], axis=-1) if config.channels > 1 else img[:, :, None]
    if config.channels > 1:
        image = np.round(image * 255.0) / 255.0
    return CrowdScene(image=image.astype(np.float32), points=pts, domain=config.domain, body_mask=mask, name=name)


def synth_generate(config: SynthConfig) -> Dataset:
    """Render ``n_train + n_test`` scenes; each scene has its own child seed."""
    total = config.n_train + config.n_test
    children = np.random.SeedSequence(config.seed).spawn(total)
    scenes = [render_scene(np.random.default_rng(s), config, name=f"{i:04d}") for i, s in enumerate(children)]
    return Dataset(train=scenes[:config.n_train], test=scenes[config.n_train:], domain=config.domain)


# -- scene I/O ------------------------------------------------------------------

def _to_u8(channel):
    return np.clip(np.floor(channel * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_scene(scene: CrowdScene, dir_path, name=None):
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    name = name or scene.name or "0000"
    for c in range(scene.image.shape[2]):
        suffix = "" if c == 0 else f".c{c}"
        write_pgm(d / f"{name}{suffix}.pgm", _to_u8(scene.image[:, :, c]))
    if scene.body_mask is not None:
        write_pgm(d / f"{name}.mask.pgm", scene.body_mask.astype(np.uint8) * 255)
    ann = {"points": [[float(x), float(y)] for x, y in scene.points], "domain": scene.domain}
    if scene.image.shape[2] > 1:
        ann["channels"] = int(scene.image.shape[2])
    atomic_write_bytes(d / f"{name}.json", json.dumps(ann).encode("utf-8"))


def load_scene(dir_path, name="0000", domain=None) -> CrowdScene:
    d = Path(dir_path)
    try:
        ann = json.loads((d / f"{name}.json").read_text())
        raw = ann["points"]
        pts = np.asarray(raw, dtype=np.float64)
        if pts.size and (pts.ndim != 2 or pts.shape[1] != 2):
            raise ValueError("points must be a list of [x, y] pairs")
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed annotation {d / (name + '.json')}: {exc}") from exc
    channels = int(ann.get("channels", 1))
    planes = [read_pgm(d / f"{name}{'' if c == 0 else f'.c{c}'}.pgm") for c in range(channels)]
    image = np.stack(planes, axis=-1).astype(np.float32) / 255.0
    mask_path = d / f"{name}.mask.pgm"
    mask = read_pgm(mask_path) > 127 if mask_path.exists() else None
    return CrowdScene(image=image, points=pts.reshape(-1, 2), domain=domain or ann.get("domain", "source"),
                      body_mask=mask, name=name)


def save_dataset(ds: Dataset, dir_path):
    d = Path(dir_path)
    for s in ds.train + ds.test:
        save_scene(s, d, s.name)
    manifest = {"domain": ds.domain, "train": [s.name for s in ds.train], "test": [s.name for s in ds.test]}
    atomic_write_bytes(d / "manifest.json", json.dumps(manifest, indent=1).encode("utf-8"))


def load_dataset(dir_path) -> Dataset:
    d = Path(dir_path)
    manifest = json.loads((d / "manifest.json").read_text())
    dom = manifest["domain"]
    return Dataset(
        train=[load_scene(d, n, dom) for n in manifest["train"]],
        test=[load_scene(d, n, dom) for n in manifest["test"]],
        domain=dom,
    )


# -- augmentation -----------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    x0: int
    y0: int
    size: int
    flip: bool

    def apply(self, arr):
        """Crop (and mirror) a (..., H, W) array the same way as the scene."""
        out = arr[..., self.y0:self.y0 + self.size, self.x0:self.x0 + self.size]
        if self.flip:
            out = out[..., ::-1]
        return np.ascontiguousarray(out)

    def points(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        x = pts[:, 0] - self.x0
        y = pts[:, 1] - self.y0
        keep = (x >= 0) & (x < self.size) & (y >= 0) & (y < self.size)
        x, y = x[keep], y[keep]
        if self.flip:
            x = self.size - 1 - x
            inside = x >= 0
            x, y = x[inside], y[inside]
        return np.column_stack([x, y])


def draw_window(h, w, crop_size, rng, flip=None) -> Window:
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop {crop_size} larger than image {w}x{h}")
    if crop_size % 8:
        raise ValueError("crop size must be divisible by 8")
    x0 = int(rng.integers(0, w - crop_size + 1))
    y0 = int(rng.integers(0, h - crop_size + 1))
    do_flip = bool(rng.random() < 0.5) if flip is None else bool(flip)
    return Window(x0, y0, crop_size, do_flip)


def augment(scene: CrowdScene, crop_size, seed, flip=None) -> CrowdScene:
    """Uniform random square crop, then a horizontal mirror with probability 0.5.

    ``flip`` forces the mirror on or off. Points outside the window are
    dropped; when mirrored, ``x`` becomes ``crop_size - 1 - x`` and any point
    that would land left of column 0 (the last half pixel) is dropped too.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    win = draw_window(scene.height, scene.width, crop_size, rng, flip)
    return crop_scene(scene, win)


def crop_scene(scene: CrowdScene, win: Window) -> CrowdScene:
    image = win.apply(scene.image.transpose(2, 0, 1)).transpose(1, 2, 0)
    mask = win.apply(scene.body_mask) if scene.body_mask is not None else None
    return CrowdScene(image=image, points=win.points(scene.points), domain=scene.domain,
                      body_mask=mask, name=scene.name)
