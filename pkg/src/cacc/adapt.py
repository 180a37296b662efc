"""Crowd counter, crowd-gated feature alignment, density alignment and the training loop.

The counter is trained on labelled source scenes with the pixel-wise
counting loss. Adaptation then adds two adversarial terms, both realised as
a single optimizer pass through gradient-reversal layers:

* crowd region transfer: backbone features after each pooling stage are
  multiplied by the (downsampled) crowd segmentation and fed to a per-level
  domain classifier;
* crowd density alignment: a density discriminator separates the counter's
  target-domain output from pseudo labels rendered from points sampled out
  of the target crowd segmentation, with the number of points tracking the
  counter's own estimate through an inertial update.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .dataset import draw_window
from .density import DensityConfig, density_loss, make_density_map, mae, rmse
from .optim import Adam
from .pcs import infer_segmentation
from .sampling import AliasTable
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

ABLATIONS = ("source-only", "crt-no-pcs", "crt-pcs", "full")


# -- networks ------------------------------------------------------------------------

class CounterNet(nn.Module):
    """Three conv-conv-pool stages, then three upsample+conv stages back to full size.

    ``forward`` returns the density map (scaled by ``density_scale``) and the
    list of features after each pooling stage.
    """

    def __init__(self, in_channels=1, widths=(16, 32, 64), seed=0):
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        stages = []
        cin = in_channels
        for w in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(cin, w, 3, rng=rng), nn.ReLU(),
                nn.Conv2d(w, w, 3, rng=rng), nn.ReLU(),
                nn.MaxPool2(),
            ))
            cin = w
        self.stages = stages
        up = []
        for w in reversed((widths[0],) + tuple(widths[:-1])):
            up.append(nn.Sequential(nn.Upsample2(), nn.Conv2d(cin, w, 3, rng=rng), nn.ReLU()))
            cin = w
        self.decoder = up
        self.head = nn.Conv2d(cin, 1, 3, rng=rng)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        for block in self.decoder:
            x = block(x)
        return T.relu(self.head(x)), feats


class DomainClassifier(nn.Module):
    """Gradient reversal, two 3x3 convs and global pooling; returns a logit per image."""

    def __init__(self, in_channels, hidden=16, grl_scale=1.0, seed=0):
        rng = np.random.default_rng(seed)
        self.grl = nn.GradReverse(grl_scale)
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, rng=rng)
        self.conv2 = nn.Conv2d(hidden, 1, 3, rng=rng)

    def logit(self, x):
        h = T.relu(self.conv1(self.grl(x)))
        return T.global_avg_pool(self.conv2(h))

    def forward(self, x):
        """Probability that ``x`` came from the source domain, shape (N, 1)."""
        return T.sigmoid(self.logit(x))


class DensityDiscriminator(nn.Module):
    """Conv stack over 1-channel density maps; outputs a logit per map.

    Maps from the counter are passed through gradient reversal by the caller.
    """

    def __init__(self, hidden=(8, 16), seed=0):
        rng = np.random.default_rng(seed)
        c1, c2 = hidden
        self.conv1 = nn.Conv2d(1, c1, 3, rng=rng)
        self.conv2 = nn.Conv2d(c1, c2, 3, rng=rng)
        self.conv3 = nn.Conv2d(c2, 1, 3, rng=rng)

    def logit(self, x):
        h = T.maxpool2(T.relu(self.conv1(x)))
        h = T.maxpool2(T.relu(self.conv2(h)))
        return T.global_avg_pool(self.conv3(h))

    def forward(self, x):
        """Probability that ``x`` is a pseudo-label map, shape (N, 1)."""
        return T.sigmoid(self.logit(x))


# -- segmentation post-processing -------------------------------------------------------

def normalize_seg(seg):
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    seg = np.asarray(seg, dtype=np.float64)
    if not np.isfinite(seg).all():
        raise NonFiniteError("segmentation contains non-finite values")
    lo, hi = seg.min(), seg.max()
    if hi == lo:
        return np.zeros_like(seg)
    return (seg - lo) / (hi - lo)


def harden_seg(soft):
    """1 where the map exceeds its own mean (strictly), else 0."""
    soft = np.asarray(soft, dtype=np.float64)
    return (soft > soft.mean()).astype(np.float64)


def seg_to_level(seg, level):
    """Average non-overlapping ``2**level`` blocks of an (H, W) map."""
    seg = np.asarray(seg, dtype=np.float64)
    f = 2 ** level
    h, w = seg.shape
    if h % f or w % f:
        raise ValueError(f"{w}x{h} map is not divisible by {f}")
    return seg.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


# -- losses -------------------------------------------------------------------------------

def crt_loss(features, segs, domain_labels, classifiers):
    """Crowd-gated multi-level domain classification loss.

    ``features[l]`` is an (N, C_l, h_l, w_l) tensor, ``segs[l]`` an (N, h_l, w_l)
    array already at that resolution, ``domain_labels`` is 1 for source and 0
    for target. Cross-entropies are summed over levels and averaged over images.
    """
    if not (len(features) == len(segs) == len(classifiers)):
        raise ValueError("need one segmentation map and classifier per feature level")
    labels = np.asarray(domain_labels, dtype=np.float64).reshape(-1, 1)
    total = None
    for feat, seg, clf in zip(features, segs, classifiers):
        seg = np.asarray(seg, dtype=feat.dtype)
        if seg.shape != (feat.shape[0],) + feat.shape[2:]:
            raise ValueError(f"segmentation {seg.shape} does not match features {feat.shape}")
        gated = feat * Tensor(seg[:, None])
        term = T.bce_with_logits(clf.logit(gated), labels).sum()
        total = term if total is None else total + term
    return total / float(len(labels))


def cda_loss(sppl, est_target, disc: DensityDiscriminator, grl_scale=1.0):
    """Density discriminator loss: pseudo labels are "real", counter output is "fake".

    The counter branch goes through gradient reversal so one backward pass
    trains the discriminator and pushes the counter toward pseudo-label-like maps.
    """
    sppl = sppl if isinstance(sppl, Tensor) else Tensor(np.asarray(sppl, dtype=est_target.dtype))
    if sppl.shape != est_target.shape:
        raise ValueError(f"shape mismatch: {sppl.shape} vs {est_target.shape}")
    n = est_target.shape[0]
    real = T.bce_with_logits(disc.logit(sppl), np.ones((sppl.shape[0], 1))).sum()
    fake = T.bce_with_logits(disc.logit(T.grad_reverse(est_target, grl_scale)), np.zeros((n, 1))).sum()
    return (real + fake) / float(n)


# -- pseudo labels ----------------------------------------------------------------------------

def crowd_distribution(soft_seg):
    """Normalize a soft segmentation into a pixel distribution (all zeros if it sums to 0)."""
    soft = np.asarray(soft_seg, dtype=np.float64)
    if not np.isfinite(soft).all():
        raise NonFiniteError("segmentation contains non-finite values")
    total = soft.sum()
    return soft / total if total > 0 else np.zeros_like(soft)


def make_sppl(soft_seg, n, density_config: DensityConfig = DensityConfig(), seed=0):
    """Render a pseudo density map from ``n`` pixels drawn from the segmentation.

    Returns ``(density_map, points)``.
    """
    soft = np.asarray(soft_seg, dtype=np.float64)
    p = crowd_distribution(soft)
    h, w = soft.shape
    n = int(n)
    if n < 0:
        raise ValueError("sample count must be nonnegative")
    if n == 0 or p.sum() == 0:
        return np.zeros((h, w)), np.zeros((0, 2))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = AliasTable(p).draw(n, rng)
    pts = np.column_stack([flat % w, flat // w]).astype(np.float64)
    return make_density_map(pts, h, w, density_config), pts


def update_count(n_prev, est):
    """Inertial blend of the previous sampling count and the current estimate."""
    if n_prev < 0 or est < 0:
        raise ValueError("counts must be nonnegative")
    top = max(n_prev, est)
    if top == 0:
        return 0.0
    alpha = abs(n_prev - est) / top
    return alpha * n_prev + (1.0 - alpha) * est


# -- training -------------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lambda_crt: float = 1.0
    lambda_cda: float = 0.3
    grl_scale: float = 0.1
    lr_counter: float = 1e-4
    lr_classifier: float = 1e-4
    iterations: int = 3000
    pretrain_iterations: int = 3000
    pretrain_lr: float = 1e-4
    seg_mode: str = "soft"
    gate: str = "pcs"  # "pcs" or "ones"
    lr_schedule: str = "cosine"
    sppl_refresh: int = 50
    crop_size: int = 64
    density_scale: float = 100.0
    widths: tuple = (16, 32, 64)
    log_every: int = 1

    def __post_init__(self):
        if self.lambda_crt < 0 or self.lambda_cda < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (self.lr_counter > 0 and self.lr_classifier > 0 and self.pretrain_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.seg_mode not in ("soft", "hard"):
            raise ValueError("seg_mode must be 'soft' or 'hard'")
        if self.gate not in ("pcs", "ones"):
            raise ValueError("gate must be 'pcs' or 'ones'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.sppl_refresh < 1:
            raise ValueError("sppl_refresh must be >= 1")


def ablation_config(config: TrainConfig, mode: str) -> TrainConfig:
    """Adjust a config for one rung of the ablation ladder."""
    if mode == "source-only":
        return replace(config, lambda_crt=0.0, lambda_cda=0.0)
    if mode == "crt-no-pcs":
        return replace(config, lambda_cda=0.0, gate="ones")
    if mode == "crt-pcs":
        return replace(config, lambda_cda=0.0, gate="pcs")
    if mode == "full":
        return replace(config, gate="pcs")
    raise ValueError(f"unknown ablation {mode!r}; expected one of {ABLATIONS}")


@dataclass
class AdaptState:
    iteration: int
    counts: np.ndarray  # per target image sampling count
    sppl_maps: dict
    sppl_born: dict


def _streams(seed):
    src, tgt, sppl = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(src), np.random.default_rng(tgt), np.random.default_rng(sppl)


class _SceneCache:
    """Per-scene (C, H, W) images and ground-truth density maps."""

    def __init__(self, scenes, density_config, scale, with_density=True):
        self.images = [sc.chw() for sc in scenes]
        self.density = None
        if with_density:
            self.density = [
                (make_density_map(sc.points, sc.height, sc.width, density_config) * scale).astype(np.float32)
                for sc in scenes
            ]

    def draw(self, rng, crop):
        i = int(rng.integers(len(self.images)))
        _, h, w = self.images[i].shape
        return i, draw_window(h, w, crop, rng)


def lr_at(base, it, total, schedule):
    """Learning rate for iteration ``it`` of ``total`` (cosine decays to 1% of base)."""
    if schedule == "constant" or total <= 1:
        return base
    frac = it / (total - 1)
    return base * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * frac)))


def _source_step_loss(counter, cache, rng, crop):
    i, win = cache.draw(rng, crop)
    x = Tensor(win.apply(cache.images[i])[None])
    den, feats = counter(x)
    gt = win.apply(cache.density[i])[None, None]
    return density_loss(den, gt), feats, i, win


def train_supervised(counter, source, config: TrainConfig, iterations, lr, seed=0,
                     density_config=DensityConfig(), on_record=None):
    """Plain source supervision with the counting loss; returns per-iteration losses."""
    scenes = source.train if hasattr(source, "train") else list(source)
    if not scenes:
        raise ValueError("empty source dataset")
    cache = _SceneCache(scenes, density_config, config.density_scale)
    rng_src, _, _ = _streams(seed)
    opt = Adam(counter.parameters(), lr=lr)
    losses = []
    for it in range(iterations):
        opt.state.lr = lr_at(lr, it, iterations, config.lr_schedule)
        opt.zero_grad()
        loss, _, _, _ = _source_step_loss(counter, cache, rng_src, config.crop_size)
        loss.backward()
        opt.step()
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite counting loss at iteration {it}")
        losses.append(value)
        if on_record is not None:
            on_record({"iter": it, "l_den": value})
    return losses


def pretrain_source(counter, source, config: TrainConfig, seed=0, density_config=DensityConfig(),
                    on_record=None):
    """Supervised source training with the pretraining budget."""
    return train_supervised(counter, source, config, config.pretrain_iterations, config.pretrain_lr,
                            seed=seed, density_config=density_config, on_record=on_record)


def predict_density(counter, image, scale):
    """Unscaled density map for one (C, H, W) image."""
    with T.no_grad():
        den, _ = counter(Tensor(np.asarray(image, dtype=np.float32)[None]))
    return den.data[0, 0].astype(np.float64) / scale


def predict_counts(counter, scenes, scale):
    return np.array([predict_density(counter, sc.chw(), scale).sum() for sc in scenes])


def initial_counts(counter, scenes, scale):
    """Starting sampling counts: the pretrained counter's estimate per image."""
    return np.maximum(predict_counts(counter, scenes, scale), 0.0)


def evaluate(counter, scenes, scale):
    est = predict_counts(counter, scenes, scale)
    gt = np.array([sc.count for sc in scenes], dtype=np.float64)
    return {"mae": mae(est, gt), "rmse": rmse(est, gt), "counts": est.tolist(), "gt": gt.tolist()}


def segmentation_maps(model, scenes):
    """Raw crowd response (channel 0) for each scene."""
    return [infer_segmentation(model, sc)[0].astype(np.float64) for sc in scenes]


def _gate(raw_crop, config):
    if config.gate == "ones":
        return np.ones_like(raw_crop)
    soft = normalize_seg(raw_crop)
    return harden_seg(soft) if config.seg_mode == "hard" else soft


@dataclass
class Adversaries:
    classifiers: list
    density_disc: DensityDiscriminator

    @classmethod
    def build(cls, widths, grl_scale=1.0, seed=0):
        rng = np.random.default_rng(seed)
        clfs = [DomainClassifier(w, grl_scale=grl_scale, seed=int(rng.integers(2**31))) for w in widths]
        return cls(clfs, DensityDiscriminator(seed=int(rng.integers(2**31))))

    def parameters(self):
        params = []
        for c in self.classifiers:
            params += c.parameters()
        return params + self.density_disc.parameters()


def adapt_train(counter, weak_learner, source, target, config: TrainConfig, seed=0,
                density_config=DensityConfig(), counts=None, adversaries=None, on_record=None):
    """Joint training on one source and one target crop per iteration.

    ``weak_learner`` may be None when ``config.gate == "ones"`` and the
    density term is disabled. Returns ``(records, state)``.
    """
    src_scenes = source.train if hasattr(source, "train") else list(source)
    tgt_scenes = target.train if hasattr(target, "train") else list(target)
    if not src_scenes or not tgt_scenes:
        raise ValueError("adaptation needs nonempty source and target training sets")
    use_crt = config.lambda_crt > 0
    use_cda = config.lambda_cda > 0
    needs_seg = use_cda or (use_crt and config.gate == "pcs")
    if needs_seg and weak_learner is None:
        raise ValueError("a trained weak learner is required for the segmentation gate and pseudo labels")

    scale = config.density_scale
    src_cache = _SceneCache(src_scenes, density_config, scale)
    tgt_cache = _SceneCache(tgt_scenes, density_config, scale, with_density=False)
    src_seg = segmentation_maps(weak_learner, src_scenes) if needs_seg else None
    tgt_seg = segmentation_maps(weak_learner, tgt_scenes) if needs_seg else None
    tgt_soft = [normalize_seg(s) for s in tgt_seg] if use_cda else None

    rng_src, rng_tgt, rng_sppl = _streams(seed)
    if counts is None:
        counts = initial_counts(counter, tgt_scenes, scale) if use_cda else np.zeros(len(tgt_scenes))
    state = AdaptState(0, np.asarray(counts, dtype=np.float64).copy(), {}, {})
    adversaries = adversaries or Adversaries.build(counter.widths, config.grl_scale, seed=seed + 1)
    opt_g = Adam(counter.parameters(), lr=config.lr_counter)
    adv_params = []
    if use_crt:
        for c in adversaries.classifiers:
            adv_params += c.parameters()
    if use_cda:
        adv_params += adversaries.density_disc.parameters()
    opt_d = Adam(adv_params, lr=config.lr_classifier) if adv_params else None

    records = []
    for it in range(config.iterations):
        state.iteration = it
        opt_g.state.lr = lr_at(config.lr_counter, it, config.iterations, config.lr_schedule)
        opt_g.zero_grad()
        if opt_d is not None:
            opt_d.state.lr = lr_at(config.lr_classifier, it, config.iterations, config.lr_schedule)
            opt_d.zero_grad()
        l_den, src_feats, si, s_win = _source_step_loss(counter, src_cache, rng_src, config.crop_size)
        total = l_den
        l_crt = l_cda = 0.0
        n_est = None
        if use_crt or use_cda:
            ti, t_win = tgt_cache.draw(rng_tgt, config.crop_size)
            t_img = t_win.apply(tgt_cache.images[ti])[None]
            den_t, tgt_feats = counter(Tensor(t_img))
            if use_crt:
                if config.gate == "pcs":
                    gates = [_gate(s_win.apply(src_seg[si]), config), _gate(t_win.apply(tgt_seg[ti]), config)]
                else:
                    gates = [np.ones((config.crop_size, config.crop_size))] * 2
                feats = [T.concat([a, b], axis=0) for a, b in zip(src_feats, tgt_feats)]
                segs = [np.stack([seg_to_level(g, lvl + 1) for g in gates]) for lvl in range(len(feats))]
                crt = crt_loss(feats, segs, [1.0, 0.0], adversaries.classifiers)
                l_crt = crt.item()
                total = total + crt * config.lambda_crt
            if use_cda:
                born = state.sppl_born.get(ti)
                if born is None or it - born >= config.sppl_refresh:
                    sppl_map, _ = make_sppl(tgt_soft[ti], round(state.counts[ti]), density_config, rng_sppl)
                    state.sppl_maps[ti] = (sppl_map * scale).astype(np.float32)
                    state.sppl_born[ti] = it
                sppl = t_win.apply(state.sppl_maps[ti])[None, None]
                cda = cda_loss(sppl, den_t, adversaries.density_disc, config.grl_scale)
                l_cda = cda.item()
                total = total + cda * config.lambda_cda
            if t_win.size == tgt_cache.images[ti].shape[1] == tgt_cache.images[ti].shape[2]:
                n_est = float(den_t.data.sum()) / scale
            else:
                n_est = float(predict_density(counter, tgt_cache.images[ti], scale).sum())

        l_total = total.item()
        for name, value in (("l_den", l_den.item()), ("l_crt", l_crt), ("l_cda", l_cda), ("l_total", l_total)):
            if not np.isfinite(value) or value < 0:
                raise NonFiniteError(f"{name} = {value} at iteration {it}")
        total.backward()
        opt_g.step()
        if opt_d is not None:
            opt_d.step()
        if use_cda and n_est is not None:
            state.counts[ti] = update_count(state.counts[ti], max(n_est, 0.0))

        if it % config.log_every == 0 or it == config.iterations - 1:
            rec = {
                "iter": it,
                "l_den": l_den.item(),
                "l_crt": l_crt,
                "l_cda": l_cda,
                "l_total": l_total,
                "n_mean": float(state.counts.mean()),
            }
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return records, state


def config_dict(config: TrainConfig):
    d = asdict(config)
    d["widths"] = list(config.widths)
    return d


__all__ = [
    "ABLATIONS", "AdaptState", "Adversaries", "CounterNet", "DensityDiscriminator", "DomainClassifier",
    "TrainConfig", "ablation_config", "adapt_train", "cda_loss", "crowd_distribution", "crt_loss",
    "evaluate", "harden_seg", "initial_counts", "make_sppl", "normalize_seg", "predict_counts",
    "predict_density", "pretrain_source", "seg_to_level", "train_supervised", "update_count",
]
