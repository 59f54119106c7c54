"""Training loop: augmentation, Adam with decoupled decay, cosine schedule,
the SF/USF step and the CutOut/MixUp/CutMix baselines.

Randomness is split into independent streams (data order + augmentation,
shuffling, batch mixing) so switching a strategy never perturbs the others:
``si`` with both REG weights at zero reproduces ``naive`` bit for bit.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import affine_transform

from . import backbone as bb
from . import heads as hd
from . import tensor as T
from .bagging import bag_label_array, draw_permutation, patch_label_array
from .datasynth import ImageSample
from .evalviz import ConfusionCounts
from .model import SIViT

STRATEGIES = ("naive", "cutout", "mixup", "cutmix", "si", "usf_only")
MIXING = ("cutout", "mixup", "cutmix")
DIVERGENCE_LIMIT = 1e6
METRICS_HEADER = ("epoch", "train_loss", "l_cls", "l_reg_usf", "l_reg_sf", "val_acc", "lr")
STEPS_HEADER = ("step", "epoch", "total", "l_cls", "l_reg_usf", "l_reg_sf", "lr")


class TrainConfigError(ValueError):
    pass


class TrainingError(T.NumericalError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class AugmentConfig:
    enabled: bool = True
    rotate: bool = True
    crop_frac: float = 700 / 1038
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    brightness: float = 0.15
    contrast: float = 0.3
    saturation: float = 0.3
    hue: float = 0.06

    def validate(self) -> None:
        if not 0 < self.crop_frac <= 1:
            raise TrainConfigError(f"crop_frac must be in (0, 1], got {self.crop_frac}")
        for name in ("hflip_p", "vflip_p"):
            if not 0 <= getattr(self, name) <= 1:
                raise TrainConfigError(f"{name} must be a probability")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise TrainConfigError(f"{name} jitter must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 3e-4
    lr_final_ratio: float = 1 / 20
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    strategy: str = "si"
    head_weights: hd.HeadWeights = field(default_factory=hd.HeadWeights)
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    normalize_labels: bool = False
    reg_mode: str = "token"
    two_updates: bool = False
    cutout_frac: float = 0.5
    mix_alpha: float = 1.0
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise TrainConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise TrainConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise TrainConfigError("weight_decay must be non-negative")
        if self.strategy not in STRATEGIES:
            raise TrainConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.strategy in ("mixup", "cutmix") and not self.mix_alpha > 0:
            raise TrainConfigError(f"{self.strategy} needs mix_alpha > 0")
        if self.strategy == "cutout" and not 0 < self.cutout_frac <= 1:
            raise TrainConfigError("cutout needs 0 < cutout_frac <= 1")
        if self.two_updates and self.strategy != "si":
            raise TrainConfigError("two_updates only applies to strategy 'si'")
        self.augment.validate()
        effective_weights(self)

    def vit_config(self, image_size: int) -> bb.ViTConfig:
        if image_size % self.patch_size:
            raise TrainConfigError(f"image size {image_size} is not divisible by patch size {self.patch_size}")
        return bb.ViTConfig(image_size=image_size, patch_size=self.patch_size, embed_dim=self.embed_dim,
                            depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio, seed=self.seed)


def effective_weights(cfg: TrainConfig) -> hd.HeadWeights:
    """Head weights actually used: baselines drop both REG terms, usf_only drops SF."""
    w = cfg.head_weights
    if cfg.strategy == "si":
        return w
    if cfg.strategy == "usf_only":
        return hd.HeadWeights(w.w_cls, w.w_reg_usf, 0.0)
    if w.w_cls <= 0:
        raise TrainConfigError(f"strategy {cfg.strategy!r} trains only the CLS head but w_cls is 0")
    return hd.HeadWeights(w.w_cls, 0.0, 0.0)


def build_model(cfg: TrainConfig, image_size: int, n_categories: int) -> SIViT:
    return SIViT(cfg.vit_config(image_size), n_categories=n_categories, reg_mode=cfg.reg_mode,
                 normalize_labels=cfg.normalize_labels)


# -- schedule and optimizer ------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr0: float, final_ratio: float = 1 / 20) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr_min = lr0 * final_ratio
    if total_steps == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: dict[str, T.Tensor], grads: dict[str, np.ndarray | None], state: AdamState, lr_t: float,
                weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> dict[str, T.Tensor]:
    """In-place Adam step with bias correction and decoupled weight decay.

    A missing gradient counts as zero.
    """
    b1, b2 = betas
    state.t += 1
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data - lr_t * weight_decay * p.data - lr_t * step
    return params


# -- augmentation ------------------------------------------------------------------------

def _affine(image: np.ndarray, mask: np.ndarray, angle: float, crop_frac: float):
    """Rotate by ``angle`` about the centre, crop the central ``crop_frac`` and resize back."""
    h, w = mask.shape
    c, s = math.cos(angle), math.sin(angle)
    matrix = crop_frac * np.array([[c, -s], [s, c]])
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre
    out = np.empty_like(image)
    for ch in range(image.shape[-1]):
        fill = float(np.median(image[..., ch]))  # corners take the background colour
        out[..., ch] = affine_transform(image[..., ch], matrix, offset, order=1, mode="constant", cval=fill)
    new_mask = affine_transform(mask, matrix, offset, order=0, mode="constant", cval=0)
    return np.clip(out, 0.0, 1.0), new_mask


def color_jitter(images: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Random brightness/contrast/saturation scaling and hue rotation, one draw per image."""
    lead = images.shape[:-3] + (1, 1)
    b = 1 + rng.uniform(-cfg.brightness, cfg.brightness, size=lead)
    c = 1 + rng.uniform(-cfg.contrast, cfg.contrast, size=lead)
    s = 1 + rng.uniform(-cfg.saturation, cfg.saturation, size=lead)
    h = rng.uniform(-cfg.hue, cfg.hue, size=lead)
    hsv = rgb_to_hsv(np.clip(images, 0, 1))
    hsv[..., 2] = np.clip(hsv[..., 2] * b, 0, 1)
    rgb = hsv_to_rgb(hsv)
    mean = rgb.mean(axis=(-3, -2, -1), keepdims=True)
    rgb = np.clip((rgb - mean) * c[..., None] + mean, 0, 1)
    hsv = rgb_to_hsv(rgb)
    hsv[..., 1] = np.clip(hsv[..., 1] * s, 0, 1)
    hsv[..., 0] = np.mod(hsv[..., 0] + h, 1.0)
    return hsv_to_rgb(hsv)


def augment_batch(images: np.ndarray, masks: np.ndarray, rng: np.random.Generator,
                  cfg: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    if not cfg.enabled:
        return eval_transform(images, masks, cfg)
    out_i, out_m = np.empty_like(images), np.empty_like(masks)
    for i in range(len(images)):
        angle = rng.uniform(0, 2 * math.pi) if cfg.rotate else 0.0
        img, msk = _affine(images[i], masks[i], angle, cfg.crop_frac)
        if rng.uniform() < cfg.hflip_p:
            img, msk = img[:, ::-1], msk[:, ::-1]
        if rng.uniform() < cfg.vflip_p:
            img, msk = img[::-1], msk[::-1]
        out_i[i], out_m[i] = img, msk
    return color_jitter(out_i, rng, cfg), out_m


def eval_transform(images: np.ndarray, masks: np.ndarray, cfg: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic centre crop + resize."""
    out_i, out_m = np.empty_like(images), np.empty_like(masks)
    for i in range(len(images)):
        out_i[i], out_m[i] = _affine(images[i], masks[i], 0.0, cfg.crop_frac)
    return out_i, out_m


# -- mixing baselines ----------------------------------------------------------------------

def one_hot(labels: np.ndarray) -> np.ndarray:
    return np.eye(hd.N_CLASSES)[np.asarray(labels, dtype=int)]


def cutout(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, size_frac: float = 0.5):
    """Zero one random square per image (side ``size_frac * H``, clipped at the border)."""
    out = images.copy()
    h, w = images.shape[1:3]
    side = int(round(size_frac * h))
    for i in range(len(out)):
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        y0, y1 = max(cy - side // 2, 0), min(cy - side // 2 + side, h)
        x0, x1 = max(cx - side // 2, 0), min(cx - side // 2 + side, w)
        out[i, y0:y1, x0:x1] = 0.0
    return out, one_hot(labels)


def _partner(rng, b, partner):
    if b < 2:
        raise TrainConfigError("mixing strategies need a batch of at least 2 images")
    return rng.permutation(b) if partner is None else np.asarray(partner)


def mixup(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, alpha: float = 1.0,
          lam: float | None = None, partner=None):
    """``x = lam * x_a + (1 - lam) * x_b`` with the same weights on the one-hot targets."""
    partner = _partner(rng, len(images), partner)
    lam = rng.beta(alpha, alpha) if lam is None else float(lam)
    y = one_hot(labels)
    return lam * images + (1 - lam) * images[partner], lam * y + (1 - lam) * y[partner]


def cutmix(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, alpha: float = 1.0,
           box: tuple[int, int, int, int] | None = None, partner=None):
    """Paste a rectangle from the partner image; its target weight is the exact pasted-area fraction.

    ``box`` is ``(y0, y1, x0, x1)``; when omitted its area is drawn from Beta(alpha, alpha).
    """
    partner = _partner(rng, len(images), partner)
    h, w = images.shape[1:3]
    if box is None:
        lam = rng.beta(alpha, alpha)
        rh, rw = int(h * math.sqrt(1 - lam)), int(w * math.sqrt(1 - lam))
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        box = (max(cy - rh // 2, 0), min(cy + rh - rh // 2, h), max(cx - rw // 2, 0), min(cx + rw - rw // 2, w))
    y0, y1, x0, x1 = box
    out = images.copy()
    out[:, y0:y1, x0:x1] = images[partner, y0:y1, x0:x1]
    frac = max(y1 - y0, 0) * max(x1 - x0, 0) / float(h * w)
    y = one_hot(labels)
    return out, (1 - frac) * y + frac * y[partner]


# -- one step ----------------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray  # B x H x W x 3, already augmented
    masks: np.ndarray  # B x H x W
    targets: np.ndarray  # B integer labels or B x 2 soft targets


def _finite_or_raise(breakdown: hd.LossBreakdown, step: int) -> None:
    if not math.isfinite(breakdown.total):
        raise TrainingError("non-finite loss", step)
    if breakdown.total > DIVERGENCE_LIMIT:
        raise TrainingError(f"loss diverged above {DIVERGENCE_LIMIT:g}", step)


def _update(model: SIViT, state: AdamState, cfg: TrainConfig, lr_t: float) -> None:
    grads = {k: p.grad for k, p in model.params.items()}
    adam_update(model.params, grads, state, lr_t, cfg.weight_decay, cfg.betas, cfg.eps)
    model.zero_grad()


def train_step(model: SIViT, batch: Batch, cfg: TrainConfig, state: AdamState, shuffle_rng: np.random.Generator,
               lr_t: float, step: int = 0) -> hd.LossBreakdown:
    """SF pass, USF pass, one backward of the weighted total and one Adam update."""
    try:
        return _train_step(model, batch, cfg, state, shuffle_rng, lr_t, step)
    except TrainingError:
        raise
    except T.NumericalError as exc:
        raise TrainingError(str(exc), step) from exc


def _train_step(model, batch, cfg, state, shuffle_rng, lr_t, step):
    w = effective_weights(cfg)
    p, k = model.cfg.patch_size, model.n_categories
    patches = bb.image_patches(batch.images, p)
    need_labels = w.w_reg_sf > 0 or w.w_reg_usf > 0
    labels = patch_label_array(batch.masks, p, k) if need_labels else None
    usf_soft = bag_label_array(labels, cfg.normalize_labels) if need_labels else None

    pred_sf = sf_soft = None
    if w.w_reg_sf > 0:
        record = draw_permutation(shuffle_rng, patches.shape[:2])
        sf_soft = bag_label_array(record.apply(labels), cfg.normalize_labels)
        pred_sf = model.predict(record.apply(patches), with_cls=False)

    if cfg.two_updates and pred_sf is not None:
        sf_w = hd.HeadWeights(0.0, 0.0, w.w_reg_sf)
        loss, sf_part = hd.composite_loss(pred_sf, hd.Predictions(None, None), sf_soft, None, None, sf_w)
        _finite_or_raise(sf_part, step)
        T.backward(loss)
        _update(model, state, cfg, lr_t)
        pred_sf = None
        w_usf = hd.HeadWeights(w.w_cls, w.w_reg_usf, 0.0) if w.w_cls or w.w_reg_usf else None
    else:
        sf_part, w_usf = None, w

    if w_usf is not None:
        pred_usf = model.predict(patches, with_reg=w_usf.w_reg_usf > 0, with_cls=w_usf.w_cls > 0)
        loss, breakdown = hd.composite_loss(pred_sf, pred_usf, sf_soft, usf_soft, batch.targets, w_usf)
        _finite_or_raise(breakdown, step)
        T.backward(loss)
        _update(model, state, cfg, lr_t)
    else:
        breakdown = hd.LossBreakdown(0.0, 0.0, 0.0, 0.0)

    if sf_part is not None:
        breakdown = hd.LossBreakdown(sf_part.l_reg_sf, breakdown.l_reg_usf, breakdown.l_cls,
                                     sf_part.total + breakdown.total)
    breakdown.check(w)
    return breakdown


# -- evaluation and the epoch loop ---------------------------------------------------------------

def stack(samples: list[ImageSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not samples:
        raise TrainConfigError("no samples")
    images = np.stack([s.image for s in samples]).astype(np.float64)
    masks = np.stack([s.mask for s in samples])
    labels = np.array([s.class_label for s in samples])
    return images, masks, labels


def evaluate(model: SIViT, samples: list[ImageSample], aug: AugmentConfig | None = None) -> ConfusionCounts:
    images, masks, labels = stack(samples)
    images, _ = eval_transform(images, masks, aug or AugmentConfig())
    return ConfusionCounts.from_predictions(labels, model.classify(images))


def accuracy(counts: ConfusionCounts) -> float:
    return (counts.tp + counts.tn) / counts.total


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    l_cls: float
    l_reg_usf: float
    l_reg_sf: float
    val_acc: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


@dataclass
class FitResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_acc: float
    steps: int


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    # near-equal chunks, none larger than batch_size, so there is no singleton tail
    return np.array_split(order, math.ceil(len(order) / batch_size))


def fit(model: SIViT, train: list[ImageSample], val: list[ImageSample], cfg: TrainConfig,
        out_dir: str | os.PathLike | None = None, log=None) -> FitResult:
    """Train for ``cfg.epochs`` and leave the best-validation parameters in ``model``.

    With ``out_dir`` this writes ``metrics.csv`` (one row per epoch),
    ``steps.csv`` (one row per step) and ``best.ckpt``. Without validation
    samples the last epoch is kept and ``val_acc`` is NaN.
    """
    cfg.validate()
    data_ss, shuffle_ss, mix_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    data_rng, shuffle_rng, mix_rng = (np.random.default_rng(s) for s in (data_ss, shuffle_ss, mix_ss))
    images, masks, labels = stack(train)
    if val:
        v_images, v_masks, v_labels = stack(val)
        v_images, _ = eval_transform(v_images, v_masks, cfg.augment)

    per_epoch = len(_batches(np.arange(len(train)), cfg.batch_size))
    last_step = max(cfg.epochs * per_epoch - 1, 1)
    state = AdamState()
    history: list[EpochRecord] = []
    best_acc, best_epoch, best_state = -math.inf, 0, model.state()
    step = 0
    metrics_fh = steps_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8")
        steps_fh = open(os.path.join(out_dir, "steps.csv"), "w", newline="", encoding="utf-8")
    try:
        if metrics_fh:
            metrics_w = csv.writer(metrics_fh, lineterminator="\n")
            steps_w = csv.writer(steps_fh, lineterminator="\n")
            metrics_w.writerow(METRICS_HEADER)
            steps_w.writerow(STEPS_HEADER)
        for epoch in range(1, cfg.epochs + 1):
            sums = np.zeros(4)
            n_steps = 0
            for idx in _batches(data_rng.permutation(len(train)), cfg.batch_size):
                b_img, b_msk = augment_batch(images[idx], masks[idx], data_rng, cfg.augment)
                targets = labels[idx]
                if cfg.strategy == "cutout":
                    b_img, targets = cutout(b_img, targets, mix_rng, cfg.cutout_frac)
                elif cfg.strategy == "mixup":
                    b_img, targets = mixup(b_img, targets, mix_rng, cfg.mix_alpha)
                elif cfg.strategy == "cutmix":
                    b_img, targets = cutmix(b_img, targets, mix_rng, cfg.mix_alpha)
                lr_t = cosine_lr(min(step, last_step), last_step, cfg.lr, cfg.lr_final_ratio)
                br = train_step(model, Batch(b_img, b_msk, targets), cfg, state, shuffle_rng, lr_t, step)
                parts = (br.total, br.l_cls, br.l_reg_usf, br.l_reg_sf)
                sums += parts
                n_steps += 1
                if steps_fh:
                    steps_w.writerow([step, epoch] + [repr(float(x)) for x in parts] + [repr(lr_t)])
                step += 1
            if val:
                acc = float(np.mean(model.classify(v_images) == v_labels))
            else:
                acc = math.nan
            means = sums / n_steps
            rec = EpochRecord(epoch, *means, val_acc=acc, lr=lr_t)
            history.append(rec)
            if metrics_fh:
                metrics_w.writerow(rec.row())
                metrics_fh.flush()
            if log:
                log(f"epoch {epoch}/{cfg.epochs} loss {rec.train_loss:.4f} val_acc {acc:.4f} lr {lr_t:.2e}")
            if not val or acc > best_acc:
                best_acc, best_epoch, best_state = acc, epoch, model.state()
                if out_dir is not None:
                    model.save(os.path.join(out_dir, "best.ckpt"), {"epoch": epoch, "val_acc": acc})
    finally:
        for fh in (metrics_fh, steps_fh):
            if fh:
                fh.close()
    model.load_state(best_state)
    return FitResult(history, best_epoch, best_acc, step)
