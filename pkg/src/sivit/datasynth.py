"""Procedural ROSE-like cytology images with per-pixel category masks.

Mask categories: 0 background (impurities included), 1 normal cell,
2 cancer cell, 3..K additional benign cell types. A sample is positive iff
its mask contains at least one cancer pixel; the label is always read off
the mask, never stored separately.

Each sample is a pure function of ``(cfg, index)``: the generator seeds a
fresh ``numpy.random.Generator`` from ``[cfg.seed, index]``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import pnm

log = logging.getLogger(__name__)

BACKGROUND = 0
NORMAL = 1
CANCER = 2

INDEX_FILE = "index.tsv"


class ConfigError(ValueError):
    pass


class DatasetError(IOError):
    pass


@dataclass
class GenConfig:
    image_size: int = 64
    n_categories: int = 2
    patch_size: int = 8
    normal_cells: tuple[int, int] = (6, 12)
    cancer_cells: tuple[int, int] = (2, 4)
    extra_cells: tuple[int, int] = (1, 3)
    normal_radius: tuple[float, float] = (2.5, 3.5)
    cancer_radius: tuple[float, float] = (4.5, 6.0)
    extra_radius: tuple[float, float] = (1.8, 2.4)
    normal_nucleus_ratio: float = 0.4
    cancer_nucleus_ratio: float = 0.7
    # global-feature knobs: fraction of image size used as cluster spread
    normal_cluster_spread: float = 0.22
    cancer_cluster_spread: float = 0.10
    # cells are centred within this fraction of the half-size so a centre crop keeps them
    placement_frac: float = 0.55
    brightness_jitter: float = 0.15
    contrast_jitter: float = 0.3
    saturation_jitter: float = 0.3
    hue_jitter: float = 0.06
    impurities: tuple[int, int] = (2, 6)
    blur_prob: float = 0.3
    noise_std: float = 0.02
    perturb: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_categories < 2:
            raise ConfigError(f"need at least 2 categories (normal, cancer), got {self.n_categories}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        for name in ("brightness_jitter", "contrast_jitter", "saturation_jitter", "hue_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("normal_radius", "cancer_radius", "extra_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must be a positive range, got {(lo, hi)}")


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 float64, multiples of 1/255 in [0, 1]
    mask: np.ndarray  # H x W uint8 category indices
    sample_id: str
    seed: int
    n_categories: int = 2
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(
                f"{self.sample_id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )

    @property
    def class_label(self) -> int:
        return int(np.any(self.mask == CANCER))

    @property
    def image_size(self) -> int:
        return self.image.shape[0]


# -- rendering -------------------------------------------------------------------

_NORMAL_CYTO = np.array([0.78, 0.55, 0.72])
_NORMAL_NUC = np.array([0.38, 0.22, 0.52])
_CANCER_CYTO = np.array([0.70, 0.42, 0.66])
_CANCER_NUC = np.array([0.22, 0.10, 0.40])
_EXTRA_CYTO = np.array([0.60, 0.45, 0.75])
_EXTRA_NUC = np.array([0.30, 0.20, 0.55])


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _cell_shape(yy, xx, cy, cx, radius, irregular, rng):
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    if irregular:
        lobes = rng.integers(3, 6)
        amp = rng.uniform(0.12, 0.22)
        phase = rng.uniform(0, 2 * np.pi)
        r = radius * (1 + amp * np.sin(lobes * theta + phase))
    else:
        stretch = rng.uniform(0.9, 1.1)
        r = radius * (1 + 0.05 * np.cos(2 * theta) * stretch)
    return dist, r


def _place(rng, n, centre, spread, size, limit):
    pts = centre + rng.normal(scale=spread * size, size=(n, 2))
    mid = size / 2.0
    off = pts - mid
    norm = np.hypot(off[:, 0], off[:, 1])
    scale = np.minimum(1.0, limit / np.maximum(norm, 1e-9))
    return mid + off * scale[:, None]


def _paint_cells(img, mask, rng, cfg, yy, xx, n, radius_rng, nuc_ratio, cyto, nuc, category, spread, irregular):
    size = cfg.image_size
    limit = cfg.placement_frac * size / 2.0
    centre = size / 2.0 + rng.uniform(-0.5, 0.5, size=2) * limit
    for cy, cx in _place(rng, n, centre, spread, size, limit):
        radius = rng.uniform(*radius_rng)
        dist, r = _cell_shape(yy, xx, cy, cx, radius, irregular, rng)
        body = dist <= r
        shade = 1.0 + rng.normal(scale=0.05, size=3)
        img[body] = cyto * shade
        ratio = nuc_ratio * rng.uniform(0.9, 1.1)
        ny, nx = cy + rng.normal(scale=0.15 * radius), cx + rng.normal(scale=0.15 * radius)
        nucleus = np.hypot(yy - ny, xx - nx) <= ratio * r
        img[nucleus & body] = nuc * shade
        mask[body] = category


def _paint_impurities(img, rng, cfg, yy, xx):
    size = cfg.image_size
    for _ in range(rng.integers(cfg.impurities[0], cfg.impurities[1] + 1)):
        kind = rng.integers(3)
        cy, cx = rng.uniform(0, size, size=2)
        if kind == 0:  # bright speck
            img[np.hypot(yy - cy, xx - cx) <= rng.uniform(0.6, 1.4)] = 1.0
        elif kind == 1:  # fibre: thin line segment
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(0.2, 0.5) * size
            dy, dx = yy - cy, xx - cx
            along = dy * np.sin(ang) + dx * np.cos(ang)
            across = -dy * np.cos(ang) + dx * np.sin(ang)
            line = (np.abs(across) <= 0.6) & (np.abs(along) <= length / 2)
            img[line] = img[line] * 0.75 + 0.25 * np.array([0.55, 0.45, 0.35])
        else:  # unmasked pale blob (debris, broken cell)
            blob = np.hypot(yy - cy, xx - cx) <= rng.uniform(1.5, 3.5)
            img[blob] = img[blob] * 0.5 + 0.5 * np.array([0.85, 0.70, 0.80])


def _color_cast(img, rng, cfg):
    # device/staining variation baked into the stored image
    b = 1 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    c = 1 + rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter) * 0.5
    tint = 1 + rng.uniform(-0.06, 0.06, size=3)
    out = img * b * tint
    out = (out - out.mean()) * c + out.mean()
    return out


def generate_sample(cfg: GenConfig, index: int, positive: bool) -> ImageSample:
    """Render sample ``index``; pure function of ``(cfg, index, positive)``."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    yy, xx = _grid(size)
    bg = np.array([0.93, 0.88, 0.91]) + rng.normal(scale=0.015, size=3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    mask = np.zeros((size, size), dtype=np.uint8)

    if cfg.perturb:
        _paint_impurities(img, rng, cfg, yy, xx)
    for category in range(3, cfg.n_categories + 1):
        n = rng.integers(cfg.extra_cells[0], cfg.extra_cells[1] + 1)
        _paint_cells(img, mask, rng, cfg, yy, xx, n, cfg.extra_radius, 0.8,
                     _EXTRA_CYTO, _EXTRA_NUC, category, cfg.normal_cluster_spread * 1.5, False)
    n_normal = rng.integers(cfg.normal_cells[0], cfg.normal_cells[1] + 1)
    _paint_cells(img, mask, rng, cfg, yy, xx, n_normal, cfg.normal_radius, cfg.normal_nucleus_ratio,
                 _NORMAL_CYTO, _NORMAL_NUC, NORMAL, cfg.normal_cluster_spread, False)
    if positive:
        # painted last so the cancer category always survives in the mask
        n_cancer = rng.integers(cfg.cancer_cells[0], cfg.cancer_cells[1] + 1)
        _paint_cells(img, mask, rng, cfg, yy, xx, n_cancer, cfg.cancer_radius, cfg.cancer_nucleus_ratio,
                     _CANCER_CYTO, _CANCER_NUC, CANCER, cfg.cancer_cluster_spread, True)

    if cfg.perturb:
        if rng.uniform() < cfg.blur_prob:
            sigma = rng.uniform(0.5, 1.2)
            img = np.stack([gaussian_filter(img[..., ch], sigma) for ch in range(3)], axis=-1)
        img = _color_cast(img, rng, cfg)
        img = img + rng.normal(scale=cfg.noise_std, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    sample = ImageSample(img, mask, f"s{index:05d}", cfg.seed, cfg.n_categories)
    assert sample.class_label == int(positive)
    return sample


def generate_dataset(cfg: GenConfig, n_pos: int, n_neg: int) -> list[ImageSample]:
    """``n_pos`` positives (indices 0..n_pos-1) followed by ``n_neg`` negatives."""
    if n_pos < 0 or n_neg < 0:
        raise ConfigError(f"sample counts must be >= 0, got n_pos={n_pos} n_neg={n_neg}")
    cfg.validate()
    return [generate_sample(cfg, i, i < n_pos) for i in range(n_pos + n_neg)]


# -- on-disk format ------------------------------------------------------------------

def write_dataset(samples: list[ImageSample], directory: str | os.PathLike) -> None:
    """Write ``<id>.ppm`` images, ``<id>.pgm`` masks and an ``index.tsv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        pnm.write_ppm(d / f"{s.sample_id}.ppm", np.round(s.image * 255.0).astype(np.uint8))
        pnm.write_pgm(d / f"{s.sample_id}.pgm", s.mask.astype(np.uint8), maxval=s.n_categories)
        lines.append(f"{s.sample_id}\t{s.class_label}\t{s.seed}\n")
    (d / INDEX_FILE).write_text("".join(lines), encoding="utf-8")
    log.info("wrote %d samples to %s", len(samples), d)


def read_dataset(directory: str | os.PathLike) -> list[ImageSample]:
    d = Path(directory)
    index = d / INDEX_FILE
    if not index.exists():
        raise DatasetError(f"{index}: missing index file")
    samples = []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"{index}:{lineno}: expected 3 tab-separated fields")
        try:
            sid, label, seed = parts[0], int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise DatasetError(f"{index}:{lineno}: label and seed must be integers") from exc
        ppm_path, pgm_path = d / f"{sid}.ppm", d / f"{sid}.pgm"
        try:
            rgb = pnm.read_ppm(ppm_path)
            mask, k = pnm.read_pgm(pgm_path)
        except FileNotFoundError as exc:
            raise DatasetError(f"{exc.filename}: missing file") from exc
        except pnm.PnmError as exc:
            raise DatasetError(str(exc)) from exc
        if rgb.shape[:2] != mask.shape:
            raise DatasetError(f"{pgm_path}: mask size {mask.shape} does not match image {rgb.shape[:2]}")
        s = ImageSample(rgb.astype(np.float64) / 255.0, mask, sid, seed, k)
        if s.class_label != label:
            raise DatasetError(f"{index}:{lineno}: label {label} disagrees with mask of {sid}")
        samples.append(s)
    return samples


def load_splits(directory: str | os.PathLike, seed: int = 0, ratios=(7, 1, 2)) -> dict[str, list[ImageSample]]:
    """Read ``train``/``val``/``test`` subdirectories, or split a flat dataset.

    A flat dataset is split per class with a seeded shuffle in the given ratios.
    """
    d = Path(directory)
    if (d / "train").is_dir():
        out = {name: read_dataset(d / name) for name in ("train", "val", "test") if (d / name).is_dir()}
        return out
    samples = read_dataset(d)
    rng = np.random.default_rng(seed)
    out = {"train": [], "val": [], "test": []}
    total = sum(ratios)
    for label in (0, 1):
        group = [s for s in samples if s.class_label == label]
        order = rng.permutation(len(group))
        n_train = round(len(group) * ratios[0] / total)
        n_val = round(len(group) * ratios[1] / total)
        for rank, i in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            out[split].append(group[i])
    return out
