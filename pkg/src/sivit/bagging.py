"""Patches, patch labels, bag soft labels and the two label distributors.

An image is a bag and its patches are the instances. Each patch gets a label
vector ``(MR, MR_1, ..., MR_K)``: the masked-pixel ratio and its split by
category, where only the patch's dominant category carries the ratio. A bag's
soft label sums those vectors over its patches (optionally divided by ``n``).

The shuffle distributor draws one uniform permutation over every
``(bag, patch)`` slot in the batch, so patches cross between bags and each
moved patch takes the grid position of the slot it lands in. The unshuffle
distributor keeps every bag as it is.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .datasynth import ImageSample

RECOMMENDED_MIN_PATCH = 16


class BaggingError(ValueError):
    pass


class SmallPatchWarning(UserWarning):
    pass


@dataclass
class PatchGrid:
    patches: np.ndarray  # n x p x p x 3
    mask_patches: np.ndarray  # n x p x p
    p: int
    source_id: str = ""
    n_categories: int = 2

    @property
    def n(self) -> int:
        return self.patches.shape[0]

    @property
    def side(self) -> int:
        return int(round(np.sqrt(self.n)))


@dataclass
class PatchLabel:
    mr: float
    per_category: np.ndarray  # length K

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.mr], self.per_category])


@dataclass
class BagSoftLabel:
    total: float
    per_category: np.ndarray
    normalized: bool = False

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.total], self.per_category])


@dataclass
class ShuffleRecord:
    """Slot ``j`` of the flattened ``(B, n)`` grid receives source slot ``permutation[j]``."""

    permutation: np.ndarray
    batch_shape: tuple[int, int]

    def apply(self, arr: np.ndarray) -> np.ndarray:
        b, n = self.batch_shape
        flat = arr.reshape((b * n,) + arr.shape[2:])
        return flat[self.permutation].reshape(arr.shape)

    def invert(self, arr: np.ndarray) -> np.ndarray:
        b, n = self.batch_shape
        flat = arr.reshape((b * n,) + arr.shape[2:])
        out = np.empty_like(flat)
        out[self.permutation] = flat
        return out.reshape(arr.shape)

    def source(self, bag: int, slot: int) -> tuple[int, int]:
        src = int(self.permutation[bag * self.batch_shape[1] + slot])
        return divmod(src, self.batch_shape[1])


@dataclass
class Bag:
    image: np.ndarray  # H x W x 3 regrouped image
    mask: np.ndarray  # H x W regrouped mask
    soft_label: BagSoftLabel
    provenance: list[tuple[str, int]] = field(default_factory=list)
    patch_labels: list[PatchLabel] = field(default_factory=list)


# -- patch grids ---------------------------------------------------------------------

def _check_patch_size(size: int, p: int) -> None:
    if p <= 0 or size % p:
        raise BaggingError(f"image size {size} is not divisible by patch size {p}")
    if p < RECOMMENDED_MIN_PATCH:
        warnings.warn(
            f"patch size {p} is below {RECOMMENDED_MIN_PATCH}; cells may be cut into pieces",
            SmallPatchWarning,
            stacklevel=3,
        )


def split_patches(arr: np.ndarray, p: int, channels: bool = True) -> np.ndarray:
    """``(..., H, W, C)`` -> ``(..., n, p, p, C)`` in row-major grid order.

    With ``channels=False`` the trailing channel axis is absent (masks).
    """
    if not channels:
        return split_patches(arr[..., None], p)[..., 0]
    *lead, h, w, c = arr.shape
    g = arr.reshape(*lead, h // p, p, w // p, p, c)
    g = np.swapaxes(g, -4, -3)  # (..., gh, gw, p, p, c)
    return g.reshape(*lead, (h // p) * (w // p), p, p, c)


def merge_patches(patches: np.ndarray, channels: bool = True) -> np.ndarray:
    """Inverse of :func:`split_patches` for square grids."""
    if not channels:
        return merge_patches(patches[..., None])[..., 0]
    *lead, n, p, _, c = patches.shape
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise BaggingError(f"{n} patches do not form a square grid")
    g = patches.reshape(*lead, side, side, p, p, c)
    g = np.swapaxes(g, -4, -3)
    return g.reshape(*lead, side * p, side * p, c)


def patchify(sample: ImageSample, p: int) -> PatchGrid:
    size = sample.image.shape[0]
    if sample.image.shape[0] != sample.image.shape[1]:
        raise BaggingError(f"{sample.sample_id}: image must be square, got {sample.image.shape[:2]}")
    _check_patch_size(size, p)
    return PatchGrid(
        patches=split_patches(sample.image, p),
        mask_patches=split_patches(sample.mask, p, channels=False),
        p=p,
        source_id=sample.sample_id,
        n_categories=sample.n_categories,
    )


def unpatchify(grid: PatchGrid) -> tuple[np.ndarray, np.ndarray]:
    return merge_patches(grid.patches), merge_patches(grid.mask_patches, channels=False)


# -- labels ----------------------------------------------------------------------------

def compute_patch_label(mask_patch: np.ndarray, n_categories: int) -> PatchLabel:
    """Masked-pixel ratio of one patch, credited entirely to its dominant category.

    Ties between categories go to the lowest category index.
    """
    m = np.asarray(mask_patch)
    if m.size == 0:
        raise BaggingError("empty mask patch")
    if m.min() < 0 or m.max() > n_categories:
        raise BaggingError(f"mask values must lie in 0..{n_categories}, found {m.min()}..{m.max()}")
    counts = np.bincount(m.ravel().astype(np.intp), minlength=n_categories + 1)
    masked = int(counts[1:].sum())
    mr = masked / m.size
    per = np.zeros(n_categories)
    if masked:
        per[int(np.argmax(counts[1:]))] = mr
    return PatchLabel(mr, per)


def patch_label_array(masks: np.ndarray, p: int, n_categories: int) -> np.ndarray:
    """Vectorized patch labels: masks ``(..., H, W)`` -> ``(..., n, K + 1)``."""
    masks = np.asarray(masks)
    if masks.max(initial=0) > n_categories or masks.min(initial=0) < 0:
        raise BaggingError(f"mask values must lie in 0..{n_categories}")
    mp = split_patches(masks, p, channels=False)
    flat = mp.reshape(mp.shape[:-2] + (p * p,))
    counts = np.stack([(flat == c).sum(axis=-1) for c in range(1, n_categories + 1)], axis=-1)
    masked = counts.sum(axis=-1)
    mr = masked / float(p * p)
    dominant = np.argmax(counts, axis=-1)
    per = np.zeros(counts.shape, dtype=np.float64)
    np.put_along_axis(per, dominant[..., None], mr[..., None], axis=-1)
    return np.concatenate([mr[..., None], per], axis=-1)


def aggregate_bag_label(patch_labels: list[PatchLabel], normalize: bool = False) -> BagSoftLabel:
    if not patch_labels:
        raise BaggingError("cannot aggregate an empty bag")
    total = sum(pl.mr for pl in patch_labels)
    per = np.sum([pl.per_category for pl in patch_labels], axis=0)
    if normalize:
        n = len(patch_labels)
        total, per = total / n, per / n
    return BagSoftLabel(float(total), per, normalize)


def bag_label_array(patch_labels: np.ndarray, normalize: bool = False) -> np.ndarray:
    """Sum ``(..., n, K + 1)`` patch labels over the patch axis."""
    out = patch_labels.sum(axis=-2)
    if normalize:
        out = out / patch_labels.shape[-2]
    return out


def mil_bag_label(instance_labels) -> int:
    """0 if every instance is negative, else 1."""
    labels = list(instance_labels)
    if not labels:
        raise BaggingError("a bag needs at least one instance")
    for v in labels:
        if v not in (0, 1):
            raise BaggingError(f"instance labels must be 0 or 1, got {v!r}")
    return 0 if sum(labels) == 0 else 1


# -- distributors ------------------------------------------------------------------------

def _check_batch(batch: list[PatchGrid]) -> tuple[int, int, int]:
    if not batch:
        raise BaggingError("empty batch")
    n, p, k = batch[0].n, batch[0].p, batch[0].n_categories
    for g in batch:
        if (g.n, g.p) != (n, p):
            raise BaggingError(f"heterogeneous patch grids: (n={g.n}, p={g.p}) vs (n={n}, p={p})")
    return n, p, k


def _make_bag(patches, mask_patches, provenance, n_categories, normalize) -> Bag:
    labels = [compute_patch_label(m, n_categories) for m in mask_patches]
    return Bag(
        image=merge_patches(patches),
        mask=merge_patches(mask_patches, channels=False),
        soft_label=aggregate_bag_label(labels, normalize),
        provenance=provenance,
        patch_labels=labels,
    )


def draw_permutation(rng: np.random.Generator, batch_shape: tuple[int, int], scope: str = "batch") -> ShuffleRecord:
    if scope != "batch":
        raise BaggingError(f"unsupported shuffle scope {scope!r} (only 'batch' is implemented)")
    b, n = batch_shape
    return ShuffleRecord(rng.permutation(b * n), (b, n))


def shuffle_distribute(batch: list[PatchGrid], rng: np.random.Generator, normalize: bool = False,
                       scope: str = "batch") -> tuple[list[Bag], ShuffleRecord]:
    n, _, k = _check_batch(batch)
    record = draw_permutation(rng, (len(batch), n), scope)
    patches = record.apply(np.stack([g.patches for g in batch]))
    masks = record.apply(np.stack([g.mask_patches for g in batch]))
    bags = []
    for b in range(len(batch)):
        prov = []
        for i in range(n):
            src_bag, src_slot = record.source(b, i)
            prov.append((batch[src_bag].source_id, src_slot))
        bags.append(_make_bag(patches[b], masks[b], prov, k, normalize))
    return bags, record


def unshuffle_distribute(batch: list[PatchGrid], normalize: bool = False) -> list[Bag]:
    _check_batch(batch)
    return [
        _make_bag(g.patches, g.mask_patches, [(g.source_id, i) for i in range(g.n)], g.n_categories, normalize)
        for g in batch
    ]


def recompute_soft_label(bag: Bag, grids: dict[str, PatchGrid], normalize: bool = False) -> BagSoftLabel:
    """Rebuild a bag's soft label from its provenance alone."""
    labels = [
        compute_patch_label(grids[sid].mask_patches[idx], grids[sid].n_categories) for sid, idx in bag.provenance
    ]
    return aggregate_bag_label(labels, normalize)
