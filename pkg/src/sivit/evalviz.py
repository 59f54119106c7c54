"""Classification metrics and gradient-weighted token attribution maps."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import pnm
from . import tensor as T
from .backbone import image_patches

METRIC_NAMES = ("accuracy", "precision", "recall", "specificity", "f1")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionCounts":
        y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
        return cls(
            tp=int(np.sum((y_true == 1) & (y_pred == 1))),
            fp=int(np.sum((y_true == 0) & (y_pred == 1))),
            tn=int(np.sum((y_true == 0) & (y_pred == 0))),
            fn=int(np.sum((y_true == 1) & (y_pred == 0))),
        )


def metrics(c: ConfusionCounts) -> dict:
    """Accuracy, precision, recall, specificity and F1 (positive = cancer).

    A ratio with a zero denominator is reported as 0 and its name is listed
    under ``"degenerate"``.
    """
    if c.total <= 0:
        raise ValueError("metrics need at least one evaluated sample")
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    specificity = ratio(c.tn, c.tn + c.fp, "specificity")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "precision": precision,
        "recall": recall,
        "specificity": specificity,
        "f1": f1,
        "degenerate": degenerate,
    }


def write_metrics_csv(path: str | os.PathLike, rows: list[tuple[str, dict]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("split",) + METRIC_NAMES)
        for split, m in rows:
            w.writerow([split] + [repr(float(m[k])) for k in METRIC_NAMES])


# -- attribution ---------------------------------------------------------------------

@dataclass
class AttributionMap:
    grid: np.ndarray  # side x side, in [0, 1]
    upsampled: np.ndarray  # H x W
    target_class: int


def normalize_map(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def token_cam(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Per-token score ``ReLU(mean_c(grad_ic * act_ic))`` for ``(n, D)`` inputs.

    Each token is weighted by its own gradient. Weights shared across tokens
    would mostly pick up the offset common to every token in the residual
    stream, which carries no spatial information.
    """
    return np.maximum(np.mean(gradients * activations, axis=-1), 0.0)


def token_gradients(model, image: np.ndarray, target_class: int) -> tuple[np.ndarray, np.ndarray]:
    """Activations and target-logit gradients of the patch tokens entering the final block, ``(n, D)`` each."""
    patches = image_patches(np.asarray(image)[None], model.cfg.patch_size)
    capture: dict = {}
    pred = model.predict(patches, with_reg=False, capture=capture)
    logits = pred.class_logits
    T.check_finite(logits, "class logits")
    x = capture["final_block_input"]
    x.retain_grad = True
    x.grad = None
    try:
        T.backward(logits[0, int(target_class)])
        grad = np.zeros(x.shape) if x.grad is None else x.grad
    finally:
        x.retain_grad = False
        model.zero_grad()
    if not np.all(np.isfinite(grad)):
        raise T.NumericalError("non-finite attribution gradient")
    return x.data[0, 1:], grad[0, 1:]


def attribution(model, image: np.ndarray, target_class: int) -> AttributionMap:
    """Attribution of ``target_class`` over the patch grid of one image (or regrouped bag)."""
    cfg = model.cfg
    act, grad = token_gradients(model, image, target_class)
    side = cfg.image_size // cfg.patch_size
    grid = normalize_map(token_cam(act, grad)).reshape(side, side)
    up = np.repeat(np.repeat(grid, cfg.patch_size, axis=0), cfg.patch_size, axis=1)
    return AttributionMap(grid, up, int(target_class))


def mask_overlap(amap: AttributionMap, mask: np.ndarray, category: int) -> tuple[float, float]:
    """Mean map value over ``category`` pixels and over background pixels."""
    inside = amap.upsampled[mask == category]
    outside = amap.upsampled[mask == 0]
    return (float(inside.mean()) if inside.size else 0.0, float(outside.mean()) if outside.size else 0.0)


def write_map(amap: AttributionMap | np.ndarray, path: str | os.PathLike) -> None:
    values = amap.upsampled if isinstance(amap, AttributionMap) else np.asarray(amap)
    pnm.write_pgm(path, np.round(np.clip(values, 0, 1) * 255.0).astype(np.uint8))


def read_map(path: str | os.PathLike) -> np.ndarray:
    gray, maxval = pnm.read_pgm(path)
    return gray.astype(np.float64) / maxval
