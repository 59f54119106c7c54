"""Regression and classification heads and the weighted three-term loss.

The REG head is a two-layer MLP shared across patch tokens. Its per-patch
outputs are summed over the bag, or averaged when labels are normalized, so
the prediction is built the same way as the soft label it regresses. The
CLS head is a single linear layer on the CLS token.

The loss is ``w_cls * CE + w_reg_usf * MSE_usf + w_reg_sf * MSE_sf``. A term
whose weight is zero is not evaluated at all and is reported as exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import trunc_normal
from .tensor import Tensor

N_CLASSES = 2
REG_MODES = ("token", "pool")


class HeadConfigError(ValueError):
    pass


@dataclass
class HeadWeights:
    w_cls: float = 1.0
    w_reg_usf: float = 1.0
    w_reg_sf: float = 1.0

    def __post_init__(self):
        ws = (self.w_cls, self.w_reg_usf, self.w_reg_sf)
        if any(w < 0 for w in ws):
            raise HeadConfigError(f"head weights must be non-negative, got {ws}")
        if not any(w > 0 for w in ws):
            raise HeadConfigError("at least one head weight must be positive")

    @classmethod
    def parse(cls, text: str) -> "HeadWeights":
        """Parse ``"cls:reg_usf:reg_sf"``, e.g. ``"1:1:1"``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise HeadConfigError(f"expected three ':'-separated weights, got {text!r}")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError as exc:
            raise HeadConfigError(f"bad head weights {text!r}") from exc

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_cls, self.w_reg_usf, self.w_reg_sf)


@dataclass
class LossBreakdown:
    l_reg_sf: float
    l_reg_usf: float
    l_cls: float
    total: float

    def weighted_sum(self, w: HeadWeights) -> float:
        return w.w_cls * self.l_cls + w.w_reg_usf * self.l_reg_usf + w.w_reg_sf * self.l_reg_sf

    def check(self, w: HeadWeights, tol: float = 1e-9) -> None:
        if min(self.l_reg_sf, self.l_reg_usf, self.l_cls) < 0:
            raise ArithmeticError(f"negative loss component in {self}")
        if abs(self.total - self.weighted_sum(w)) > tol:
            raise ArithmeticError(f"loss total {self.total} != weighted components {self.weighted_sum(w)}")


@dataclass
class Predictions:
    soft_label_hat: Tensor | None  # (..., K + 1)
    class_logits: Tensor | None  # (..., 2)


def init_head_params(embed_dim: int, n_categories: int, rng: np.random.Generator, std: float = 0.02,
                     mode: str = "token") -> dict[str, Tensor]:
    if mode not in REG_MODES:
        raise HeadConfigError(f"unknown REG head mode {mode!r}")
    d, out = embed_dim, n_categories + 1

    def w(*shape):
        return Tensor(trunc_normal(rng, shape, std), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    return {
        "reg.fc1.w": w(d, d), "reg.fc1.b": zeros(d),
        "reg.fc2.w": w(d, out), "reg.fc2.b": zeros(out),
        "cls.w": w(d, N_CLASSES), "cls.b": zeros(N_CLASSES),
    }


def _mlp(x: Tensor, params) -> Tensor:
    h = T.gelu(T.add(x @ params["reg.fc1.w"], params["reg.fc1.b"]))
    return T.add(h @ params["reg.fc2.w"], params["reg.fc2.b"])


def reg_head_per_patch(patch_tokens: Tensor, params) -> Tensor:
    """Per-patch label predictions ``(..., n, K + 1)``."""
    return _mlp(patch_tokens, params)


def reg_head(patch_tokens: Tensor, params, normalize: bool = False, mode: str = "token") -> Tensor:
    """Bag soft-label prediction ``(..., K + 1)`` from patch tokens ``(..., n, D)``."""
    if patch_tokens.shape[-2] < 1:
        raise T.ShapeError("reg_head: need at least one patch token")
    if mode == "token":
        per_patch = _mlp(patch_tokens, params)
        return T.mean(per_patch, axis=-2) if normalize else T.tsum(per_patch, axis=-2)
    if mode == "pool":
        pooled = T.mean(patch_tokens, axis=-2, keepdims=True)
        out = _mlp(pooled, params)
        return T.reshape(out, out.shape[:-2] + (out.shape[-1],))
    raise HeadConfigError(f"unknown REG head mode {mode!r}")


def cls_head(cls_token: Tensor, params) -> Tensor:
    x = T.reshape(cls_token, (1, cls_token.shape[0])) if cls_token.ndim == 1 else cls_token
    out = T.add(x @ params["cls.w"], params["cls.b"])
    return T.reshape(out, (N_CLASSES,)) if cls_token.ndim == 1 else out


def composite_loss(pred_sf: Predictions | None, pred_usf: Predictions, sf_soft, usf_soft, class_target,
                   weights: HeadWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted loss tensor (for backward) and its float breakdown.

    ``sf_soft``/``usf_soft`` are the bag soft-label targets of the shuffled and
    unshuffled bags; ``class_target`` is integer labels or soft class targets.
    """
    terms: list[Tensor] = []
    values = {"l_reg_sf": 0.0, "l_reg_usf": 0.0, "l_cls": 0.0}
    if weights.w_cls > 0:
        if pred_usf.class_logits is None:
            raise HeadConfigError("w_cls > 0 but no class logits were computed")
        l_cls = T.cross_entropy(pred_usf.class_logits, class_target)
        values["l_cls"] = l_cls.item()
        terms.append(T.mul(l_cls, weights.w_cls))
    if weights.w_reg_usf > 0 and pred_usf.soft_label_hat is not None:
        l_usf = T.mse(pred_usf.soft_label_hat, usf_soft)
        values["l_reg_usf"] = l_usf.item()
        terms.append(T.mul(l_usf, weights.w_reg_usf))
    if weights.w_reg_sf > 0 and pred_sf is not None and pred_sf.soft_label_hat is not None:
        l_sf = T.mse(pred_sf.soft_label_hat, sf_soft)
        values["l_reg_sf"] = l_sf.item()
        terms.append(T.mul(l_sf, weights.w_reg_sf))
    if not terms:
        raise HeadConfigError("no loss term was computed")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    breakdown = LossBreakdown(total=total.item(), **values)
    return total, breakdown
