"""Backbone plus both heads, with checkpoint round-tripping."""

from __future__ import annotations

import os
from dataclasses import asdict

import numpy as np

from . import backbone as bb
from . import heads as hd
from . import tensor as T
from .tensor import Tensor


class SIViT:
    def __init__(self, cfg: bb.ViTConfig, n_categories: int = 2, reg_mode: str = "token",
                 normalize_labels: bool = False, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.n_categories = n_categories
        self.reg_mode = reg_mode
        self.normalize_labels = normalize_labels
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            params = bb.init_params(cfg, rng)
            params.update(hd.init_head_params(cfg.embed_dim, n_categories, rng, cfg.init_std, reg_mode))
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = v.copy()

    # -- forward paths ---------------------------------------------------------------
    def features(self, patches: np.ndarray, capture: dict | None = None) -> bb.TokenSequence:
        """Flattened patches ``(..., n, p*p*3)`` -> backbone token sequence."""
        return bb.forward(bb.embed_patches(patches, self.params), self.params, self.cfg, capture)

    def predict(self, patches: np.ndarray, with_reg: bool = True, with_cls: bool = True,
                capture: dict | None = None) -> hd.Predictions:
        seq = self.features(patches, capture)
        soft = hd.reg_head(seq.patch_tokens, self.params, self.normalize_labels, self.reg_mode) if with_reg else None
        logits = hd.cls_head(seq.cls, self.params) if with_cls else None
        return hd.Predictions(soft, logits)

    def class_logits(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images)
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                patches = bb.image_patches(images[i:i + batch_size], self.cfg.patch_size)
                out.append(self.predict(patches, with_reg=False).class_logits.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, hd.N_CLASSES))

    def classify(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return np.argmax(self.class_logits(images, batch_size), axis=-1)

    # -- persistence -------------------------------------------------------------------
    def meta(self) -> dict:
        return {
            "vit": asdict(self.cfg),
            "n_categories": self.n_categories,
            "reg_mode": self.reg_mode,
            "normalize_labels": self.normalize_labels,
        }

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        meta = self.meta()
        if extra:
            meta["extra"] = extra
        bb.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SIViT":
        params, meta = bb.load_checkpoint(path)
        cfg = bb.ViTConfig(**meta["vit"])
        return cls(cfg, meta["n_categories"], meta["reg_mode"], meta["normalize_labels"], params)
