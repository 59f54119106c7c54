"""A small pre-norm Vision Transformer over the tensor core.

``embed`` turns an image (or a batch of images) into ``n + 1`` tokens: a
learned CLS token followed by linearly projected patches, plus learned
positional embeddings. ``forward`` runs ``depth`` blocks of
``x + MHSA(LN(x))`` then ``x + MLP(LN(x))`` and splits the result into the
CLS token and the patch tokens. There is no final norm, so a depth-0
backbone is the identity.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .bagging import split_patches
from .tensor import Tensor

CHECKPOINT_MAGIC = "sivit-params-v1"


@dataclass
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class TokenSequence:
    cls: Tensor  # (..., D)
    patch_tokens: Tensor  # (..., n, D)


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def init_params(cfg: ViTConfig, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio

    def w(*shape):
        return Tensor(trunc_normal(rng, shape, cfg.init_std), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params = {
        "patch_embed.w": w(cfg.patch_dim, d),
        "patch_embed.b": zeros(d),
        "cls_token": zeros(d),
        "pos_embed": w(cfg.n_patches + 1, d),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        params.update({
            pre + "ln1.g": ones(d), pre + "ln1.b": zeros(d),
            pre + "attn.qkv.w": w(d, 3 * d), pre + "attn.qkv.b": zeros(3 * d),
            pre + "attn.proj.w": w(d, d), pre + "attn.proj.b": zeros(d),
            pre + "ln2.g": ones(d), pre + "ln2.b": zeros(d),
            pre + "mlp.fc1.w": w(d, hidden), pre + "mlp.fc1.b": zeros(hidden),
            pre + "mlp.fc2.w": w(hidden, d), pre + "mlp.fc2.b": zeros(d),
        })
    return params


def image_patches(images: np.ndarray, p: int) -> np.ndarray:
    """``(..., H, W, 3)`` -> ``(..., n, p*p*3)`` flattened in grid order."""
    patches = split_patches(np.asarray(images, dtype=np.float64), p)
    return patches.reshape(patches.shape[:-3] + (p * p * 3,))


def embed_patches(patches, params: dict[str, Tensor]) -> Tensor:
    """Flattened patches ``(..., n, P)`` -> tokens ``(..., n + 1, D)``."""
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    n = x.shape[-2]
    if params["pos_embed"].shape[0] != n + 1 or params["patch_embed.w"].shape[0] != x.shape[-1]:
        raise T.ShapeError(
            f"embed: patches {x.shape} do not match projection {params['patch_embed.w'].shape} "
            f"and positional table {params['pos_embed'].shape}"
        )
    tokens = T.add(x @ params["patch_embed.w"], params["patch_embed.b"])
    cls = params["cls_token"]
    cls = T.reshape(cls, (1, cls.shape[0]))
    if tokens.ndim > 2:
        cls = T.broadcast_leading(cls, tokens.shape[:-2])
    return T.add(T.concat([cls, tokens], axis=-2), params["pos_embed"])


def embed(images: np.ndarray, params: dict[str, Tensor], cfg: ViTConfig) -> Tensor:
    images = np.asarray(images)
    if images.shape[-3:] != (cfg.image_size, cfg.image_size, 3):
        raise T.ShapeError(f"embed: expected images of shape (..., {cfg.image_size}, {cfg.image_size}, 3), "
                           f"got {images.shape}")
    return embed_patches(image_patches(images, cfg.patch_size), params)


def _linear(x: Tensor, params, name: str) -> Tensor:
    return T.add(x @ params[name + ".w"], params[name + ".b"])


def attention(x: Tensor, params, pre: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = T.reshape(_linear(x, params, pre + "attn.qkv"), (b, n, 3, heads, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, h, N, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.mul(q @ T.swapaxes(k, -1, -2), 1.0 / np.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(weights @ v, (0, 2, 1, 3)), (b, n, d))
    return _linear(out, params, pre + "attn.proj")


def block(x: Tensor, params, i: int, cfg: ViTConfig) -> Tensor:
    pre = f"blocks.{i}."
    h = T.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"], cfg.ln_eps)
    x = T.add(x, attention(h, params, pre, cfg.heads))
    h = T.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"], cfg.ln_eps)
    h = _linear(T.gelu(_linear(h, params, pre + "mlp.fc1")), params, pre + "mlp.fc2")
    return T.add(x, h)


def forward(tokens: Tensor, params: dict[str, Tensor], cfg: ViTConfig, capture: dict | None = None) -> TokenSequence:
    """Run the transformer blocks on ``(n + 1, D)`` or ``(B, n + 1, D)`` tokens.

    If ``capture`` is given, ``capture["final_block_input"]`` receives the
    tensor entering the last block (the tokens themselves when depth is 0).
    """
    single = tokens.ndim == 2
    x = T.reshape(tokens, (1,) + tokens.shape) if single else tokens
    if x.shape[-1] != cfg.embed_dim:
        raise T.ShapeError(f"forward: tokens {tokens.shape} do not have embed_dim {cfg.embed_dim}")
    for i in range(cfg.depth):
        if capture is not None and i == cfg.depth - 1:
            capture["final_block_input"] = x
        x = block(x, params, i, cfg)
        T.check_finite(x, f"transformer block {i}")
    if capture is not None and cfg.depth == 0:
        capture["final_block_input"] = x
    if single:
        x = T.reshape(x, x.shape[1:])
    return TokenSequence(cls=x[..., 0, :], patch_tokens=x[..., 1:, :])


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """One JSON header line, then every tensor as little-endian float64 in header order."""
    entries, offset, chunks = [], 0, []
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": CHECKPOINT_MAGIC, "meta": meta or {}, "tensors": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise IOError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IOError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format") != CHECKPOINT_MAGIC:
        raise IOError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    data = blob[nl + 1:]
    params = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(data):
            raise IOError(f"{path}: tensor {e['name']} extends past end of file")
        arr = np.frombuffer(data[e["offset"]:end], dtype="<f8").astype(np.float64).reshape(e["shape"])
        params[e["name"]] = Tensor(arr, requires_grad=True)
    return params, header["meta"]


def config_dict(cfg) -> dict:
    return asdict(cfg)
