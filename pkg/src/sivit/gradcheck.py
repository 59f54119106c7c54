"""Registry of finite-difference gradient checks.

Each case is a zero-argument factory returning ``(f, inputs)``: ``f`` maps a
dict of named tensors to a scalar tensor, and every named input is checked
coordinate-by-coordinate against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backbone as bb
from . import heads as hd
from . import tensor as T
from .bagging import draw_permutation
from .model import SIViT
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    passed: bool
    seconds: float


def _weighted(rng):
    cache = {}

    def fixed(t):
        # same weights on every evaluation so f is a deterministic function
        if t.shape not in cache:
            cache[t.shape] = Tensor(rng.normal(size=t.shape))
        return T.tsum(T.mul(t, cache[t.shape]))

    return fixed


def _unary(build):
    def case(seed=0):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)))
        extra = build(rng)
        w = _weighted(rng)
        return (lambda d: w(extra(d["x"]))), {"x": x}
    return case


def op_cases() -> dict[str, Callable[..., tuple]]:
    def with_other(fn):
        return _unary(lambda rng: (lambda x, o=Tensor(rng.normal(size=(3, 4))): fn(x, o)))

    cases = {
        "add": with_other(T.add),
        "add_bias": _unary(lambda rng: (lambda x, b=Tensor(rng.normal(size=4)): T.add(x, b))),
        "sub": with_other(lambda x, o: T.sub(o, x)),
        "mul": with_other(T.mul),
        "matmul": _unary(lambda rng: (lambda x, w=Tensor(rng.normal(size=(4, 5))): x @ w)),
        "matmul_batched": _unary(lambda rng: (lambda x: T.reshape(x, (1, 3, 4)) @ T.reshape(T.transpose(x), (1, 4, 3)))),
        "exp": _unary(lambda rng: T.exp),
        "gelu": _unary(lambda rng: T.gelu),
        "softmax": _unary(lambda rng: (lambda x: T.softmax(x, axis=-1))),
        "log_softmax": _unary(lambda rng: T.log_softmax),
        "layer_norm": _unary(lambda rng: (lambda x, g=Tensor(rng.normal(size=4)), b=Tensor(rng.normal(size=4)):
                                          T.layer_norm(x, g, b))),
        "sum": _unary(lambda rng: (lambda x: T.tsum(x, axis=0))),
        "mean": _unary(lambda rng: (lambda x: T.mean(x, axis=1))),
        "reshape": _unary(lambda rng: (lambda x: T.reshape(x, (2, 6)))),
        "transpose": _unary(lambda rng: T.transpose),
        "index": _unary(lambda rng: (lambda x: x[1:, ::2])),
        "gather_rows": _unary(lambda rng: (lambda x: T.gather_rows(x, [2, 0, 2]))),
        "scatter_rows": _unary(lambda rng: (lambda x, perm=rng.permutation(3): T.scatter_rows(x, perm, 3))),
        "concat": with_other(lambda x, o: T.concat([x, o], axis=0)),
        "broadcast": _unary(lambda rng: (lambda x: T.broadcast_leading(x, (2,)))),
        "cross_entropy": _unary(lambda rng: (lambda x, y=rng.integers(0, 4, size=3): T.cross_entropy(x, y))),
        "mse": _unary(lambda rng: (lambda x, y=rng.normal(size=(3, 4)): T.mse(x, y))),
    }
    return cases


def toy_model(seed: int = 0, n_categories: int = 2, normalize: bool = True) -> SIViT:
    cfg = bb.ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2, mlp_ratio=2,
                       init_std=0.5, seed=seed)
    return SIViT(cfg, n_categories=n_categories, normalize_labels=normalize)


def sivit_loss_case(seed: int = 0):
    """Full SF + USF forward through a 2-block toy ViT and the weighted loss."""
    rng = np.random.default_rng(seed)
    model = toy_model(seed)
    b, n, pdim = 2, model.cfg.n_patches, model.cfg.patch_dim
    patches = rng.uniform(size=(b, n, pdim))
    record = draw_permutation(rng, (b, n))
    shuffled = record.apply(patches)
    k1 = model.n_categories + 1
    usf_soft, sf_soft = rng.uniform(size=(b, k1)), rng.uniform(size=(b, k1))
    labels = np.array([0, 1])
    weights = hd.HeadWeights(1.0, 1.0, 1.0)

    def f(params):
        model.params = params
        pred_sf = model.predict(shuffled, with_cls=False)
        pred_usf = model.predict(patches)
        total, _ = hd.composite_loss(pred_sf, pred_usf, sf_soft, usf_soft, labels, weights)
        return total

    return f, dict(model.params)


def check_case(name: str, factory, seed: int = 0, h: float = 1e-5) -> CheckResult:
    start = time.perf_counter()
    f, inputs = factory(seed)
    worst = 0.0
    for key, tensor in inputs.items():
        def g(x, key=key):
            return f({**inputs, key: x})
        worst = max(worst, T.grad_check(g, tensor, h))
    return CheckResult(name, worst, worst < TOLERANCE, time.perf_counter() - start)


def registry() -> dict[str, Callable]:
    cases = op_cases()
    cases["sivit_full_loss"] = sivit_loss_case
    return cases


def run_all(cases: dict[str, Callable] | None = None, seed: int = 0) -> list[CheckResult]:
    cases = registry() if cases is None else cases
    return [check_case(name, factory, seed) for name, factory in cases.items()]
