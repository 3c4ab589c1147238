"""Finite-difference sweep over every differentiable op and the full training loss."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import diffnum as dn
from .model import ModelConfig, RFFModel
from .objective import LossWeights, total_loss
from .shapelets import init_bank


def _t(rng, *shape, grad=True, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.1)  # keep |x| kinks out of the difference stencil
    return dn.tensor(x, requires_grad=grad)


def _op_cases():
    """name -> builder(rng) returning (scalar_fn, params)."""
    def matmul(r):
        a, b = _t(r, 3, 4), _t(r, 4, 2)
        return lambda: (dn.matmul(a, b) ** 2).sum(), [a, b]

    def linear(r):
        x, w, b = _t(r, 3, 4), _t(r, 5, 4), _t(r, 5)
        return lambda: (dn.linear(x, w, b) ** 2).sum(), [x, w, b]

    def conv1d(r):
        x, w, b = _t(r, 2, 3, 11), _t(r, 4, 3, 5), _t(r, 4)
        return lambda: (dn.conv1d(x, w, b, stride=2, padding=2) ** 2).sum(), [x, w, b]

    def layer_norm(r):
        x, g, b, c = _t(r, 3, 6), _t(r, 6), _t(r, 6), _t(r, 3, 6, grad=False)
        return lambda: (dn.layer_norm(x, g, b) * c).sum(), [x, g, b]

    def softmax(r):
        x, c = _t(r, 3, 5), _t(r, 3, 5, grad=False)
        return lambda: (dn.softmax(x) * c).sum(), [x]

    def log_softmax(r):
        x, c = _t(r, 3, 5), _t(r, 3, 5, grad=False)
        return lambda: (dn.log_softmax(x) * c).sum(), [x]

    def gelu(r):
        x = _t(r, 4, 3)
        return lambda: dn.gelu(x).sum(), [x]

    def relu(r):
        x = _t(r, 4, 3, away_from_zero=True)
        return lambda: (dn.relu(x) ** 2).sum(), [x]

    def mean(r):
        x = _t(r, 4, 3)
        return lambda: (dn.mean(x, axis=0) ** 2).sum(), [x]

    def concat(r):
        a, b, c = _t(r, 2, 3), _t(r, 2, 2), _t(r, 2, 5, grad=False)
        return lambda: ((dn.concat([a, b], axis=1) * c) ** 2).sum(), [a, b]

    def attention(r):
        q, k, v = _t(r, 2, 4, 3), _t(r, 2, 4, 3), _t(r, 2, 4, 3)
        return lambda: (dn.scaled_dot_product_attention(q, k, v) ** 2).sum(), [q, k, v]

    def cross_entropy(r):
        x, y = _t(r, 4, 3), r.integers(0, 3, size=4)
        return lambda: dn.cross_entropy_with_logits(x, y), [x]

    def l1_norm(r):
        x = _t(r, 3, 4, away_from_zero=True)
        return lambda: (dn.l1_norm(x, axis=1) ** 2).sum(), [x]

    def abs_(r):
        x = _t(r, 3, 4, away_from_zero=True)
        return lambda: (dn.abs(x) ** 3).sum(), [x]

    def elementwise(r):
        a = _t(r, 5)
        b = dn.tensor(r.uniform(0.5, 2.0, size=5), requires_grad=True)
        return lambda: dn.div(dn.mul(dn.add(a, b), dn.sub(a, b)), b).sum(), [a, b]

    return {"matmul": matmul, "linear": linear, "conv1d": conv1d, "layer_norm": layer_norm,
            "softmax": softmax, "log_softmax": log_softmax, "gelu": gelu, "relu": relu, "mean": mean,
            "concat": concat, "scaled_dot_product_attention": attention,
            "cross_entropy_with_logits": cross_entropy, "l1_norm": l1_norm, "abs": abs_,
            "add/sub/mul/div": elementwise}


OP_CASES = _op_cases()


@dataclass
class GradcheckReport:
    errors: dict  # case name -> max relative error
    seconds: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def loss_case(config: ModelConfig, seed: int = 0, batch: int = 2, weights: LossWeights | None = None):
    """Full composite loss of a freshly initialized model on random frames, over its trainable tensors."""
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(batch, 2, config.frame_length))
    model = RFFModel(config, init_bank(config.shapelets, frames, seed))
    labels = rng.integers(0, config.class_count, size=batch)
    # larger sparsity/diversity weights than the defaults so those terms register in the differences
    w = weights or LossWeights(0.01, 0.1)
    x = torch.as_tensor(frames)

    def fn():
        out = model(x)
        return total_loss(out.logits, labels, out.activations, w)

    params = [p for g in model.parameter_groups() if g.trainable for p in g.tensors]
    return fn, params


def run_gradcheck(config: ModelConfig, seed: int = 0, repeats: int = 10, max_coords: int = 8,
                  h: float = 1e-4) -> GradcheckReport:
    t0 = time.time()
    errors = {}
    for name, build in OP_CASES.items():
        worst = 0.0
        for r in range(repeats):
            fn, params = build(np.random.default_rng([seed, r]))
            worst = max(worst, dn.finite_diff_check(fn, params, h=h))
        errors[name] = worst
    fn, params = loss_case(config, seed)
    errors["total_loss"] = dn.finite_diff_check(fn, params, h=h, max_coords=max_coords, seed=seed)
    return GradcheckReport(errors, time.time() - t0)
