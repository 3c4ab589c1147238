"""Differentiable numerics: the op set the model uses, parameter groups with
freeze flags, Adam, and a central-difference gradient checker.

Tensors are ``torch.Tensor`` in float64; torch's autograd records the
per-step tape.  Ops delegate to torch kernels with exact reverse-mode
gradients; the explicit formulas they compute are stated per op.
"""
from __future__ import annotations

import builtins
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5

torch.set_default_dtype(DTYPE)


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def _check(cond: bool, msg: str):
    if not cond:
        raise ValueError(msg)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a.shape[-1] == b.shape[-2] if b.dim() > 1 else a.shape[-1] == b.shape[0],
           f"matmul shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    _check(x.shape[-1] == weight.shape[1], f"linear expects {weight.shape[1]} inputs, got {x.shape[-1]}")
    return F.linear(x, weight, bias)


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation over the last axis; x is (B, C_in, T), weight (C_out, C_in, k)."""
    _check(x.dim() == 3 and weight.dim() == 3, "conv1d expects 3-d input and weight")
    _check(x.shape[1] == weight.shape[1], f"conv1d channel mismatch {x.shape[1]} vs {weight.shape[1]}")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    """(x - mean) / sqrt(var + eps) * gamma + beta over the last axis (biased variance)."""
    _check(x.shape[-1] > 0, "layer_norm over a zero-length axis")
    _check(gamma.shape == x.shape[-1:] and beta.shape == x.shape[-1:], "layer_norm parameter shape mismatch")
    return F.layer_norm(x, x.shape[-1:], gamma, beta, eps)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-subtracted softmax (the fused kernel subtracts the max internally)."""
    return F.softmax(x, dim=axis)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GELU, 0.5 x (1 + erf(x / sqrt 2))."""
    return F.gelu(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def mean(x: torch.Tensor, axis: int | None = None) -> torch.Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def concat(xs: Sequence[torch.Tensor], axis: int = -1) -> torch.Tensor:
    return torch.cat(list(xs), dim=axis)


def scaled_dot_product_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes (no masking)."""
    _check(q.shape[-1] == k.shape[-1] and k.shape[-2] == v.shape[-2], "attention shape mismatch")
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return matmul(softmax(scores, axis=-1), v)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return F.log_softmax(x, dim=axis)


def cross_entropy_with_logits(logits: torch.Tensor, labels) -> torch.Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    _check(logits.dim() == 2 and logits.shape[0] == labels.shape[0], "logits/labels shape mismatch")
    C = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label outside [0, {C})")
    lp = log_softmax(logits, axis=1)
    return -lp.gather(1, labels[:, None]).mean()


def l1_norm(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return x.abs().sum(dim=axis)


def abs(x: torch.Tensor) -> torch.Tensor:  # noqa: A001 - mirrors the op name
    return x.abs()


def add(a, b):
    return a + b


def sub(a, b):
    return a - b


def mul(a, b):
    return a * b


def div(a, b):
    return a / b


OPS = {
    "matmul": matmul, "conv1d": conv1d, "linear": linear, "layer_norm": layer_norm,
    "softmax": softmax, "gelu": gelu, "relu": relu, "mean": mean, "concat": concat,
    "scaled_dot_product_attention": scaled_dot_product_attention,
    "cross_entropy_with_logits": cross_entropy_with_logits, "l1_norm": l1_norm, "abs": abs,
    "add": add, "sub": sub, "mul": mul, "div": div,
}


@dataclass
class ParameterGroup:
    name: str
    tensors: list[torch.Tensor]
    trainable: bool = True

    @property
    def size(self) -> int:
        return sum(t.numel() for t in self.tensors)


def check_partition(groups: Sequence[ParameterGroup]):
    seen: set[int] = set()
    for g in groups:
        for t in g.tensors:
            if id(t) in seen:
                raise ValueError(f"tensor appears in more than one group (second: {g.name})")
            seen.add(id(t))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(groups: Sequence[ParameterGroup], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, state: AdamState | None = None) -> AdamState:
    """One bias-corrected Adam update of every trainable group, in place.

    Frozen groups are never touched.  Moment buffers are keyed by
    (group name, tensor index).
    """
    state = state if state is not None else AdamState()
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    with torch.no_grad():
        for g in groups:
            if not g.trainable:
                continue
            for i, p in enumerate(g.tensors):
                if p.grad is None:
                    raise ValueError(f"missing gradient for trainable tensor {g.name}[{i}]")
                key = (g.name, i)
                m = state.m.get(key)
                if m is None:
                    m = state.m[key] = torch.zeros_like(p)
                    state.v[key] = torch.zeros_like(p)
                v = state.v[key]
                grad = p.grad
                m.mul_(beta1).add_(grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
                p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


def _rel_err(a: float, f: float) -> float:
    return builtins.abs(a - f) / max(builtins.abs(a), builtins.abs(f), 1e-8)


def finite_diff_check(scalar_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-4,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``scalar_fn`` must recompute its value from the current contents of
    ``params``.  With ``max_coords`` set, a seeded sample of at most that many
    coordinates per tensor is checked.
    """
    params = list(params)
    for p in params:
        p.grad = None
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    try:
        out = scalar_fn()
        if not torch.isfinite(out).all():
            raise ValueError("function value is not finite")
        grads = torch.autograd.grad(out, params, allow_unused=True)
        rng = np.random.default_rng(seed)
        worst = 0.0
        with torch.no_grad():
            for p, g in zip(params, grads):
                g = torch.zeros_like(p) if g is None else g
                flat = p.view(-1)
                n = flat.numel()
                coords = range(n) if max_coords is None or n <= max_coords else \
                    np.sort(rng.choice(n, size=max_coords, replace=False))
                for c in coords:
                    c = int(c)
                    orig = flat[c].item()
                    flat[c] = orig + h
                    fp = scalar_fn().item()
                    flat[c] = orig - h
                    fm = scalar_fn().item()
                    flat[c] = orig
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise ValueError("function value is not finite")
                    fd = (fp - fm) / (2 * h)
                    worst = max(worst, _rel_err(g.reshape(-1)[c].item(), fd))
        return worst
    finally:
        for p, r in zip(params, saved):
            p.requires_grad_(r)
