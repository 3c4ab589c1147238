"""Learnable variable-length 2-D shapelets.

Each shapelet is a 2 x L_k matrix spanning both I and Q rows.  A frame is
compared against every length-L_k window; the Euclidean distances are
pooled with a softmax over windows into one non-positive activation per
shapelet, and the K activations are projected to a d_l local feature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import diffnum as dn

DEFAULT_GROUPS = ((5, 8), (5, 16), (3, 32))
# floor under squared distances in the batched path; keeps sqrt differentiable at exact matches
_D2_FLOOR = 1e-24


@dataclass
class ShapeletConfig:
    groups: tuple = DEFAULT_GROUPS  # (count M_i, length L_i)
    length_normalize: bool = False
    init_jitter: float = 0.01

    def __post_init__(self):
        self.groups = tuple((int(m), int(l)) for m, l in self.groups)

    @property
    def K(self) -> int:
        return sum(m for m, _ in self.groups)

    @property
    def lengths(self) -> list[int]:
        return [l for m, l in self.groups for _ in range(m)]

    def validate(self, T: int = 256):
        if not self.groups:
            raise ValueError("shapelet config has no groups")
        for m, l in self.groups:
            if m < 1 or l < 2 or l > T:
                raise ValueError(f"invalid shapelet group (M={m}, L={l}) for T={T}")


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().numpy()
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def sliding_distances(frame, shapelet) -> np.ndarray:
    """Frobenius distance between ``shapelet`` (2 x L) and every length-L window of ``frame`` (2 x T)."""
    x, s = _as_array(frame), _as_array(shapelet)
    L, T = s.shape[1], x.shape[1]
    if L > T:
        raise ValueError(f"shapelet length {L} exceeds frame length {T}")
    windows = np.lib.stride_tricks.sliding_window_view(x, L, axis=1)  # (2, J, L)
    diff = windows - s[:, None, :]
    return np.sqrt(np.einsum("cjl,cjl->j", diff, diff))


def soft_activation(d) -> float | torch.Tensor:
    """Softmax-pooled negative distance: sum_j softmax(-d)_j * (-d_j)."""
    if isinstance(d, torch.Tensor):
        w = dn.softmax(-d, axis=-1)
        return (w * -d).sum(dim=-1)
    d = np.asarray(d, dtype=np.float64)
    e = np.exp(-(d - d.min()))
    w = e / e.sum()
    return float(np.sum(w * -d))


def best_match(frame, shapelet) -> tuple[int, float]:
    """Start index of the closest window (lowest index on ties) and its distance."""
    d = sliding_distances(frame, shapelet)
    t = int(np.argmin(d))
    return t, float(d[t])


class ShapeletNet(nn.Module):
    """Shapelet bank plus the local projection K -> d_l."""

    def __init__(self, config: ShapeletConfig, d_l: int = 64, bank: list[np.ndarray] | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        config.validate()
        self.config = config
        self.d_l = d_l
        self.banks = nn.ParameterList()
        k = 0
        for m, l in config.groups:
            if bank is not None:
                vals = torch.as_tensor(np.stack([bank[k + i] for i in range(m)]), dtype=dn.DTYPE)
            else:
                vals = torch.randn(m, 2, l, generator=generator)
            self.banks.append(nn.Parameter(vals.clone()))
            k += m
        K = config.K
        bound = 1.0 / math.sqrt(K)
        self.proj_weight = nn.Parameter((torch.rand(d_l, K, generator=generator) * 2 - 1) * bound)
        self.proj_bias = nn.Parameter((torch.rand(d_l, generator=generator) * 2 - 1) * bound)

    @property
    def K(self) -> int:
        return self.config.K

    def shapelet(self, k: int) -> np.ndarray:
        """Values of shapelet ``k`` (bank order) as a 2 x L_k array copy."""
        for g in self.banks:
            if k < g.shape[0]:
                return g[k].detach().numpy().copy()
            k -= g.shape[0]
        raise IndexError("shapelet index out of range")

    def shapelet_lengths(self) -> list[int]:
        return self.config.lengths

    def distances(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per group, (B, M, J) window distances computed as ||w||^2 - 2<w, S> + ||S||^2."""
        out = []
        energy = (x * x).sum(dim=1, keepdim=True)  # (B, 1, T)
        for S in self.banks:
            L = S.shape[-1]
            win = F.avg_pool1d(energy, L, stride=1) * L  # (B, 1, J)
            cross = dn.conv1d(x, S)  # (B, M, J)
            d2 = win - 2 * cross + (S * S).sum(dim=(1, 2))[None, :, None]
            d = torch.sqrt(torch.clamp_min(d2, _D2_FLOOR))
            if self.config.length_normalize:
                d = d / math.sqrt(2 * L)
            out.append(d)
        return out

    def activations(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 2, T) frames -> (B, K) activation matrix in bank order."""
        if x.dim() == 2:
            x = x[None]
        return dn.concat([soft_activation(d) for d in self.distances(x)], axis=1)

    def project(self, a: torch.Tensor) -> torch.Tensor:
        if a.shape[-1] != self.K:
            raise ValueError(f"activation length {a.shape[-1]} != K={self.K}")
        return dn.linear(a, self.proj_weight, self.proj_bias)

    def forward(self, x: torch.Tensor):
        a = self.activations(x)
        return a, self.project(a)


def init_bank(config: ShapeletConfig, frames, seed: int = 0) -> list[np.ndarray]:
    """Seed each shapelet from a random window of a random training frame plus N(0, jitter^2)."""
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    if len(frames) == 0:
        raise ValueError("cannot initialize shapelets from an empty training set")
    rng = np.random.default_rng(seed)
    T = frames.shape[2]
    bank = []
    for L in config.lengths:
        i = rng.integers(len(frames))
        t = rng.integers(T - L + 1)
        bank.append(frames[i, :, t:t + L] + rng.normal(0, config.init_jitter, size=(2, L)))
    return bank


def activation_vector(frame, bank: list[np.ndarray]) -> np.ndarray:
    """Reference activations of one frame against a list of shapelets (exact windows)."""
    return np.array([soft_activation(sliding_distances(frame, s)) for s in bank])
