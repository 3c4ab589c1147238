"""Pre-norm transformer encoder standing in for a pre-trained language model.

Only positional embeddings and layer-norm parameters are trainable by
default; attention and feed-forward weights stay frozen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import diffnum as dn
from .tensorio import TensorFileError, read_tensors, write_tensors

GROUP_NAMES = ("positional_embeddings", "layer_norms", "attention_weights", "ffn_weights")


@dataclass
class BackboneConfig:
    layer_count: int = 2
    d_h: int = 64
    head_count: int = 4
    ff_width: int = 256
    max_seq: int = 64
    seed: int = 0
    pooling: str = "mean"

    def validate(self):
        if self.d_h % self.head_count:
            raise ValueError(f"d_h={self.d_h} is not divisible by head_count={self.head_count}")
        if self.max_seq < 64:
            raise ValueError("max_seq must be at least 64")
        if self.pooling not in ("mean", "first"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


@dataclass
class FreezePolicy:
    trainable: tuple = ("positional_embeddings", "layer_norms")

    @classmethod
    def all_frozen(cls) -> "FreezePolicy":
        return cls(())

    @classmethod
    def all_trainable(cls) -> "FreezePolicy":
        return cls(GROUP_NAMES)


class Block(nn.Module):
    def __init__(self, d: int, heads: int, ff: int, gen: torch.Generator):
        super().__init__()
        self.heads = heads
        self.ln1_gamma = nn.Parameter(torch.ones(d))
        self.ln1_beta = nn.Parameter(torch.zeros(d))
        self.w_qkv = nn.Parameter(torch.randn(3 * d, d, generator=gen) / math.sqrt(d))
        self.b_qkv = nn.Parameter(torch.zeros(3 * d))
        self.w_out = nn.Parameter(torch.randn(d, d, generator=gen) / math.sqrt(d))
        self.b_out = nn.Parameter(torch.zeros(d))
        self.ln2_gamma = nn.Parameter(torch.ones(d))
        self.ln2_beta = nn.Parameter(torch.zeros(d))
        self.w_ff1 = nn.Parameter(torch.randn(ff, d, generator=gen) / math.sqrt(d))
        self.b_ff1 = nn.Parameter(torch.zeros(ff))
        self.w_ff2 = nn.Parameter(torch.randn(d, ff, generator=gen) / math.sqrt(ff))
        self.b_ff2 = nn.Parameter(torch.zeros(d))

    def attention(self, h: torch.Tensor) -> torch.Tensor:
        B, L, d = h.shape
        q, k, v = dn.linear(h, self.w_qkv, self.b_qkv).split(d, dim=-1)
        split = lambda t: t.reshape(B, L, self.heads, d // self.heads).transpose(1, 2)  # noqa: E731
        o = dn.scaled_dot_product_attention(split(q), split(k), split(v))
        return dn.linear(o.transpose(1, 2).reshape(B, L, d), self.w_out, self.b_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(dn.layer_norm(x, self.ln1_gamma, self.ln1_beta))
        h = dn.layer_norm(x, self.ln2_gamma, self.ln2_beta)
        return x + dn.linear(dn.gelu(dn.linear(h, self.w_ff1, self.b_ff1)), self.w_ff2, self.b_ff2)


def param_group_of(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "positional":
        return "positional_embeddings"
    if "gamma" in leaf or "beta" in leaf:
        return "layer_norms"
    if leaf in ("w_qkv", "b_qkv", "w_out", "b_out"):
        return "attention_weights"
    if leaf.startswith(("w_ff", "b_ff")):
        return "ffn_weights"
    raise KeyError(name)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, policy: FreezePolicy | None = None):
        super().__init__()
        config.validate()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.positional = nn.Parameter(torch.randn(config.max_seq, config.d_h, generator=gen) * 0.02)
        self.blocks = nn.ModuleList(
            Block(config.d_h, config.head_count, config.ff_width, gen) for _ in range(config.layer_count))
        self.lnf_gamma = nn.Parameter(torch.ones(config.d_h))
        self.lnf_beta = nn.Parameter(torch.zeros(config.d_h))
        self.policy = policy or FreezePolicy()
        self.apply_policy(self.policy)

    def apply_policy(self, policy: FreezePolicy):
        unknown = set(policy.trainable) - set(GROUP_NAMES)
        if unknown:
            raise ValueError(f"unknown backbone groups {sorted(unknown)}")
        self.policy = policy
        for name, p in self.named_parameters():
            p.requires_grad_(param_group_of(name) in policy.trainable)

    def parameter_groups(self) -> list[dn.ParameterGroup]:
        groups = {g: dn.ParameterGroup(g, [], g in self.policy.trainable) for g in GROUP_NAMES}
        for name, p in self.named_parameters():
            groups[param_group_of(name)].tensors.append(p)
        return list(groups.values())

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Encode (B, l_seq, d_h) tokens into a pooled (B, d_h) global feature."""
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens[None]
        L = tokens.shape[1]
        if L > self.config.max_seq:
            raise ValueError(f"sequence length {L} exceeds max_seq {self.config.max_seq}")
        if tokens.shape[2] != self.config.d_h:
            raise ValueError(f"token width {tokens.shape[2]} != d_h {self.config.d_h}")
        h = tokens + self.positional[:L]
        for block in self.blocks:
            h = block(h)
        h = dn.layer_norm(h, self.lnf_gamma, self.lnf_beta)
        z = dn.mean(h, axis=1) if self.config.pooling == "mean" else h[:, 0]
        return z[0] if squeeze else z

    encode = forward

    def export_weights(self, path):
        write_tensors(path, [(n, p.detach().numpy(), {}) for n, p in self.named_parameters()],
                      {"kind": "backbone", "d_h": self.config.d_h, "layer_count": self.config.layer_count})


def import_weights(backbone: Backbone, path) -> Backbone:
    """Replace backbone weights from a tensor file, then re-apply the freeze policy."""
    tensors, meta = read_tensors(path)
    if meta.get("kind", "backbone") != "backbone":
        raise TensorFileError(f"{path}: not a backbone weight file")
    own = dict(backbone.named_parameters())
    loaded = {name: arr for name, arr, _ in tensors}
    missing = set(own) - set(loaded)
    if missing:
        raise TensorFileError(f"{path}: missing tensors {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in own.items():
            arr = loaded[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise TensorFileError(f"{path}: shape mismatch for {name}: {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.asarray(arr)))
    backbone.apply_policy(backbone.policy)
    return backbone


def trainable_ratio(groups) -> float:
    """Trainable element count over total element count across ``groups``."""
    total = sum(g.size for g in groups)
    return sum(g.size for g in groups if g.trainable) / total if total else 0.0
