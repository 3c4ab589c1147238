"""Full model: CNN embedder -> frozen transformer (global) + shapelet network
(local) -> concatenated joint representation -> linear output head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import diffnum as dn
from .backbone import GROUP_NAMES as BACKBONE_GROUPS
from .backbone import Backbone, BackboneConfig, FreezePolicy
from .embedder import Embedder, EmbedderConfig
from .shapelets import ShapeletConfig, ShapeletNet

GROUP_ORDER = ("embedder",) + BACKBONE_GROUPS + ("shapelet_bank", "local_projection", "output_head")
ATTN_FFN_GROUPS = ("attention_weights", "ffn_weights")
DEFAULT_TRAINABLE = ("embedder", "positional_embeddings", "layer_norms",
                     "shapelet_bank", "local_projection", "output_head")


@dataclass
class ModelConfig:
    class_count: int = 8
    frame_length: int = 256
    d_l: int = 64
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    shapelets: ShapeletConfig = field(default_factory=ShapeletConfig)
    trainable: tuple = DEFAULT_TRAINABLE
    normalize: str = "unit-power"
    seed: int = 0

    def validate(self):
        self.embedder.validate(self.frame_length)
        self.backbone.validate()
        self.shapelets.validate(self.frame_length)
        if self.embedder.out_channels != self.backbone.d_h:
            raise ValueError(f"embedder width {self.embedder.out_channels} != backbone d_h {self.backbone.d_h}")
        if self.embedder.seq_len(self.frame_length) > self.backbone.max_seq:
            raise ValueError("embedded sequence is longer than the backbone's max_seq")
        unknown = set(self.trainable) - set(GROUP_ORDER)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")

    @property
    def joint_dim(self) -> int:
        return self.backbone.d_h + self.d_l

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        d["shapelets"]["groups"] = [list(g) for g in self.shapelets.groups]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        emb = EmbedderConfig(**d.pop("embedder", {}))
        bb = BackboneConfig(**d.pop("backbone", {}))
        sh = ShapeletConfig(**d.pop("shapelets", {}))
        if "trainable" in d:
            d["trainable"] = tuple(d["trainable"])
        return cls(embedder=emb, backbone=bb, shapelets=sh, **d)


class Output(NamedTuple):
    z: torch.Tensor
    logits: torch.Tensor
    activations: torch.Tensor


class RFFModel(nn.Module):
    def __init__(self, config: ModelConfig, bank: list[np.ndarray] | None = None):
        super().__init__()
        config.validate()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.embedder = Embedder(config.embedder, gen)
        self.backbone = Backbone(config.backbone, FreezePolicy(
            tuple(g for g in BACKBONE_GROUPS if g in config.trainable)))
        self.shapelets = ShapeletNet(config.shapelets, config.d_l, bank, gen)
        D, C = config.joint_dim, config.class_count
        bound = 1.0 / math.sqrt(D)
        self.head_weight = nn.Parameter((torch.rand(C, D, generator=gen) * 2 - 1) * bound)
        self.head_bias = nn.Parameter((torch.rand(C, generator=gen) * 2 - 1) * bound)
        self.set_trainable(config.trainable)

    def set_trainable(self, names):
        names = tuple(names)
        self.config.trainable = names
        self.backbone.apply_policy(FreezePolicy(tuple(g for g in BACKBONE_GROUPS if g in names)))
        for g in self.parameter_groups():
            for t in g.tensors:
                t.requires_grad_(g.trainable)

    def parameter_groups(self) -> list[dn.ParameterGroup]:
        trainable = set(self.config.trainable)
        groups = [dn.ParameterGroup("embedder", list(self.embedder.parameters()), "embedder" in trainable)]
        for g in self.backbone.parameter_groups():
            groups.append(dn.ParameterGroup(g.name, g.tensors, g.name in trainable))
        sh = self.shapelets
        groups += [
            dn.ParameterGroup("shapelet_bank", list(sh.banks), "shapelet_bank" in trainable),
            dn.ParameterGroup("local_projection", [sh.proj_weight, sh.proj_bias], "local_projection" in trainable),
            dn.ParameterGroup("output_head", [self.head_weight, self.head_bias], "output_head" in trainable),
        ]
        return groups

    def named_groups(self) -> list[tuple[str, str, torch.Tensor]]:
        """(group, parameter name, tensor) for every parameter, in a stable order."""
        owner = {}
        for g in self.parameter_groups():
            for t in g.tensors:
                owner[id(t)] = g.name
        return [(owner[id(p)], n, p) for n, p in self.named_parameters()]

    def global_feature(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(self.embedder(x))

    def forward(self, x: torch.Tensor) -> Output:
        if x.dim() == 2:
            x = x[None]
        z_g = self.global_feature(x)
        a, z_l = self.shapelets(x)
        z = dn.concat([z_g, z_l], axis=1)
        logits = dn.linear(z, self.head_weight, self.head_bias)
        return Output(z, logits, a)


def as_input(frames) -> torch.Tensor:
    """Frames (N, 2, T) array, Dataset or IQFrame -> float64 tensor."""
    if isinstance(frames, torch.Tensor):
        return frames.to(dn.DTYPE)
    arr = getattr(frames, "frames", None)
    if arr is None:
        arr = getattr(frames, "samples", frames)
    return torch.as_tensor(np.asarray(arr, dtype=np.float64))


def forward_joint(model: RFFModel, frames, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Joint representations and logits for a stack of frames, no gradient."""
    x = as_input(frames)
    if x.dim() == 2:
        x = x[None]
    zs, ls = [], []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out = model(x[i:i + batch_size])
            zs.append(out.z.numpy())
            ls.append(out.logits.numpy())
    if not zs:
        return np.zeros((0, model.config.joint_dim)), np.zeros((0, model.config.class_count))
    return np.concatenate(zs), np.concatenate(ls)


def census(config: ModelConfig) -> dict[str, int]:
    """Analytic element count per parameter group, without building the model."""
    e, b, s = config.embedder, config.backbone, config.shapelets
    chans = [2] + [e.hidden_channels] * (e.layer_count - 1) + [e.out_channels]
    emb = sum(co * ci * e.kernel_size + co for ci, co in zip(chans[:-1], chans[1:]))
    d, ff, n = b.d_h, b.ff_width, b.layer_count
    counts = {
        "embedder": emb,
        "positional_embeddings": b.max_seq * d,
        "layer_norms": n * 4 * d + 2 * d,
        "attention_weights": n * (3 * d * d + 3 * d + d * d + d),
        "ffn_weights": n * (ff * d + ff + d * ff + d),
        "shapelet_bank": sum(m * 2 * l for m, l in s.groups),
        "local_projection": s.K * config.d_l + config.d_l,
        "output_head": config.joint_dim * config.class_count + config.class_count,
    }
    return counts


def census_ratio(config: ModelConfig) -> tuple[int, int, float]:
    counts = census(config)
    total = sum(counts.values())
    trainable = sum(v for k, v in counts.items() if k in config.trainable)
    return trainable, total, trainable / total
