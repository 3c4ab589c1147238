"""Convolutional input embedding: (B, 2, 256) I/Q -> (B, 64, d_h) tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import diffnum as dn


@dataclass
class EmbedderConfig:
    kernel_size: int = 5
    layer_count: int = 2
    stride: int = 2
    hidden_channels: int = 64
    out_channels: int = 64  # d_h
    activation: str = "gelu"

    def validate(self, frame_length: int = 256):
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for symmetric same-padding")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.layer_count < 1:
            raise ValueError("need at least one conv layer")
        if frame_length % (self.stride ** self.layer_count):
            raise ValueError("frame length not divisible by the total stride")

    def seq_len(self, frame_length: int = 256) -> int:
        return frame_length // (self.stride ** self.layer_count)

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for _ in range(self.layer_count):
            rf += (self.kernel_size - 1) * jump
            jump *= self.stride
        return rf


class Embedder(nn.Module):
    def __init__(self, config: EmbedderConfig, generator: torch.Generator | None = None):
        super().__init__()
        config.validate()
        self.config = config
        chans = [2] + [config.hidden_channels] * (config.layer_count - 1) + [config.out_channels]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            std = 1.0 / math.sqrt(c_in * config.kernel_size)
            w = torch.randn(c_out, c_in, config.kernel_size, generator=generator) * std
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(c_out)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x[None]
        if x.dim() != 3 or x.shape[1] != 2:
            raise ValueError(f"expected frames of shape (B, 2, T), got {tuple(x.shape)}")
        pad = self.config.kernel_size // 2
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dn.conv1d(h, w, b, stride=self.config.stride, padding=pad)
            if i < n - 1:
                h = dn.gelu(h)
        return h.transpose(1, 2)
