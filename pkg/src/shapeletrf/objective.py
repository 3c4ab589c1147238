"""Composite loss: cross-entropy + lambda1 * L1 sparsity + lambda2 * diversity."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from . import diffnum as dn

_COL_NORM_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda1: float = 0.0001
    lambda2: float = 0.0001

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def cls_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    return dn.cross_entropy_with_logits(logits, labels)


def sparsity_loss(A: torch.Tensor) -> torch.Tensor:
    """Mean over rows of the L1 norm of each activation vector."""
    return dn.mean(dn.l1_norm(A, axis=1))


def diversity_loss(A: torch.Tensor) -> torch.Tensor:
    """Mean absolute off-diagonal cosine similarity between shapelet columns of A (B x K).

    Columns with norm below 1e-12 are treated as zero vectors.
    """
    K = A.shape[1]
    if K < 2:
        raise ValueError("diversity loss needs at least two shapelets")
    norms = torch.sqrt((A * A).sum(dim=0))
    alive = norms >= _COL_NORM_FLOOR
    safe = torch.where(alive, norms, torch.ones_like(norms))
    An = torch.where(alive[None, :], A / safe, torch.zeros_like(A))
    # |cos| can exceed 1 by an ulp after rounding
    C = torch.clamp(dn.abs(dn.matmul(An.T, An)), max=1.0)
    off_diag = 1.0 - torch.eye(K, dtype=A.dtype)
    return (C * off_diag).sum() / (K * (K - 1))


def total_loss(logits, labels, A, weights: LossWeights | None = None, parts: bool = False):
    w = weights or LossWeights()
    l_cls = cls_loss(logits, labels)
    l_spr = sparsity_loss(A)
    l_div = diversity_loss(A)
    total = l_cls + w.lambda1 * l_spr + w.lambda2 * l_div
    if parts:
        return total, {"cls": l_cls, "spr": l_spr, "div": l_div}
    return total
