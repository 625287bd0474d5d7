"""Loss terms for both training stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch.nn import functional as F

PROB_EPS = 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    lambda_cl: float = 1.0
    lambda_mlm: float = 0.1

    def __post_init__(self):
        if not self.margin > 0:
            raise LossError("margin must be positive")
        if self.lambda_cl < 0 or self.lambda_mlm < 0:
            raise LossError("loss weights must be non-negative")


@dataclass
class LossReport:
    loss_mlm: float = 0.0
    loss_cl: float = 0.0
    loss_total: float = 0.0
    loss_cla: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(x) for x in asdict(self).values())


def mlm_loss(logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions; ``logits`` holds one row per masked token."""
    if logits.shape[0] == 0:
        raise LossError("mlm_loss needs at least one masked position")
    return F.cross_entropy(logits, target_ids, reduction="mean")


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite derivative at 0; identical vectors get distance 0 and zero gradient
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def contrastive_loss(
    v_a: torch.Tensor, v_b: torch.Tensor, label: torch.Tensor | float, margin: float = 1.0
) -> torch.Tensor:
    """Margin loss on Euclidean distance d: label*d^2 + (1-label)*max(0, margin-d)^2.

    Accepts single vectors or (B, k) batches; a batch returns the mean over pairs.
    """
    if v_a.shape != v_b.shape:
        raise LossError("contrastive_loss inputs must have the same shape")
    label = torch.as_tensor(label, dtype=v_a.dtype, device=v_a.device)
    sq = ((v_a - v_b) ** 2).sum(dim=-1)
    d = _safe_norm(sq)
    per_pair = label * sq + (1.0 - label) * torch.clamp(margin - d, min=0.0) ** 2
    return per_pair.mean() if per_pair.dim() else per_pair


def total_cl_loss(loss_cl, loss_mlm, cfg: LossConfig):
    return cfg.lambda_cl * loss_cl + cfg.lambda_mlm * loss_mlm


def classification_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over the batch. Callers clamp p away from 0 and 1."""
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=p.dtype)
    if bool(((p <= 0) | (p >= 1)).any()):
        raise LossError("probabilities must lie strictly inside (0, 1)")
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def clamp_probability(p: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)
