"""Training objectives for the any-to-any perturbation generator.

All three components are cosine averages, so each lies in [-1, 1]:

* perceptual: negative framewise cosine between original and perturbed
  log filterbank frames, pooled over every frame of every utterance;
* angular: mean cosine between original and adversarial embeddings;
* batch mean: negative mean cosine between each adversarial embedding and
  the batch average (the pseudo-speaker).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

NORM_EPS = 1e-8


class DegenerateBatchError(ValueError):
    """Raised when a vector that must be nonzero (embedding, frame, pseudo-speaker) vanishes."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.15
    gamma: float = 0.35

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-9:
            raise ValueError("loss weights must sum to 1")

    @classmethod
    def no_batch_mean(cls) -> "LossWeights":
        return cls(0.5, 0.5, 0.0)


@dataclass
class BatchLossBreakdown:
    perceptual: torch.Tensor
    angular: torch.Tensor
    batch_mean: torch.Tensor
    total: torch.Tensor
    pseudo_speaker: torch.Tensor
    K: int

    def scalars(self) -> dict:
        return {
            "perceptual": self.perceptual.item(),
            "angular": self.angular.item(),
            "batch_mean": self.batch_mean.item(),
            "total": self.total.item(),
        }


def cosine_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine of two ``[..., D]`` tensors; zero-norm rows are an error."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na < NORM_EPS).any()) or bool((nb < NORM_EPS).any()):
        raise DegenerateBatchError("zero-norm vector in cosine")
    return (a * b).sum(-1) / (na * nb)


def angular_loss(z: torch.Tensor, z_adv: torch.Tensor) -> torch.Tensor:
    """Mean cosine between paired original and adversarial embeddings ``[K, D]``."""
    z, z_adv = _as_batch(z), _as_batch(z_adv)
    return cosine_rows(z, z_adv).mean()


def perceptual_loss(feats: Sequence[torch.Tensor] | torch.Tensor, feats_adv: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Negative framewise cosine pooled as ``1 / sum_k T_k`` over all frames.

    Accepts either a rectangular ``[K, T, F]`` tensor or a list of ``[T_k, F]``
    tensors with per-utterance frame counts.
    """
    if isinstance(feats, torch.Tensor) and feats.dim() == 3:
        feats, feats_adv = list(feats.unbind(0)), list(feats_adv.unbind(0))
    if isinstance(feats, torch.Tensor):
        feats, feats_adv = [feats], [feats_adv]
    if len(feats) != len(feats_adv) or not feats:
        raise ValueError("need equal, nonzero numbers of original and perturbed utterances")
    total, frames = None, 0
    for f, g in zip(feats, feats_adv):
        if f.shape != g.shape:
            raise ValueError(f"frame-count mismatch within pair: {tuple(f.shape)} vs {tuple(g.shape)}")
        s = cosine_rows(f, g).sum()
        total = s if total is None else total + s
        frames += f.shape[0]
    return -total / frames


def batch_mean_loss(z_adv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(loss, pseudo_speaker)`` where the pseudo-speaker is the batch mean embedding."""
    z_adv = _as_batch(z_adv)
    mu = z_adv.mean(0)
    if torch.linalg.vector_norm(mu).item() < NORM_EPS:
        raise DegenerateBatchError("pseudo-speaker has zero norm (antipodal batch)")
    loss = -cosine_rows(z_adv, mu.expand_as(z_adv)).mean()
    return loss, mu


def total_loss(
    feats: torch.Tensor,
    feats_adv: torch.Tensor,
    z: torch.Tensor,
    z_adv: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> BatchLossBreakdown:
    """Weighted sum of the three components.

    ``feats`` and ``z`` come from the unperturbed input and are treated as
    constants; only the perturbed branch carries gradient.
    """
    if isinstance(feats, torch.Tensor):
        feats = feats.detach()
    else:
        feats = [f.detach() for f in feats]
    z = _as_batch(z).detach()
    z_adv = _as_batch(z_adv)
    perc = perceptual_loss(feats, feats_adv)
    ang = angular_loss(z, z_adv)
    bm, mu = batch_mean_loss(z_adv)
    total = weights.alpha * perc + weights.beta * ang + weights.gamma * bm
    return BatchLossBreakdown(perc, ang, bm, total, mu, z_adv.shape[0])


def _as_batch(z) -> torch.Tensor:
    z = torch.as_tensor(z)
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if z.dim() != 2 or z.shape[0] < 1:
        raise ValueError("embeddings must be [K, D] with K >= 1")
    return z
