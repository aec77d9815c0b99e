"""Training objectives: denoising, class-contrastive, and prediction losses.

The three losses share the semantic latents computed once per batch. The
contrastive term is the symmetrized anchor form over a class-balanced batch:
every latent acts as an anchor, its same-class partners (self excluded) form
the numerator and all other latents the rest of the denominator, with
cosine similarities tempered by ``tau``. The prediction term trains through a
softmax relaxation of the neighbor vote, since the hard mode vote has zero
gradient; the hard vote is what gets reported as accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .schedule import NoiseSchedule, q_sample

__all__ = [
    "ContrastConfig",
    "ClassPartition",
    "DivergenceError",
    "diffusion_loss",
    "contrastive_loss",
    "soft_class_probabilities",
    "batch_soft_probabilities",
    "prediction_loss",
    "total_loss",
]

# Floor inside every log so exact-zero probabilities stay finite.
_LOG_FLOOR = 1e-12


class DivergenceError(RuntimeError):
    """A loss component became non-finite; the training step must abort."""


@dataclass(frozen=True)
class ContrastConfig:
    """Temperatures for the contrastive and soft-prediction terms."""

    tau: float = 0.5
    tau_pred: float = 0.1

    def __post_init__(self):
        if not (self.tau > 0.0 and self.tau_pred > 0.0):
            raise ValueError("temperatures must be strictly positive")


@dataclass(frozen=True)
class ClassPartition:
    """A class-balanced set of latents: M rows per class, d columns each."""

    first_class: torch.Tensor
    second_class: torch.Tensor

    def __post_init__(self):
        a, b = self.first_class, self.second_class
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("class latents must be 2-D (rows, latent_dim)")
        if a.shape != b.shape:
            raise ValueError("both classes must contribute the same M x d block")

    @property
    def rows_per_class(self) -> int:
        return int(self.first_class.shape[0])


def diffusion_loss(model, x0_batch, t_batch, noise_batch, z_batch, schedule: NoiseSchedule):
    """Mean squared error between predicted and injected noise.

    ``z_batch`` must be the semantic latents of ``x0_batch`` computed in the
    same graph so gradients reach the encoder through the conditioning path.
    Uses the per-element mean convention.
    """
    b = x0_batch.shape[0]
    if noise_batch.shape != x0_batch.shape:
        raise ValueError("noise batch shape must match x0 batch")
    if len(t_batch) != b or z_batch.shape[0] != b:
        raise ValueError("t and z batches must match the image batch size")
    x_t = q_sample(x0_batch, t_batch, noise_batch, schedule)
    eps_hat = model.predict_noise(x_t, t_batch, z_batch)
    return ((eps_hat - noise_batch) ** 2).mean()


def _cosine_matrix(latents: torch.Tensor) -> torch.Tensor:
    norms = latents.norm(dim=1, keepdim=True)
    if float(norms.min()) <= 0.0:
        bad = int(torch.argmin(norms))
        raise ValueError(f"latent row {bad} has zero norm; cosine similarity undefined")
    unit = latents / norms
    return unit @ unit.T


def contrastive_loss(partition: ClassPartition, config: ContrastConfig):
    """Symmetrized supervised-contrastive loss over a balanced batch.

    For each anchor, the loss is minus the log-fraction of tempered
    similarity mass on its same-class partners (self excluded) relative to
    all other latents; the mean runs over all 2M anchors.
    """
    m = partition.rows_per_class
    if m < 2:
        raise ValueError("need at least 2 latents per class")
    z = torch.cat([partition.first_class, partition.second_class], dim=0)
    n = 2 * m
    logits = _cosine_matrix(z) / config.tau
    labels = torch.zeros(n, dtype=torch.long, device=z.device)
    labels[m:] = 1
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    neg_inf = torch.tensor(float("-inf"), dtype=logits.dtype, device=z.device)
    pos_logits = torch.where(same & ~eye, logits, neg_inf)
    all_logits = torch.where(~eye, logits, neg_inf)
    loss_per_anchor = torch.logsumexp(all_logits, dim=1) - torch.logsumexp(pos_logits, dim=1)
    return loss_per_anchor.mean()


def soft_class_probabilities(z, neighbors, config: ContrastConfig):
    """Differentiable class probabilities from a K-neighbor list.

    ``neighbors`` holds (latent, label, similarity) triples; each neighbor
    votes with weight softmax(similarity / tau_pred). Returns a length-2
    probability tensor summing to 1.
    """
    if len(neighbors) == 0:
        raise ValueError("neighbor list must be non-empty")
    sims = torch.stack(
        [s if torch.is_tensor(s) else torch.tensor(float(s)) for _, _, s in neighbors]
    )
    labels = torch.tensor([int(y) for _, y, _ in neighbors], dtype=sims.dtype)
    weights = torch.softmax(sims / config.tau_pred, dim=0)
    p1 = (weights * labels).sum()
    return torch.stack([1.0 - p1, p1])


def batch_soft_probabilities(latents: torch.Tensor, labels: torch.Tensor, k: int,
                             tau_pred: float) -> torch.Tensor:
    """Vectorized soft probabilities with the batch as the neighbor pool.

    Each latent's own entry is excluded before the top-K selection. Returns
    a (B, 2) tensor of class probabilities; gradients flow through the
    similarities of the selected neighbors.
    """
    n = latents.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}] for a batch pool of {n}")
    sims = _cosine_matrix(latents)
    eye = torch.eye(n, dtype=torch.bool, device=latents.device)
    masked = sims.masked_fill(eye, float("-inf"))
    top_sims, top_idx = masked.topk(k, dim=1)
    neighbor_labels = labels[top_idx].to(top_sims.dtype)
    weights = torch.softmax(top_sims / tau_pred, dim=1)
    p1 = (weights * neighbor_labels).sum(dim=1)
    return torch.stack([1.0 - p1, p1], dim=1)


def prediction_loss(probabilities: torch.Tensor, labels: torch.Tensor):
    """Mean cross-entropy of soft class probabilities against true labels."""
    if probabilities.ndim != 2 or probabilities.shape[1] != 2:
        raise ValueError("probabilities must be a (B, 2) tensor")
    if probabilities.shape[0] != labels.shape[0]:
        raise ValueError("probabilities and labels must share the batch size")
    lo = float(probabilities.min())
    hi = float(probabilities.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ValueError("probabilities must lie in [0, 1]")
    rows = float((probabilities.sum(dim=1) - 1.0).abs().max())
    if rows > 1e-5:
        raise ValueError("probability rows must sum to 1")
    picked = probabilities[torch.arange(probabilities.shape[0]), labels.long()]
    return -(picked.clamp_min(_LOG_FLOOR)).log().mean()


def total_loss(l_diff, l_contrast, l_pred, *, weights=(1.0, 1.0, 1.0),
               include_diff: bool = True, include_contrast: bool = True,
               include_pred: bool = True):
    """Weighted sum of the three losses with per-phase masks.

    Warm-up passes ``include_contrast=False, include_pred=False`` so the total
    equals the denoising term; ``include_diff=False`` supports the variant
    that drops denoising from the joint phase. Raises ``DivergenceError`` on
    any non-finite component so the caller can abort the step.
    """
    for name, value in (("l_diff", l_diff), ("l_contrast", l_contrast), ("l_pred", l_pred)):
        if not math.isfinite(float(value)):
            raise DivergenceError(f"{name} is non-finite; aborting")
    w_diff, w_contrast, w_pred = weights
    total = 0.0
    if include_diff:
        total = total + w_diff * l_diff
    if include_contrast:
        total = total + w_contrast * l_contrast
    if include_pred:
        total = total + w_pred * l_pred
    return total
