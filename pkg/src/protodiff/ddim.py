"""Deterministic generative decoding and its inversion.

Both directions iterate the same update rule. Descending the step sequence
decodes a (semantic latent, terminal noise) pair back to an image; ascending
it maps a clean image to its terminal noise latent, the stochastic half of
the code. Neither direction consumes randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .schedule import NoiseSchedule

__all__ = [
    "SamplerPlan",
    "uniform_plan",
    "ddim_step",
    "DecodeResult",
    "decode",
    "encode_stochastic",
]


@dataclass(frozen=True)
class SamplerPlan:
    """Strictly decreasing step indices from the top step down to 0."""

    steps: tuple[int, ...]

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if len(steps) < 2:
            raise ValueError("a plan needs at least a start step and the 0 endpoint")
        if steps[-1] != 0:
            raise ValueError("plans must end at step 0")
        if steps[0] < 1:
            raise ValueError("plans must start at a step >= 1")
        if any(a <= b for a, b in zip(steps[1:], steps[:-1])):
            raise ValueError("plan steps must be strictly decreasing")

    @property
    def substeps(self) -> int:
        """Number of transitions in the plan."""
        return len(self.steps) - 1


def uniform_plan(T: int, substeps: int) -> SamplerPlan:
    """Evenly strided plan covering [0, T] with the given transition count."""
    if substeps < 1 or substeps > T:
        raise ValueError("substeps must lie in [1, T]")
    raw = np.linspace(0, T, substeps + 1)
    steps = tuple(int(round(v)) for v in raw)[::-1]
    return SamplerPlan(steps=steps)


def _validate_pair(t: int, t_prev: int, schedule: NoiseSchedule):
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if t_prev < 0 or t > schedule.T:
        raise ValueError(f"steps ({t}, {t_prev}) outside schedule range [0, {schedule.T}]")


def ddim_step(x_t, t: int, t_prev: int, eps_hat, schedule: NoiseSchedule):
    """One deterministic generative transition from step ``t`` to ``t_prev``.

    Forms the clean-image estimate implied by ``eps_hat`` and re-noises it to
    the target level:
    ``sqrt(a_prev) * (x_t - sqrt(1-a_t)*eps) / sqrt(a_t) + sqrt(1-a_prev) * eps``
    with ``alpha_0 = 1`` so ``t_prev = 0`` lands on the clean estimate.
    """
    if tuple(eps_hat.shape) != tuple(x_t.shape):
        raise ValueError("eps_hat shape must match x_t")
    _validate_pair(t, t_prev, schedule)
    a_t = schedule.alpha_at(t)
    a_prev = schedule.alpha_at(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    return math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps_hat


class DecodeResult(NamedTuple):
    """Decoded image clamped for display plus the raw unclamped array."""

    image: object
    raw: object


def decode(model, z_sem, x_T, plan: SamplerPlan, schedule: NoiseSchedule) -> DecodeResult:
    """Decode a (semantic latent, terminal noise) pair to an image.

    Runs the plan top-down with the model's noise prediction at each step.
    Arithmetic is never clamped mid-trajectory; the clamp to [0, 1] applies
    only to the returned display image.
    """
    if plan.steps[0] > schedule.T:
        raise ValueError("plan starts above the schedule's top step")
    x = x_T
    with torch.no_grad():
        for t, t_prev in zip(plan.steps[:-1], plan.steps[1:]):
            eps_hat = model.predict_noise(x, t, z_sem)
            x = ddim_step(x, t, t_prev, eps_hat, schedule)
    image = x.clamp(0.0, 1.0) if torch.is_tensor(x) else np.clip(x, 0.0, 1.0)
    return DecodeResult(image=image, raw=x)


def encode_stochastic(model, x0, z_sem, plan: SamplerPlan, schedule: NoiseSchedule):
    """Deterministically map a clean image to its terminal noise latent.

    Runs the generative rule in ascending form,
    ``x_next = sqrt(a_next) * x0_hat(x_t) + sqrt(1 - a_next) * eps_hat``,
    with the noise prediction evaluated at the current point. The step-0
    evaluation reuses the step-1 embedding since the predictor is defined
    for steps >= 1.
    """
    if plan.steps[0] > schedule.T:
        raise ValueError("plan starts above the schedule's top step")
    ascending = plan.steps[::-1]
    x = x0
    with torch.no_grad():
        for t_cur, t_next in zip(ascending[:-1], ascending[1:]):
            eps_hat = model.predict_noise(x, max(t_cur, 1), z_sem)
            a_cur = schedule.alpha_at(t_cur)
            a_next = schedule.alpha_at(t_next)
            x0_hat = (x - math.sqrt(1.0 - a_cur) * eps_hat) / math.sqrt(a_cur)
            x = math.sqrt(a_next) * x0_hat + math.sqrt(1.0 - a_next) * eps_hat
    return x
