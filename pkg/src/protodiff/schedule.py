"""Forward-noising schedule and closed-form noisy-image sampling.

The schedule fixes a sequence of per-step noise increments ``beta_1..beta_T``
and their cumulative signal levels ``alpha_t = prod_{s<=t}(1 - beta_s)``.
Given those, a noisy image at any step is available in closed form:
``x_t = sqrt(alpha_t) * x_0 + sqrt(1 - alpha_t) * eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = ["NoiseSchedule", "build_linear_schedule", "q_sample"]

# Tolerance for the stored-vs-recomputed cumulative product identity.
_PRODUCT_RTOL = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable noise schedule.

    ``betas[t-1]`` is the increment for 1-based step ``t`` and ``alphas[t-1]``
    the running product of ``(1 - beta_s)`` up to ``t``. All arithmetic stays
    in float64; casting to model precision happens at the ``q_sample``
    boundary. Safe for concurrent reads.
    """

    betas: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).copy()
        alphas = np.asarray(self.alphas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if alphas.shape != betas.shape:
            raise ValueError("alphas and betas must have identical length")
        if not np.all(np.isfinite(betas)):
            raise ValueError("betas must be finite")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(alphas <= 0.0) or np.any(alphas >= 1.0):
            raise ValueError("alphas must lie strictly inside (0, 1)")
        if np.any(np.diff(alphas) >= 0.0):
            raise ValueError("alphas must be strictly decreasing")
        recomputed = np.cumprod(1.0 - betas)
        if not np.allclose(alphas, recomputed, rtol=_PRODUCT_RTOL, atol=0.0):
            raise ValueError("alphas do not match the running product of (1 - beta)")
        betas.setflags(write=False)
        alphas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)

    @property
    def T(self) -> int:
        """Number of diffusion steps."""
        return int(self.betas.shape[0])

    def alpha_at(self, t: int) -> float:
        """Cumulative signal level at step ``t``, with ``alpha_0 = 1``.

        The ``t = 0`` extension makes generative steps that land on the clean
        image well-formed.
        """
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alphas[t - 1])


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build a schedule whose betas interpolate linearly between the endpoints.

    Both endpoints are included; ``T = 1`` collapses to ``beta_start`` alone.
    Raises ``ValueError`` for non-finite or out-of-range endpoints or ``T < 1``.
    """
    if int(T) != T or T < 1:
        raise ValueError("T must be a positive integer")
    T = int(T)
    beta_start = float(beta_start)
    beta_end = float(beta_end)
    if not (math.isfinite(beta_start) and math.isfinite(beta_end)):
        raise ValueError("beta endpoints must be finite")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alphas=alphas)


def _broadcast_coeffs(t, schedule: NoiseSchedule, x0):
    """Signal/noise coefficients for scalar or per-sample ``t``.

    Returns a pair shaped to broadcast against ``x0``; per-sample ``t``
    requires ``x0`` to carry the batch on its leading axis.
    """
    ts = np.asarray(t)
    if ts.ndim == 0:
        a = schedule.alpha_at(int(ts))
        return math.sqrt(a), math.sqrt(1.0 - a)
    if ts.ndim != 1:
        raise ValueError("t must be a scalar or a 1-D batch of steps")
    if ts.shape[0] != x0.shape[0]:
        raise ValueError("per-sample t length must equal the batch size")
    alphas = np.array([schedule.alpha_at(int(tt)) for tt in ts], dtype=np.float64)
    shape = (ts.shape[0],) + (1,) * (x0.ndim - 1)
    c_signal = np.sqrt(alphas).reshape(shape)
    c_noise = np.sqrt(1.0 - alphas).reshape(shape)
    if torch.is_tensor(x0):
        c_signal = torch.as_tensor(c_signal, dtype=x0.dtype, device=x0.device)
        c_noise = torch.as_tensor(c_noise, dtype=x0.dtype, device=x0.device)
    else:
        c_signal = c_signal.astype(x0.dtype)
        c_noise = c_noise.astype(x0.dtype)
    return c_signal, c_noise


def q_sample(x0, t, noise, schedule: NoiseSchedule):
    """Closed-form noisy image: ``sqrt(alpha_t) * x0 + sqrt(1 - alpha_t) * noise``.

    Works elementwise on numpy arrays or torch tensors. ``t`` may be a single
    step in ``[1, T]`` or a per-sample batch of steps matching ``x0``'s
    leading axis. ``noise`` must have exactly ``x0``'s shape.
    """
    if tuple(noise.shape) != tuple(x0.shape):
        raise ValueError(
            f"noise shape {tuple(noise.shape)} does not match x0 shape {tuple(x0.shape)}"
        )
    ts = np.asarray(t)
    lo = int(ts.min()) if ts.size else 1
    if lo < 1:
        raise ValueError("q_sample steps must lie in [1, T]")
    c_signal, c_noise = _broadcast_coeffs(t, schedule, x0)
    return c_signal * x0 + c_noise * noise
