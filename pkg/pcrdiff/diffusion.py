"""Variance schedule, forward corruption and DDPM reverse steps over transform vectors."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import BadStepCount, BadStepOrder, StepOutOfRange

FloatArray = NDArray[np.float64]

MAX_BETA = 0.999
COSINE_OFFSET = 0.008

Denoiser = Callable[[FloatArray, int, Any], FloatArray]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step constants; every array is indexed by t with index 0 meaning "clean".

    ``betas[0]``, ``alphas[0]`` and ``posterior_vars[0]`` are padding (0, 1, 0).
    """

    T: int
    betas: FloatArray
    alphas: FloatArray
    alpha_bars: FloatArray
    posterior_vars: FloatArray

    def check_step(self, t: int, *, allow_zero: bool = False) -> None:
        low = 0 if allow_zero else 1
        if not low <= t <= self.T:
            raise StepOutOfRange(f"timestep {t} outside [{low}, {self.T}]")


@dataclass(frozen=True)
class DiffusionSample:
    t: int
    g_t: FloatArray
    eps: FloatArray


def schedule_from_betas(betas: ArrayLike) -> NoiseSchedule:
    tail = np.asarray(betas, dtype=np.float64).reshape(-1)
    if tail.size < 1:
        raise BadStepCount("schedule needs at least one step")
    full_betas = np.concatenate([[0.0], tail])
    alphas = 1.0 - full_betas
    alpha_bars = np.cumprod(alphas)
    posterior_vars = np.zeros_like(full_betas)
    posterior_vars[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * tail
    return NoiseSchedule(
        T=int(tail.size),
        betas=full_betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
    )


def cosine_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    """Cosine schedule: alpha_bar(t) = f(t) / f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2)."""
    if T < 1:
        raise BadStepCount(f"T must be >= 1, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    ratio = f / f[0]
    betas = np.minimum(1.0 - ratio[1:] / ratio[:-1], MAX_BETA)
    return schedule_from_betas(betas)


def forward_sample(
    sched: NoiseSchedule, g0: ArrayLike, t: int, eps: ArrayLike
) -> FloatArray:
    """Closed-form q(G_t | G_0) draw: sqrt(abar_t) g0 + sqrt(1 - abar_t) eps."""
    sched.check_step(t)
    abar = sched.alpha_bars[t]
    return math.sqrt(abar) * np.asarray(g0, dtype=np.float64) + math.sqrt(
        1.0 - abar
    ) * np.asarray(eps, dtype=np.float64)


def forward_step(
    sched: NoiseSchedule, g_prev: ArrayLike, t: int, eps: ArrayLike
) -> FloatArray:
    """One transition q(G_t | G_{t-1})."""
    sched.check_step(t)
    return math.sqrt(sched.alphas[t]) * np.asarray(g_prev, dtype=np.float64) + math.sqrt(
        sched.betas[t]
    ) * np.asarray(eps, dtype=np.float64)


def draw_sample(
    sched: NoiseSchedule, g0: ArrayLike, rng: np.random.Generator, t: int | None = None
) -> DiffusionSample:
    """Pick t uniformly in [1, T] (unless given) and corrupt ``g0``."""
    clean = np.asarray(g0, dtype=np.float64)
    step = int(rng.integers(1, sched.T + 1)) if t is None else t
    eps = rng.standard_normal(clean.shape)
    return DiffusionSample(t=step, g_t=forward_sample(sched, clean, step, eps), eps=eps)


def _step_coefficients(
    sched: NoiseSchedule, t_now: int, t_next: int
) -> tuple[float, float, float]:
    """Mean coefficients (on g0_hat, on g_t) and variance of q(G_next | G_now, G_0)."""
    abar_now = sched.alpha_bars[t_now]
    abar_next = sched.alpha_bars[t_next]
    alpha = abar_now / abar_next
    beta = 1.0 - alpha
    coef_g0 = math.sqrt(abar_next) * beta / (1.0 - abar_now)
    coef_gt = math.sqrt(alpha) * (1.0 - abar_next) / (1.0 - abar_now)
    variance = (1.0 - abar_next) / (1.0 - abar_now) * beta
    return coef_g0, coef_gt, variance


def posterior_mean(
    sched: NoiseSchedule, g_t: ArrayLike, g0_hat: ArrayLike, t: int
) -> FloatArray:
    """Mean of q(G_{t-1} | G_t, G_0) with G_0 replaced by the prediction."""
    sched.check_step(t)
    coef_g0, coef_gt, _ = _step_coefficients(sched, t, t - 1)
    return coef_g0 * np.asarray(g0_hat, dtype=np.float64) + coef_gt * np.asarray(
        g_t, dtype=np.float64
    )


def _check_pair(sched: NoiseSchedule, t_now: int, t_next: int) -> None:
    if t_now <= t_next:
        raise BadStepOrder(f"t_now={t_now} must be greater than t_next={t_next}")
    sched.check_step(t_now)
    sched.check_step(t_next, allow_zero=True)


def ddpm_step(
    sched: NoiseSchedule,
    g_t: ArrayLike,
    g0_hat: ArrayLike,
    t_now: int,
    t_next: int,
    z: ArrayLike | None = None,
) -> FloatArray:
    """Draw G_{t_next} from q(G_{t_next} | G_{t_now}, G_0 = g0_hat).

    For t_next = t_now - 1 this is posterior_mean + sqrt(posterior_vars[t_now]) z. The
    step to t_next = 0 is always noiseless; ``z=None`` also means no noise.
    """
    _check_pair(sched, t_now, t_next)
    coef_g0, coef_gt, variance = _step_coefficients(sched, t_now, t_next)
    mean = coef_g0 * np.asarray(g0_hat, dtype=np.float64) + coef_gt * np.asarray(
        g_t, dtype=np.float64
    )
    if t_next == 0 or z is None:
        return mean
    return mean + math.sqrt(variance) * np.asarray(z, dtype=np.float64)


def ddpm_step_eps_form(
    sched: NoiseSchedule,
    g_t: ArrayLike,
    g0_hat: ArrayLike,
    t_now: int,
    t_next: int,
    z: ArrayLike | None = None,
) -> FloatArray:
    """The same step written with the implied noise eps_hat (the noise-prediction form)."""
    _check_pair(sched, t_now, t_next)
    current = np.asarray(g_t, dtype=np.float64)
    abar_now = sched.alpha_bars[t_now]
    alpha = abar_now / sched.alpha_bars[t_next]
    eps_hat = (current - math.sqrt(abar_now) * np.asarray(g0_hat, dtype=np.float64)) / math.sqrt(
        1.0 - abar_now
    )
    mean = (current - (1.0 - alpha) / math.sqrt(1.0 - abar_now) * eps_hat) / math.sqrt(alpha)
    if t_next == 0 or z is None:
        return mean
    _, _, variance = _step_coefficients(sched, t_now, t_next)
    return mean + math.sqrt(variance) * np.asarray(z, dtype=np.float64)


def timestep_pairs(T: int, steps: int) -> list[tuple[int, int]]:
    """Evenly spaced descending (t_now, t_next) pairs from T down to 0."""
    if not 1 <= steps <= T:
        raise BadStepCount(f"steps must lie in [1, {T}], got {steps}")
    times = [T * (steps - k) // steps for k in range(steps + 1)]
    return list(zip(times[:-1], times[1:]))


def sample_loop(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    steps: int,
    conditioning: Any,
    rng: np.random.Generator,
    *,
    dim: int = 7,
) -> FloatArray:
    """Denoise pure noise with ``steps`` strided DDPM steps; returns the last prediction."""
    pairs = timestep_pairs(sched.T, steps)
    g_t = rng.standard_normal(dim)
    g0_hat = g_t
    for t_now, t_next in pairs:
        g0_hat = np.asarray(denoiser(g_t, t_now, conditioning), dtype=np.float64)
        z = rng.standard_normal(dim) if t_next > 0 else None
        g_t = ddpm_step(sched, g_t, g0_hat, t_now, t_next, z)
    return g0_hat


def schedule_rows(sched: NoiseSchedule) -> list[tuple[int, float, float, float]]:
    return [
        (
            t,
            float(sched.betas[t]),
            float(sched.alpha_bars[t]),
            float(sched.posterior_vars[t]),
        )
        for t in range(1, sched.T + 1)
    ]


__all__ = [
    "NoiseSchedule",
    "DiffusionSample",
    "Denoiser",
    "schedule_from_betas",
    "cosine_schedule",
    "forward_sample",
    "forward_step",
    "draw_sample",
    "posterior_mean",
    "ddpm_step",
    "ddpm_step_eps_form",
    "timestep_pairs",
    "sample_loop",
    "schedule_rows",
]
