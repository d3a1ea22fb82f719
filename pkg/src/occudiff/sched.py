"""Noise schedules and the closed-form forward/reverse diffusion updates.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and the arrays
stored on a :class:`NoiseSchedule` are indexed with ``t - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    # original training timestep for each entry; identity for unspaced schedules
    timesteps: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "timesteps"):
            arr = getattr(self, name)
            if arr is None:
                arr = np.arange(1, len(self.beta) + 1)
            arr = np.array(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def desk_schedule(T: int) -> NoiseSchedule:
    """Linear schedule with the 1000-step endpoints rescaled by ``1000 / T``.

    Keeps ``alpha_bar[T]`` roughly constant when fewer steps are used.
    """
    scale = 1000.0 / T
    return linear_schedule(T, min(1e-4 * scale, 0.5), min(0.02 * scale, 0.999))


def respacing(T: int, K: int) -> np.ndarray:
    """Evenly spaced timesteps in ``[1, T]``, rounded, deduplicated, descending."""
    if K < 1:
        raise ValueError("K must be >= 1")
    ts = np.unique(np.round(np.linspace(1, T, min(K, T))).astype(np.int64))
    return ts[::-1].copy()


def respace(schedule: NoiseSchedule, K: int) -> NoiseSchedule:
    """Build a K-step schedule over a subsequence of ``schedule``'s timesteps.

    ``alpha_bar`` is taken directly from the parent; betas are recomputed as
    ``1 - abar[t_i] / abar[t_{i-1}]``. Where consecutive parent steps are kept
    the parent beta is reused verbatim, so ``K == T`` is exactly the parent.
    """
    ts = respacing(schedule.T, K)[::-1]  # ascending for construction
    abar = schedule.alpha_bar[ts - 1]
    beta = np.empty(len(ts))
    prev_t, prev_abar = 0, 1.0
    for i, (t, ab) in enumerate(zip(ts, abar)):
        if t == prev_t + 1:
            beta[i] = schedule.beta[t - 1]
        else:
            beta[i] = 1.0 - ab / prev_abar
        prev_t, prev_abar = t, ab
    alpha = np.where(np.diff(np.concatenate([[0], ts])) == 1, schedule.alpha[ts - 1], 1.0 - beta)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=abar, timesteps=schedule.timesteps[ts - 1])


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Jump straight to ``x_t`` given clean ``x0``. ``t = 0`` returns ``x0``."""
    if t == 0:
        return np.asarray(x0, dtype=np.float64).copy()
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def q_step(x_prev, t, eps, schedule: NoiseSchedule):
    """One Markov-chain corruption step ``x_{t-1} -> x_t``."""
    t = schedule.check_t(t)
    b = schedule.beta[t - 1]
    return np.sqrt(1.0 - b) * np.asarray(x_prev) + np.sqrt(b) * np.asarray(eps)


def p_step(x_t, eps_hat, t, schedule: NoiseSchedule, z=None):
    """Ancestral reverse step with epsilon parameterization and sigma^2 = beta.

    ``z`` is ignored at ``t == 1``.
    """
    if t <= 0:
        raise ValueError("t must be >= 1")
    t = schedule.check_t(t)
    a = schedule.alpha[t - 1]
    b = schedule.beta[t - 1]
    ab = schedule.alpha_bar[t - 1]
    # 1 - ab underflows to 0 only when beta is negligible, where the coefficient is too
    coef = b / np.sqrt(1.0 - ab) if ab < 1.0 else 0.0
    mean = (np.asarray(x_t) - coef * np.asarray(eps_hat)) / np.sqrt(a)
    if t == 1 or z is None:
        return mean
    return mean + np.sqrt(b) * np.asarray(z)


def predict_x0(x_t, eps_hat, t, schedule: NoiseSchedule):
    ab = schedule.alpha_bar[schedule.check_t(t) - 1]
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def eps_from_x0(x_t, x0_hat, t, schedule: NoiseSchedule):
    ab = schedule.alpha_bar[schedule.check_t(t) - 1]
    return (np.asarray(x_t) - np.sqrt(ab) * np.asarray(x0_hat)) / np.sqrt(1.0 - ab)
