"""Variance-preserving noise schedules."""

from __future__ import annotations

import numpy as np

from .validation import check_in_range

__all__ = ["NoiseSchedule", "make_schedule"]


class NoiseSchedule:
    """Discrete VP schedule over steps 0..T.

    Arrays are indexed by schedule time t. Index 0 is the clean signal:
    beta[0] = 0, alpha[0] = 1 and alpha_bar[0] = 1 by convention, so a
    reverse step ending at t = 0 is noise-free. alpha_bar is strictly
    decreasing and stays positive.
    """

    def __init__(self, beta: np.ndarray):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("NoiseSchedule: beta must be a non-empty 1D array")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("NoiseSchedule: beta values must lie in (0, 1)")
        self.T = int(beta.size)
        self.beta = np.concatenate([[0.0], beta])
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        self.alpha_bar[0] = 1.0
        if self.alpha_bar[-1] <= 0.0:
            raise ValueError("NoiseSchedule: alpha_bar underflowed to zero")

    def check_t(self, t: int, lo: int = 0) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"schedule time t={t} outside [{lo}, {self.T}]")
        return t

    def sigma(self, t: int) -> float:
        """Noise scale sqrt((1 - alpha_bar)/alpha_bar) of the rescaled state."""
        ab = self.alpha_bar[self.check_t(t)]
        return float(np.sqrt((1.0 - ab) / ab))

    def nearest_t_for_sigma(self, sig: float) -> int:
        """Schedule index whose sigma is closest to the given value."""
        sigmas = np.sqrt((1.0 - self.alpha_bar) / self.alpha_bar)
        return int(np.argmin(np.abs(sigmas - sig)))

    def __repr__(self):
        return f"NoiseSchedule(T={self.T}, beta=[{self.beta[1]:.2e}..{self.beta[-1]:.2e}])"


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linearly interpolated beta schedule over T steps."""
    T = int(T)
    check_in_range("T", T, lo=1)
    check_in_range("beta_min", beta_min, lo=0.0, lo_open=True, hi=beta_max)
    check_in_range("beta_max", beta_max, hi=1.0, hi_open=True)
    if T == 1:
        beta = np.array([beta_min])
    else:
        t = np.arange(1, T + 1, dtype=np.float64)
        beta = beta_min + (t - 1.0) * (beta_max - beta_min) / (T - 1.0)
    return NoiseSchedule(beta)
