"""Variance schedule tables and the guidance-level to start-step mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Keeps exact rationals such as (1 - 0.9) * 50 from flooring to 4.
START_STEP_GUARD = 1e-9


@dataclass(frozen=True)
class VarianceSchedule:
    """Linear beta schedule over steps ``t = 1..T``.

    ``beta`` and ``alpha`` are stored 0-based (``beta[t - 1]`` is beta_t);
    ``alpha_bar`` has ``T + 1`` entries with ``alpha_bar[0] == 1``.
    Use the ``*_at`` accessors to avoid off-by-one errors.
    """

    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray = field(repr=False, compare=False)
    alpha: np.ndarray = field(repr=False, compare=False)
    alpha_bar: np.ndarray = field(repr=False, compare=False)

    def beta_at(self, t: int) -> float:
        self._check_step(t, lo=1)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_step(t, lo=1)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        return alpha_bar_at(self, t)

    def _check_step(self, t: int, lo: int = 0) -> None:
        if not (lo <= t <= self.T):
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def triple(self) -> tuple[int, float, float]:
        return (self.T, self.beta_min, self.beta_max)


def make_linear_schedule(T: int, beta_min: float, beta_max: float) -> VarianceSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    T = int(T)
    if T == 1:
        beta = np.array([beta_min], dtype=np.float64)
    else:
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    return schedule_from_betas(beta, beta_min=beta_min, beta_max=beta_max)


def schedule_from_betas(betas, beta_min: float | None = None, beta_max: float | None = None) -> VarianceSchedule:
    """Build a schedule from an explicit beta table (``betas[0]`` is beta_1)."""
    beta = np.array(betas, dtype=np.float64).ravel()
    if beta.size < 1:
        raise ValueError("need at least one step")
    if not np.all((beta > 0.0) & (beta < 1.0)):
        raise ValueError("every beta must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    lo = float(beta.min()) if beta_min is None else float(beta_min)
    hi = float(beta.max()) if beta_max is None else float(beta_max)
    return VarianceSchedule(int(beta.size), lo, hi, beta, alpha, alpha_bar)


def alpha_bar_at(schedule: VarianceSchedule, t: int) -> float:
    schedule._check_step(t)
    return float(schedule.alpha_bar[t])


def start_step(lam: float, T: int) -> int:
    """Diffusion step at which image-guided generation starts.

    ``floor((1 - lam) * T)``; 0 means the source image is returned untouched.
    """
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"guidance level must lie in [0, 1], got {lam}")
    return int(math.floor((1.0 - lam) * T + START_STEP_GUARD))
