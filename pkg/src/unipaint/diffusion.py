"""Noise schedule and closed-form forward/reverse diffusion relations.

Timesteps are 1-based (``t = 1..T``); ``alpha_bar(0)`` is defined as 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import tensor as T
from .numerics.uptn import read_tensor, write_tensor


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t, allow_zero=False):
        t = np.asarray(t)
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def abar(self, t):
        """``alpha_bar`` at 1-based step(s) ``t``, with ``abar(0) == 1``."""
        t = np.asarray(t)
        self.check_t(t, allow_zero=True)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "beta.uptn", self.beta, precision=8)
        write_tensor(d / "alpha.uptn", self.alpha, precision=8)
        write_tensor(d / "alpha_bar.uptn", self.alpha_bar, precision=8)

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        return cls(
            read_tensor(d / "beta.uptn"),
            read_tensor(d / "alpha.uptn"),
            read_tensor(d / "alpha_bar.uptn"),
        )


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_bar)


def _shape_check(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def _per_sample(coef, x):
    """Broadcast one coefficient per leading-axis sample (or a scalar)."""
    coef = np.asarray(coef, dtype=np.asarray(x).dtype)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (np.ndim(x) - coef.ndim))


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one step per leading-axis sample.
    """
    _shape_check(x0, eps, "q_sample")
    schedule.check_t(t)
    ab = schedule.abar(t)
    return _per_sample(np.sqrt(ab), x0) * x0 + _per_sample(np.sqrt(1.0 - ab), x0) * eps


def predict_x0(x_t, eps, t, schedule: NoiseSchedule):
    ab = schedule.abar(t)
    return (x_t - _per_sample(np.sqrt(1.0 - ab), x_t) * eps) / _per_sample(np.sqrt(ab), x_t)


def reconstruct_prev(x_t, eps_hat, t, schedule: NoiseSchedule):
    """Posterior-mean step ``(x_t - (1 - a_t) / sqrt(1 - abar_t) * eps) / sqrt(a_t)``."""
    _shape_check(x_t, eps_hat, "reconstruct_prev")
    schedule.check_t(t)
    a = schedule.alpha[np.asarray(t) - 1]
    ab = schedule.abar(t)
    coef = (1.0 - a) / np.sqrt(1.0 - ab)
    return (x_t - _per_sample(coef, x_t) * eps_hat) / _per_sample(np.sqrt(a), x_t)


def epsilon_loss(eps, eps_hat):
    """Mean squared error between true and predicted noise.

    Works on arrays (returns a float) and on autodiff tensors (returns a
    scalar tensor).
    """
    if isinstance(eps, T.Tensor) or isinstance(eps_hat, T.Tensor):
        _shape_check(T.as_tensor(eps).data, T.as_tensor(eps_hat).data, "epsilon_loss")
        return T.mean(T.square(T.sub(eps_hat, eps)))
    _shape_check(eps, eps_hat, "epsilon_loss")
    diff = np.asarray(eps_hat, dtype=np.float64) - np.asarray(eps, dtype=np.float64)
    return float(np.mean(diff * diff))
