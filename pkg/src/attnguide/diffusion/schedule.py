"""Linear beta noise schedule and the forward (noising) process."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def T_train(self) -> int:
        return len(self.betas)

    def to_dict(self) -> dict:
        return {"T_train": self.T_train, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_train < 2:
        raise ParameterError(f"T_train must be >= 2, got {T_train}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas), float(beta_start), float(beta_end))


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """q-sample: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    ``t`` may be a scalar step or one step per leading batch entry.
    """
    t_arr = np.asarray(t)
    if t_arr.dtype.kind not in "iu" or np.any(t_arr < 0) or np.any(t_arr >= sched.T_train):
        raise ParameterError(f"timestep {t} outside [0, {sched.T_train})")
    x0 = np.asarray(x0)
    ab = sched.alpha_bar[t_arr].reshape(t_arr.shape + (1,) * (x0.ndim - t_arr.ndim))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


def mix(x0: np.ndarray, eps: np.ndarray, alpha_bar: float) -> np.ndarray:
    """Noise mix for an explicit alpha_bar value (used for the boundary cases 0 and 1)."""
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps
