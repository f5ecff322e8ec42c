import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from ..exceptions import InvalidSchedule, InvalidSigma

logger = logging.getLogger("axisforge.diffusion.schedule")


@dataclass(frozen=True)
class DiffusionSchedule:
    """
    Index t runs over 0..T; zeta[0] = 0 and alpha_bar[0] = 1 stand for the
    clean sample, so alpha_bar[t] is the cumulative product up to step t.
    """
    T: int
    zeta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    zeta_start: float = 0.0
    zeta_end: float = 0.0

    def sqrt_ab(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def sqrt_1m_ab(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def check_t(self, t: int):
        if not (1 <= t <= self.T):
            raise InvalidSchedule(f"timestep {t} outside 1..{self.T}")

    def to_record(self):
        return {"T": self.T, "zeta_start": self.zeta_start, "zeta_end": self.zeta_end}


def make_schedule(T: int, zeta_start: float, zeta_end: float) -> DiffusionSchedule:
    if T < 1:
        raise InvalidSchedule(f"T must be >= 1, got {T}")
    if not (0 < zeta_start <= zeta_end < 1):
        raise InvalidSchedule(
            f"need 0 < zeta_start <= zeta_end < 1, got {zeta_start}, {zeta_end}")

    zeta = np.concatenate([[0.0], np.linspace(zeta_start, zeta_end, T)])
    alpha_bar = np.cumprod(1.0 - zeta)
    return DiffusionSchedule(T, zeta, alpha_bar, float(zeta_start), float(zeta_end))


def q_sample(x0: np.ndarray, alpha_bar: float, eps: np.ndarray) -> np.ndarray:
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def forward_diffuse(x0: np.ndarray, t: int, sched: DiffusionSchedule,
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    sched.check_t(t)
    eps = rng.standard_normal(np.shape(x0))
    return q_sample(x0, sched.alpha_bar[t], eps), eps


def x0_from_eps(x_t: np.ndarray, alpha_bar: float, eps_hat: np.ndarray) -> np.ndarray:
    return (x_t - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha_bar)


def predict_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
               sched: DiffusionSchedule) -> np.ndarray:
    sched.check_t(t)
    return x0_from_eps(x_t, sched.alpha_bar[t], eps_hat)


def ddim_sigma(sched: DiffusionSchedule, t: int, t_prev: int, scale: float) -> float:
    """DDIM noise level between two (possibly strided) steps; scale 1 is the ancestral one."""
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    return float(scale * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev))


def ddim_step(x_t: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule,
              sigma: float = 0.0, rng: np.random.Generator = None,
              t_prev: int = None) -> np.ndarray:
    """
    One DDIM update from t to t_prev (t - 1 unless a stride is in use).
    sigma = 0 is deterministic and draws nothing from rng.
    """
    sched.check_t(t)
    if t_prev is None:
        t_prev = t - 1
    if not (0 <= t_prev < t):
        raise InvalidSchedule(f"t_prev={t_prev} must lie in [0, {t})")

    ab_prev = sched.alpha_bar[t_prev]
    var_left = 1.0 - ab_prev - sigma * sigma
    if sigma < 0 or var_left < -1e-15:
        raise InvalidSigma(
            f"sigma={sigma:.6g} exceeds sqrt(1 - alpha_bar[{t_prev}]) = {np.sqrt(1.0 - ab_prev):.6g}")

    x0_hat = predict_x0(x_t, t, eps, sched)
    x_prev = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(var_left, 0.0)) * eps
    if sigma > 0:
        if rng is None:
            raise InvalidSigma("a stochastic step (sigma > 0) needs an rng")
        x_prev = x_prev + sigma * rng.standard_normal(np.shape(x_t))
    return x_prev
