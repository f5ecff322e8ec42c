import logging
from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from .schedule import DiffusionSchedule

logger = logging.getLogger("axisforge.diffusion.denoiser")


@runtime_checkable
class DenoiserInterface(Protocol):
    """
    A noise predictor eps_phi(x_t, t | cond). `cond` is the flattened or
    image-shaped query, or None for unconditional models.
    """

    def evaluate(self, x_t: np.ndarray, t: int, cond: Optional[np.ndarray]) -> np.ndarray:
        ...

    def vjp(self, x_t: np.ndarray, t: int, cond: Optional[np.ndarray],
            cotangent: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class GaussianScoreField:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        variance = np.broadcast_to(np.asarray(self.variance, dtype=float), mean.shape)
        if not np.all(variance > 0):
            raise ValueError("every variance of a Gaussian score field must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)


class GaussianDenoiser:
    """
    Exact noise predictor for data ~ N(m, diag(s^2)): the diffused marginal
    at t is N(sqrt(ab) m, ab s^2 + 1 - ab), so the prediction is an affine
    function of x_t with a diagonal Jacobian.
    """

    def __init__(self, field: GaussianScoreField, sched: DiffusionSchedule):
        self._field = field
        self._sched = sched

    @property
    def field(self) -> GaussianScoreField:
        return self._field

    def _marginal(self, t: int):
        ab = self._sched.alpha_bar[t]
        var = ab * self._field.variance + (1.0 - ab)
        return ab, var

    def score(self, x_t: np.ndarray, t: int) -> np.ndarray:
        ab, var = self._marginal(t)
        return -(x_t - np.sqrt(ab) * self._field.mean) / var

    def evaluate(self, x_t, t, cond=None):
        ab = self._sched.alpha_bar[t]
        return -np.sqrt(1.0 - ab) * self.score(x_t, t)

    def vjp(self, x_t, t, cond, cotangent):
        ab, var = self._marginal(t)
        return cotangent * (np.sqrt(1.0 - ab) / var)


def gaussian_denoiser(field: GaussianScoreField, sched: DiffusionSchedule) -> GaussianDenoiser:
    return GaussianDenoiser(field, sched)
