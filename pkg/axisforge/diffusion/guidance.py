"""
Geometric-consistency posterior guidance.

The measurement g is the target axis observation and the forward operator
is the soft extractor applied to the clamped x0-prediction. The gradient of
||g - H(x0_hat(x_t))||^2 with respect to x_t is chained through the soft
extractor's adjoint, the clamp, and x0_hat's dependence on x_t, both direct
and through the denoiser.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from ..exceptions import ExtractionError
from ..extraction import DEFAULT_SHARPNESS, AxisObservation, extract_with_vjp
from .denoiser import DenoiserInterface
from .schedule import DiffusionSchedule

logger = logging.getLogger("axisforge.diffusion.guidance")

NORMALIZE_EPS = 1e-6


@dataclass(frozen=True)
class GuidanceConfig:
    target: Optional[AxisObservation] = None
    rho: float = 1.0
    sharpness: float = DEFAULT_SHARPNESS
    enabled: bool = True
    # rho / (||g - H(x0_hat)|| + 1e-6) when set, constant rho otherwise
    normalize: bool = True

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if self.sharpness <= 0:
            raise ValueError(f"sharpness must be > 0, got {self.sharpness}")

    @property
    def active(self) -> bool:
        return self.enabled and self.rho > 0 and self.target is not None

    @classmethod
    def disabled(cls) -> "GuidanceConfig":
        return cls(enabled=False)


class GuidedEpsilon(NamedTuple):
    eps: np.ndarray
    loss: float
    norm: float
    skipped: bool


def geo_loss(gen: AxisObservation, gt: AxisObservation) -> float:
    d_dir = np.asarray(gen.dir) - np.asarray(gt.dir)
    d_c = np.asarray(gen.centroid) - np.asarray(gt.centroid)
    return float((d_dir * d_dir).sum() + (d_c * d_c).sum())


def geo_loss_cotangent(gen: AxisObservation, gt: AxisObservation) -> AxisObservation:
    """d geo_loss / d gen; the origin does not enter the loss."""
    return AxisObservation(np.zeros(2), 2.0 * (gen.dir - gt.dir), 2.0 * (gen.centroid - gt.centroid))


def geo_gradient_x0(x0_hat: np.ndarray, target: AxisObservation, sharpness: float):
    """
    geo_loss of the clamped prediction and its gradient w.r.t. x0_hat.
    Raises ExtractionError when the soft extractor is undefined.
    """
    clamped = np.clip(x0_hat, 0.0, 1.0)
    obs, g_img = extract_with_vjp(clamped, sharpness,
                                  lambda gen: geo_loss_cotangent(gen, target))
    inside = (x0_hat >= 0.0) & (x0_hat <= 1.0)
    return geo_loss(obs, target), np.where(inside, g_img, 0.0)


def geo_gradient_xt(x_t: np.ndarray, t: int, denoiser: DenoiserInterface, cond,
                    target: AxisObservation, sharpness: float, sched: DiffusionSchedule,
                    eps: np.ndarray = None):
    """geo_loss at x_t and its full gradient w.r.t. x_t."""
    ab = sched.alpha_bar[t]
    s_ab, s_1m = np.sqrt(ab), np.sqrt(1.0 - ab)
    if eps is None:
        eps = denoiser.evaluate(x_t, t, cond)

    x0_hat = (x_t - s_1m * eps) / s_ab
    loss, g_x0 = geo_gradient_x0(x0_hat, target, sharpness)
    grad = (g_x0 - s_1m * denoiser.vjp(x_t, t, cond, g_x0)) / s_ab
    return loss, grad


def guidance_step(x_t: np.ndarray, t: int, denoiser: DenoiserInterface, cond,
                  guidance: GuidanceConfig, sched: DiffusionSchedule) -> GuidedEpsilon:
    eps = denoiser.evaluate(x_t, t, cond)
    if not guidance.active:
        return GuidedEpsilon(eps, float("nan"), 0.0, False)

    try:
        loss, grad = geo_gradient_xt(x_t, t, denoiser, cond, guidance.target,
                                     guidance.sharpness, sched, eps=eps)
    except ExtractionError as exc:
        logger.debug("guidance skipped at t=%d: %s", t, exc)
        return GuidedEpsilon(eps, float("nan"), 0.0, True)

    rho = guidance.rho
    if guidance.normalize:
        rho = rho / (np.sqrt(loss) + NORMALIZE_EPS)

    correction = rho * np.sqrt(1.0 - sched.alpha_bar[t]) * grad
    return GuidedEpsilon(eps + correction, loss, float(np.linalg.norm(correction)), False)


def guided_epsilon(x_t: np.ndarray, t: int, denoiser: DenoiserInterface, cond,
                   guidance: GuidanceConfig, sched: DiffusionSchedule) -> np.ndarray:
    return guidance_step(x_t, t, denoiser, cond, guidance, sched).eps
