"""
Read the tri-axis measurement back off an image.

Both extractors fit one line per channel from weighted image moments and
intersect the three lines. The hard extractor thresholds at 0.5; the soft
one replaces the threshold with a sigmoid gate so that every output is a
smooth function of every pixel, which makes it usable as the forward
operator inside guided sampling. `soft_extract_vjp` is its hand-written
reverse-mode adjoint.

Every channel reduces to six weighted sums (mass, first and second raw
moments); the backward pass therefore runs through a handful of scalars
and then broadcasts back over the pixel grid.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy.special import expit

from .camera import AxisLines
from .exceptions import (
    DegenerateChannel, EmptyChannel, NoIntersection, OutsideImage, VanishingMass,
)
from .typing import Vec2

logger = logging.getLogger("axisforge.extraction")

HARD_THRESHOLD = 0.5
MIN_HARD_PIXELS = 8
MIN_SOFT_MASS = 1e-6
MIN_LINE_RATIO = 4.0
MIN_INTERSECTION_DET = 1e-10
DEFAULT_SHARPNESS = 50.0


@dataclass(frozen=True)
class AxisObservation:
    origin_px: Vec2
    dir: np.ndarray = field(repr=False)    # (3, 2)
    centroid: Vec2 = None

    def __post_init__(self):
        object.__setattr__(self, "origin_px", np.asarray(self.origin_px, dtype=float).reshape(2))
        object.__setattr__(self, "dir", np.asarray(self.dir, dtype=float).reshape(3, 2))
        centroid = self.origin_px if self.centroid is None else self.centroid
        object.__setattr__(self, "centroid", np.asarray(centroid, dtype=float).reshape(2))

    @classmethod
    def from_lines(cls, lines: AxisLines, centroid=None) -> "AxisObservation":
        return cls(lines.origin_px, lines.dir, centroid)

    @classmethod
    def zeros(cls) -> "AxisObservation":
        """An all-zero cotangent."""
        return cls(np.zeros(2), np.zeros((3, 2)), np.zeros(2))

    def inside(self, width: int, height: int) -> bool:
        """origin and centroid both in [0, width) x [0, height)."""
        pts = np.stack([self.origin_px, self.centroid])
        return bool(np.all((pts >= 0) & (pts < [width, height])))

    def as_vector(self) -> np.ndarray:
        """origin (2), dirs (6), centroid (2)."""
        return np.concatenate([self.origin_px, self.dir.reshape(-1), self.centroid])

    @classmethod
    def from_vector(cls, values: Sequence[float]) -> "AxisObservation":
        values = np.asarray(values, dtype=float)
        if values.shape != (10,):
            raise ValueError(f"an observation record has 10 scalars, got {values.shape}")
        return cls(values[:2], values[2:8].reshape(3, 2), values[8:])

    def to_record(self) -> List[float]:
        return [float(v) for v in self.as_vector()]

    def __add__(self, other: "AxisObservation") -> "AxisObservation":
        return AxisObservation.from_vector(self.as_vector() + other.as_vector())

    def __mul__(self, k: float) -> "AxisObservation":
        return AxisObservation.from_vector(self.as_vector() * k)

    __rmul__ = __mul__


class _LineFit:
    """Forward state of the moment fit, kept for the adjoint."""

    def __init__(self, weights: Sequence[np.ndarray], u: np.ndarray, v: np.ndarray):
        self.u = u
        self.v = v
        sums = []
        for w in weights:
            wu = w * u
            wv = w * v
            sums.append((w.sum(), wu.sum(), wv.sum(),
                         (wu * u).sum(), (wu * v).sum(), (wv * v).sum()))
        self.sums = np.array(sums)            # (3, 6)

        self.means = np.empty((3, 2))
        self.abc = np.empty((3, 3))
        self.theta = np.empty(3)
        self.r2 = np.empty(3)
        for i, (M0, Sx, Sy, Sxx, Sxy, Syy) in enumerate(self.sums):
            mx, my = Sx / M0, Sy / M0
            a = Sxx / M0 - mx * mx
            b = Sxy / M0 - mx * my
            c = Syy / M0 - my * my
            d = a - c
            r2 = d * d + 4.0 * b * b
            r = np.sqrt(r2)
            lam1 = 0.5 * (a + c + r)
            lam2 = 0.5 * (a + c - r)
            if r2 == 0.0 or (lam2 > 0 and lam1 / lam2 < MIN_LINE_RATIO):
                ratio = lam1 / lam2 if lam2 > 0 else 1.0
                raise DegenerateChannel(i, f"moment eigenvalue ratio {ratio:.3g} < {MIN_LINE_RATIO}")

            self.means[i] = mx, my
            self.abc[i] = a, b, c
            self.r2[i] = r2
            self.theta[i] = 0.5 * np.arctan2(2.0 * b, d)

        self.e = np.stack([np.cos(self.theta), np.sin(self.theta)], axis=1)
        self.n = np.stack([-np.sin(self.theta), np.cos(self.theta)], axis=1)

        self.P = np.einsum("ij,ik->ijk", self.n, self.n)
        self.A = self.P.sum(axis=0)
        if np.linalg.det(self.A) < MIN_INTERSECTION_DET:
            raise NoIntersection("the three axis lines are (nearly) parallel")
        q = np.einsum("ijk,ik->j", self.P, self.means)
        self.origin = np.linalg.solve(self.A, q)

        along = np.einsum("ij,ij->i", self.e, self.means - self.origin)
        self.sign = np.where(along < 0, -1.0, 1.0)
        self.dir = self.e * self.sign[:, None]

        self.total_mass = self.sums[:, 0].sum()
        self.centroid = np.array([self.sums[:, 1].sum(), self.sums[:, 2].sum()]) / self.total_mass

    def observation(self) -> AxisObservation:
        return AxisObservation(self.origin.copy(), self.dir.copy(), self.centroid.copy())

    def backward(self, cot: AxisObservation) -> np.ndarray:
        """Adjoint of observation() w.r.t. the six sums of every channel."""
        g_sums = np.zeros((3, 6))

        u_ = np.linalg.solve(self.A, cot.origin_px)
        for i in range(3):
            M0, Sx, Sy, Sxx, Sxy, Syy = self.sums[i]
            mx, my = self.means[i]
            a, b, c = self.abc[i]
            th = self.theta[i]

            g_m = self.P[i] @ u_
            g_P = np.outer(u_, self.means[i] - self.origin)
            g_n = (g_P + g_P.T) @ self.n[i]

            g_th = g_n @ np.array([-np.cos(th), -np.sin(th)])
            g_th += self.sign[i] * (cot.dir[i] @ np.array([-np.sin(th), np.cos(th)]))

            d = a - c
            g_b = g_th * d / self.r2[i]
            g_d = -g_th * b / self.r2[i]
            g_a, g_c = g_d, -g_d

            g_mx = g_m[0] - 2.0 * mx * g_a - my * g_b
            g_my = g_m[1] - mx * g_b - 2.0 * my * g_c

            g_M0 = -(g_a * Sxx + g_b * Sxy + g_c * Syy) / (M0 * M0)
            g_M0 -= (g_mx * mx + g_my * my) / M0

            g_sums[i] = (g_M0, g_mx / M0, g_my / M0, g_a / M0, g_b / M0, g_c / M0)

        Mt = self.total_mass
        g_sums[:, 0] -= (cot.centroid @ self.centroid) / Mt
        g_sums[:, 1] += cot.centroid[0] / Mt
        g_sums[:, 2] += cot.centroid[1] / Mt
        return g_sums

    def weight_gradient(self, g_sums: np.ndarray) -> np.ndarray:
        """Broadcast per-channel sum gradients to (H, W, 3) weight gradients."""
        u, v = self.u, self.v
        basis = np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=-1)
        return np.einsum("hwk,ck->hwc", basis, g_sums)


def _grid(data: np.ndarray):
    height, width = data.shape[:2]
    v, u = np.mgrid[0:height, 0:width].astype(float)
    return u, v


def _as_array(img) -> np.ndarray:
    data = getattr(img, "data", img)
    return np.asarray(data, dtype=float)


def extract_axes_hard(img) -> AxisObservation:
    data = _as_array(img)
    weights = []
    for i in range(3):
        p = data[:, :, i]
        mask = p > HARD_THRESHOLD
        count = int(mask.sum())
        if count < MIN_HARD_PIXELS:
            raise EmptyChannel(i, f"{count} pixels above {HARD_THRESHOLD}, need {MIN_HARD_PIXELS}")
        weights.append(np.where(mask, p, 0.0))

    u, v = _grid(data)
    obs = _LineFit(weights, u, v).observation()
    height, width = data.shape[:2]
    if not obs.inside(width, height):
        raise OutsideImage(f"axes intersect at ({obs.origin_px[0]:.1f}, {obs.origin_px[1]:.1f}), "
                           f"outside the {width}x{height} image")
    return obs


def _soft_gates(data: np.ndarray, sharpness: float):
    if sharpness <= 0:
        raise ValueError(f"sharpness must be positive, got {sharpness}")

    gates = expit(sharpness * (data - HARD_THRESHOLD))
    for i in range(3):
        mass = gates[:, :, i].sum()
        if mass <= MIN_SOFT_MASS:
            raise VanishingMass(i, f"soft mass {mass:.3g} under {MIN_SOFT_MASS}")
    return gates


def _soft_fit(data: np.ndarray, sharpness: float):
    gates = _soft_gates(data, sharpness)
    weights = data * gates
    u, v = _grid(data)
    fit = _LineFit([weights[:, :, i] for i in range(3)], u, v)
    return fit, gates


def extract_axes_soft(img, sharpness: float = DEFAULT_SHARPNESS) -> AxisObservation:
    fit, _ = _soft_fit(_as_array(img), sharpness)
    return fit.observation()


def soft_extract_vjp(img, sharpness: float, cotangent: AxisObservation) -> np.ndarray:
    """Gradient of <cotangent, extract_axes_soft(img)> with respect to img."""
    data = _as_array(img)
    fit, gates = _soft_fit(data, sharpness)
    g_w = fit.weight_gradient(fit.backward(cotangent))
    # w = p * gate(p)
    dw_dp = gates + data * sharpness * gates * (1.0 - gates)
    return g_w * dw_dp


def extract_with_vjp(img, sharpness: float, cotangent_fn):
    """Observation and the image gradient of a loss whose cotangent depends on
    the observation, from a single forward pass."""
    data = _as_array(img)
    fit, gates = _soft_fit(data, sharpness)
    obs = fit.observation()
    cot = cotangent_fn(obs)
    g_w = fit.weight_gradient(fit.backward(cot))
    dw_dp = gates + data * sharpness * gates * (1.0 - gates)
    return obs, g_w * dw_dp
