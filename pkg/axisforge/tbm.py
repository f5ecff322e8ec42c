"""
Triaxial back-projection: 6D pose from the image of a cube corner.

With x_O the image of the corner and x_A, x_B, x_C one image point on each
leg, the legs l_i = lambda_i K^-1 x_i - K^-1 x_O (corner depth normalized to
1) are pairwise orthogonal. Writing d_ij = x_i' Omega x_j with
Omega = K^-T K^-1 gives three bilinear equations in the depth scales; two of
them give two scales as rational functions of the third (lambda_A unless a
better conditioned pivot leg exists) and the remaining one becomes a
quadratic in it.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import polar

from .camera import CameraIntrinsics, Omega, Pose, compute_omega, project_axes
from .exceptions import (
    AllCandidatesRejected, DegenerateAxis, IllConditioned, InvalidOmega,
    NonPositiveDepth, NoValidSolution,
)
from .extraction import AxisObservation

logger = logging.getLogger("axisforge.tbm")

DEFAULT_PROBE_PX = 10.0
MIN_PROBE_PX = 1.0
MIN_DENOMINATOR = 1e-12
MAX_RESIDUAL = 1e-9
_A, _B, _C, _O = 0, 1, 2, 3


@dataclass(frozen=True)
class CornerImage:
    x_O: np.ndarray
    x_A: np.ndarray
    x_B: np.ndarray
    x_C: np.ndarray

    @property
    def points(self) -> np.ndarray:
        """Rows A, B, C, O."""
        return np.stack([self.x_A, self.x_B, self.x_C, self.x_O])


@dataclass(frozen=True)
class CornerSolution:
    lambdas: np.ndarray          # (lambda_A, lambda_B, lambda_C), lambda_O = 1
    legs: np.ndarray = field(repr=False)    # (3, 3), rows l_A, l_B, l_C
    residual: float = 0.0
    relaxed: bool = False


@dataclass(frozen=True)
class LegRatios:
    r_B: float = 1.0
    r_C: float = 1.0

    def __post_init__(self):
        if not (self.r_B > 0 and self.r_C > 0):
            raise ValueError(f"leg ratios must be positive, got {self.r_B}, {self.r_C}")

    @property
    def lengths(self) -> np.ndarray:
        return np.array([1.0, self.r_B, self.r_C])


@dataclass(frozen=True)
class SolverReport:
    """Diagnostics of one recover_pose call."""
    n_candidates: int
    n_rejected: int
    residual: float
    reprojection: float
    relaxed: bool
    convex: bool
    probe_px: float = DEFAULT_PROBE_PX


def corner_from_observation(obs: AxisObservation, probe_px: float = DEFAULT_PROBE_PX) -> CornerImage:
    if probe_px <= 0:
        raise ValueError(f"probe_px must be positive, got {probe_px}")

    o = np.asarray(obs.origin_px, dtype=float)

    def homogenize(p):
        return np.array([p[0], p[1], 1.0])

    legs = [homogenize(o + probe_px * obs.dir[i]) for i in range(3)]
    return CornerImage(homogenize(o), *legs)


def _gram(corner: CornerImage, omega: Omega) -> np.ndarray:
    X = corner.points
    return X @ omega.m @ X.T


def orthogonality_residuals(d: np.ndarray, lambdas) -> np.ndarray:
    """The three orthogonality rows (A,B), (B,C), (C,A) at the given depth scales."""
    lam = np.asarray(lambdas, dtype=float)

    def row(i, j):
        return (lam[i] * lam[j] * d[i, j] - lam[i] * d[i, _O]
                - lam[j] * d[j, _O] + d[_O, _O])

    return np.array([row(_A, _B), row(_B, _C), row(_C, _A)])


def _depth_polynomial(d: np.ndarray, order=(_A, _B, _C)) -> np.ndarray:
    """
    Coefficients (a, b, c) of the quadratic in the depth scale of the pivot
    leg `order[0]`; the other two scales are eliminated through the pivot's
    two orthogonality rows and substituted into the third.
    """
    i, j, k = order
    # N = l d_iO - d_OO, Dj = l d_ij - d_jO, Dk = l d_ki - d_kO
    n1, n0 = d[i, _O], -d[_O, _O]
    j1, j0 = d[i, j], -d[j, _O]
    k1, k0 = d[k, i], -d[k, _O]
    d_jk, d_jO, d_kO, d_OO = d[j, k], d[j, _O], d[k, _O], d[_O, _O]

    a = d_jk * n1 * n1 - d_jO * n1 * k1 - d_kO * n1 * j1 + d_OO * j1 * k1
    b = (2.0 * d_jk * n1 * n0 - d_jO * (n1 * k0 + n0 * k1)
         - d_kO * (n1 * j0 + n0 * j1) + d_OO * (j1 * k0 + j0 * k1))
    c = d_jk * n0 * n0 - d_jO * n0 * k0 - d_kO * n0 * j0 + d_OO * j0 * k0
    return np.array([a, b, c], dtype=float)


def _separation(poly: np.ndarray) -> float:
    """Signed squared distance between the roots; negative when they are complex."""
    a, b, c = poly
    if a == 0:
        return np.inf if b != 0 else -np.inf
    return (b * b - 4.0 * a * c) / (a * a)


def _pivot(d: np.ndarray):
    """The elimination order whose quadratic has the best separated roots."""
    orders = [(_A, _B, _C), (_B, _C, _A), (_C, _A, _B)]
    polys = [_depth_polynomial(d, order) for order in orders]
    best = max(range(3), key=lambda n: _separation(polys[n]))
    return orders[best], polys[best]


def _real_roots(poly: np.ndarray) -> List[float]:
    a, b, c = (float(v) for v in poly)
    if a == 0:
        return [] if b == 0 else [-c / b]
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return []
    # stable form, no cancellation between b and the root of the discriminant
    q = -0.5 * (b + np.copysign(np.sqrt(disc), b))
    if q == 0:
        return [0.0]
    return [q / a, c / q]


def _jacobian(d: np.ndarray, lam: np.ndarray) -> np.ndarray:
    la, lb, lc = lam
    J = np.zeros((3, 3))
    J[0, _A] = lb * d[_A, _B] - d[_A, _O]
    J[0, _B] = la * d[_A, _B] - d[_B, _O]
    J[1, _B] = lc * d[_B, _C] - d[_B, _O]
    J[1, _C] = lb * d[_B, _C] - d[_C, _O]
    J[2, _C] = la * d[_C, _A] - d[_C, _O]
    J[2, _A] = lc * d[_C, _A] - d[_A, _O]
    return J


def _refine(d: np.ndarray, lam: np.ndarray, iterations: int = 4) -> np.ndarray:
    """Newton on all three orthogonality rows; a step is kept only if it lowers the residual."""
    F = orthogonality_residuals(d, lam)
    best = np.abs(F).max()
    for _ in range(iterations):
        if best == 0:
            break
        try:
            step = np.linalg.solve(_jacobian(d, lam), -F)
        except np.linalg.LinAlgError:
            break
        trial = lam + step
        F_trial = orthogonality_residuals(d, trial)
        worst = np.abs(F_trial).max()
        if not np.isfinite(worst) or worst >= best:
            break
        lam, F, best = trial, F_trial, worst
    return lam


def _candidate(d: np.ndarray, order, lam_i: float, legs_of) -> Optional[CornerSolution]:
    i, j, k = order
    N = lam_i * d[i, _O] - d[_O, _O]
    Dj = lam_i * d[i, j] - d[j, _O]
    Dk = lam_i * d[k, i] - d[k, _O]
    if abs(Dj) < MIN_DENOMINATOR or abs(Dk) < MIN_DENOMINATOR:
        raise IllConditioned(
            f"depth elimination denominator vanishes at lambda_{'ABC'[i]}={lam_i:.6g}")

    lambdas = np.empty(3)
    lambdas[i], lambdas[j], lambdas[k] = lam_i, N / Dj, N / Dk
    if not np.all(np.isfinite(lambdas)) or np.any(lambdas <= 0):
        return None

    lambdas = _refine(d, lambdas)
    if np.any(lambdas <= 0):
        return None
    residual = float(np.abs(orthogonality_residuals(d, lambdas)).max())
    return CornerSolution(lambdas, legs_of(lambdas), residual)


def _leg_builder(corner: CornerImage, Kinv: Optional[np.ndarray]):
    rays = corner.points if Kinv is None else corner.points @ Kinv.T

    def legs_of(lambdas):
        return lambdas[:, None] * rays[:3] - rays[3]

    return legs_of


def _is_duplicate(sol: CornerSolution, others: List[CornerSolution]) -> bool:
    scale = np.abs(sol.lambdas).max()
    return any(np.abs(sol.lambdas - o.lambdas).max() <= 1e-9 * scale for o in others)


def solve_depth_scales(corner: CornerImage, omega: Omega,
                       K: CameraIntrinsics = None) -> List[CornerSolution]:
    """
    Every all-positive real solution of the orthogonality system. Legs are
    expressed in the camera frame when K is given, else in K-normalized
    coordinates up to K.

    The quadratic is set up in the depth scale of whichever leg separates its
    two roots best; when one leg runs nearly parallel to the image plane both
    roots crowd together in its own scale.
    """
    if not omega.is_valid():
        raise InvalidOmega("omega must be symmetric positive definite")

    d = _gram(corner, omega)
    order, poly = _pivot(d)
    legs_of = _leg_builder(corner, None if K is None else K.inverse)

    if poly[0] == 0 and poly[1] == 0:
        raise NoValidSolution("the depth polynomial vanishes identically")

    solutions = []
    ill = None
    for root in _real_roots(poly):
        try:
            sol = _candidate(d, order, root, legs_of)
        except IllConditioned as exc:
            ill = exc
            continue
        if sol is None or sol.residual >= MAX_RESIDUAL:
            continue
        if not _is_duplicate(sol, solutions):
            solutions.append(sol)

    if not solutions:
        if ill is not None:
            raise ill
        raise NoValidSolution("no real root with all depth scales positive")

    solutions.sort(key=lambda s: s.lambdas[0])
    return solutions


def _relaxed_depth_scales(corner: CornerImage, omega: Omega, K: CameraIntrinsics) -> List[CornerSolution]:
    """
    Closest real point of the depth quadratic when measurement noise pushes
    its discriminant below zero: the vertex of the parabola.
    """
    d = _gram(corner, omega)
    order, poly = _pivot(d)
    if poly[0] == 0:
        return []
    i, j, k = order
    lam_i = -poly[1] / (2.0 * poly[0])
    N = lam_i * d[i, _O] - d[_O, _O]
    Dj = lam_i * d[i, j] - d[j, _O]
    Dk = lam_i * d[k, i] - d[k, _O]
    if abs(Dj) < MIN_DENOMINATOR or abs(Dk) < MIN_DENOMINATOR:
        return []
    lambdas = np.empty(3)
    lambdas[i], lambdas[j], lambdas[k] = lam_i, N / Dj, N / Dk
    if not np.all(np.isfinite(lambdas)) or np.any(lambdas <= 0):
        return []
    residual = float(np.abs(orthogonality_residuals(d, lambdas)).max())
    legs = _leg_builder(corner, K.inverse)(lambdas)
    return [CornerSolution(lambdas, legs, residual, relaxed=True)]


def _frame(sol: CornerSolution) -> np.ndarray:
    """Normalized legs as columns."""
    return sol.legs.T / np.linalg.norm(sol.legs, axis=1)


def _exact_solutions(obs: AxisObservation, K: CameraIntrinsics, omega: Omega, probe_px: float):
    """
    Solve at `probe_px`, halving the probe while no right-handed solution
    comes out. A probe point past a leg's vanishing point back-projects
    behind the camera, so short, steep axes need a short probe.
    """
    probe = probe_px
    while True:
        try:
            solutions = solve_depth_scales(corner_from_observation(obs, probe), omega, K)
            if any(np.linalg.det(_frame(s)) > 0 for s in solutions):
                return probe, solutions
            last = AllCandidatesRejected(
                f"all {len(solutions)} corner solutions have a left-handed leg frame")
        except (NoValidSolution, IllConditioned) as exc:
            last = exc
        if probe / 2.0 < MIN_PROBE_PX:
            raise last
        probe /= 2.0
        logger.debug(f"retrying the corner solve with a {probe:g} px probe")


def _axis_residual(K, pose, ratios: LegRatios, obs: AxisObservation) -> float:
    """Sum of angles between the candidate's projected axes and the observed ones."""
    try:
        lines = project_axes(K, pose, 1.0)
    except (DegenerateAxis, NonPositiveDepth):
        return np.inf
    # projected directions do not depend on leg length; scaled endpoints
    # are checked for depth only
    ends = pose.transform(np.diag(ratios.lengths))
    if np.any(ends[:, 2] <= 0):
        return np.inf
    cos = np.clip(np.einsum("ij,ij->i", lines.dir, obs.dir), -1.0, 1.0)
    return float(np.arccos(cos).sum())



def recover_pose(obs: AxisObservation, K: CameraIntrinsics, ratios: LegRatios = None,
                 scale_lambda_O: float = 1.0, probe_px: float = DEFAULT_PROBE_PX,
                 relaxed: bool = True, report: list = None) -> Pose:
    """
    Pose whose projected axes best match the observation; among the corner
    solutions, those whose normalized legs form a left-handed frame are
    discarded, then the smallest axis reprojection residual wins.

    With `relaxed`, a noisy observation that admits no exact real solution
    falls back to the nearest real point of the depth quadratic.
    """
    if scale_lambda_O <= 0:
        raise ValueError(f"scale_lambda_O must be positive, got {scale_lambda_O}")
    ratios = ratios or LegRatios()

    omega = compute_omega(K)
    try:
        probe, solutions = _exact_solutions(obs, K, omega, probe_px)
    except (NoValidSolution, IllConditioned) as exc:
        if not relaxed:
            raise
        probe = probe_px
        solutions = _relaxed_depth_scales(corner_from_observation(obs, probe), omega, K)
        if not solutions:
            raise exc
        logger.debug("depth quadratic has no exact real root, using its vertex")

    T = scale_lambda_O * K.back_project(obs.origin_px)

    best = None
    rejected = 0
    for sol in solutions:
        M = _frame(sol)
        if np.linalg.det(M) <= 0:
            rejected += 1
            continue
        R, _ = polar(M)
        pose = Pose(R, T)
        err = _axis_residual(K, pose, ratios, obs)
        if best is None or err < best[0]:
            best = (err, pose, sol)

    if best is None:
        raise AllCandidatesRejected(
            f"all {len(solutions)} corner solutions have a left-handed leg frame")

    if report is not None:
        err, pose, sol = best
        # convex: every leg recedes from the camera
        convex = bool(np.all(sol.lambdas > 1.0))
        report.append(SolverReport(len(solutions), rejected, sol.residual, err,
                                   sol.relaxed, convex, probe))
    return best[1]
