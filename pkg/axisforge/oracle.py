"""
Self-checks against forward projection, analytic score fields and finite
differences. Each check reports its measured value next to its tolerance.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .camera import (
    CameraIntrinsics, Omega, Pose, compute_omega, project_axes, rot_x, rot_y,
)
from .config import RenderConfig, RunConfig
from .dataset import sample_pose
from .diffusion import (
    ArchConfig, GaussianScoreField, GuidanceConfig, MLPDenoiser,
    gaussian_denoiser, make_schedule, sample_chain, sampling_timesteps,
)
from .diffusion.guidance import geo_gradient_xt
from .exceptions import AxisForgeError, SolverError
from .extraction import (
    AxisObservation, extract_axes_hard, extract_axes_soft, soft_extract_vjp,
)
from .metrics import rotation_geodesic
from .render import render_triaxis
from .tbm import corner_from_observation, recover_pose, solve_depth_scales
from .utils import make_rng

logger = logging.getLogger("axisforge.oracle")


@dataclass(frozen=True)
class OracleResult:
    name: str
    tolerance: float
    measured: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def to_record(self) -> Dict:
        return {
            "name": self.name, "tolerance": self.tolerance,
            "measured": None if not np.isfinite(self.measured) else self.measured,
            "passed": self.passed, "seconds": self.seconds, "detail": self.detail,
        }


@dataclass
class OracleReport:
    results: List[OracleResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[OracleResult]:
        return [r for r in self.results if not r.passed]

    def to_records(self) -> List[Dict]:
        return [r.to_record() for r in self.results]

    def format(self) -> str:
        lines = [f"{'oracle':<34} {'measured':>12} {'tolerance':>12}  result"]
        for r in self.results:
            lines.append(f"{r.name:<34} {r.measured:>12.4g} {r.tolerance:>12.4g}  "
                         f"{'pass' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def _within(name, measured, tolerance, detail="") -> OracleResult:
    measured = float(measured)
    return OracleResult(name, tolerance, measured,
                        bool(np.isfinite(measured) and measured < tolerance), detail=detail)


ROUND_TRIP_RENDER = RenderConfig(size=128, thickness=2.0, axis_len=1.0, depth_min=4.0,
                                 depth_max=6.0, lateral=0.1, min_axis_px=1.0)
RASTER_RENDER = RenderConfig(size=128, thickness=2.0, axis_len=1.0, depth_min=4.0,
                             depth_max=6.0, lateral=0.1, min_axis_px=12.0)


def random_poses(rng: np.random.Generator, n: int, render: RenderConfig = ROUND_TRIP_RENDER):
    K = render.intrinsics()
    return K, [sample_pose(rng, K, render) for _ in range(n)]


def check_geometry_round_trip(rng: np.random.Generator, n: int = 1000) -> List[OracleResult]:
    """Exact axis lines through the corner solver reproduce the pose."""
    K, poses = random_poses(rng, n)
    rot_err, trans_err = [], []
    failures = 0
    for pose in poses:
        obs = AxisObservation.from_lines(project_axes(K, pose))
        try:
            pred = recover_pose(obs, K, scale_lambda_O=float(pose.T[2]), relaxed=False)
        except AxisForgeError:
            failures += 1
            continue
        rot_err.append(np.radians(rotation_geodesic(pose.R, pred.R)))
        trans_err.append(np.linalg.norm(pred.T - pose.T) / np.linalg.norm(pose.T))

    detail = f"{n} poses, {failures} solver failures"
    if failures:
        return [OracleResult("geometry_round_trip_rot_rad", 1e-6, np.inf, False, detail=detail),
                OracleResult("geometry_round_trip_trans_rel", 1e-6, np.inf, False, detail=detail)]
    return [_within("geometry_round_trip_rot_rad", max(rot_err), 1e-6, detail),
            _within("geometry_round_trip_trans_rel", max(trans_err), 1e-6, detail)]


def check_orthogonality_residuals(rng: np.random.Generator, n: int = 200,
                                  omega_perturbation: float = 0.0) -> List[OracleResult]:
    """
    Every accepted corner solution satisfies the three orthogonality rows.
    A nonzero `omega_perturbation` breaks the symmetry of omega, which the
    check must then flag.
    """
    K, poses = random_poses(rng, n)
    omega = compute_omega(K)
    if omega_perturbation:
        m = omega.m.copy()
        m[0, 1] += omega_perturbation
        omega = Omega(m)

    worst = 0.0
    count = 0
    for pose in poses:
        corner = corner_from_observation(AxisObservation.from_lines(project_axes(K, pose)))
        try:
            solutions = solve_depth_scales(corner, omega, K)
        except SolverError as exc:
            return [OracleResult("orthogonality_residual", 1e-9, np.inf, False,
                                 detail=f"{type(exc).__name__}: {exc}")]
        for sol in solutions:
            worst = max(worst, sol.residual)
            count += 1
    return [_within("orthogonality_residual", worst, 1e-9, f"{count} accepted solutions")]


def _dir_errors_deg(obs: AxisObservation, exact) -> np.ndarray:
    cos = np.clip(np.einsum("ij,ij->i", obs.dir, exact.dir), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def check_raster_path(rng: np.random.Generator, n: int = 500) -> List[OracleResult]:
    """Render at 128 px, extract, solve; failures count as 180 degree errors."""
    K, poses = random_poses(rng, n, RASTER_RENDER)
    rot, dirs = [], []
    failures = 0
    for pose in poses:
        img = render_triaxis(K, pose, RASTER_RENDER.axis_len, RASTER_RENDER.thickness)
        try:
            obs = extract_axes_hard(img)
            dirs.append(_dir_errors_deg(obs, project_axes(K, pose, RASTER_RENDER.axis_len)).max())
            pred = recover_pose(obs, K, scale_lambda_O=float(pose.T[2]))
            rot.append(rotation_geodesic(pose.R, pred.R))
        except AxisForgeError:
            failures += 1
            rot.append(180.0)

    rot = np.array(rot)
    detail = f"{n} poses, {failures} failures"
    return [
        _within("render_extract_median_deg", np.median(dirs) if dirs else np.inf, 2.0, detail),
        _within("raster_rotation_median_deg", np.median(rot), 2.0, detail),
        _within("raster_rotation_p95_deg", np.percentile(rot, 95), 5.0, detail),
    ]


def gaussian_chain_moments(sched, ts: Sequence[int], mean: float, variance: float,
                           x_mean: float = 0.0, x_var: float = 1.0):
    """
    Mean and variance after deterministic DDIM steps along `ts` with the
    exact Gaussian noise predictor. Each step is affine in x_t.
    """
    ts = list(ts) + [0]
    for t, t_prev in zip(ts[:-1], ts[1:]):
        ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
        v = ab * variance + 1.0 - ab
        a = (np.sqrt(ab_prev) * np.sqrt(ab) * variance + np.sqrt(1.0 - ab_prev) * np.sqrt(1.0 - ab)) / v
        b = (np.sqrt(ab_prev) * (1.0 - ab) - np.sqrt(1.0 - ab_prev) * np.sqrt(1.0 - ab) * np.sqrt(ab)) * mean / v
        x_mean = a * x_mean + b
        x_var = a * a * x_var
    return x_mean, x_var


def check_ddim_gaussian(rng: np.random.Generator, chains: int = 10000) -> List[OracleResult]:
    """Scalar N(2, 0.25) data through the deterministic sampler."""
    m, s2 = 2.0, 0.25
    sched = make_schedule(1000, 1e-4, 0.02)
    field_ = GaussianScoreField(np.full(chains, m), s2)
    den = gaussian_denoiser(field_, sched)

    results = []
    for steps in (50, 1000):
        x = sample_chain(den, None, None, sched, 0.0, steps, rng, (chains,))
        mu, var = float(x.mean()), float(x.var())
        exp_mu, exp_var = gaussian_chain_moments(sched, sampling_timesteps(sched, steps), m, s2)
        se = np.sqrt(var / chains)
        results.append(_within(f"ddim_{steps}_mean_se", abs(mu - exp_mu) / se, 3.0,
                               f"mean {mu:.4f}, chain prediction {exp_mu:.4f}"))
        results.append(_within(f"ddim_{steps}_var_rel", abs(var - exp_var) / exp_var, 0.05,
                               f"variance {var:.4f}, chain prediction {exp_var:.4f}"))
    # the long chain also has to land on the data distribution itself
    results.append(_within("ddim_1000_var_vs_data", abs(var - s2) / s2, 0.05,
                           f"variance {var:.4f} against {s2}"))
    return results


def check_gaussian_vjp(rng: np.random.Generator) -> List[OracleResult]:
    sched = make_schedule(1000, 1e-4, 0.02)
    den = gaussian_denoiser(GaussianScoreField(rng.uniform(0, 1, 64), 0.05), sched)
    x = rng.standard_normal(64)
    cot, direction = rng.standard_normal(64), rng.standard_normal(64)
    h = 1e-4
    fd = cot @ (den.evaluate(x + h * direction, 500) - den.evaluate(x - h * direction, 500)) / (2 * h)
    an = den.vjp(x, 500, None, cot) @ direction
    return [_within("gaussian_vjp_rel", abs(fd - an) / max(abs(an), 1e-12), 1e-8)]


def _probe_scene(size: int = 32):
    K = CameraIntrinsics.reference(size)
    pose = Pose(rot_x(25.0) @ rot_y(-35.0), np.array([0.1, -0.05, 3.5]))
    other = Pose(rot_x(30.0) @ rot_y(-30.0), np.array([0.1, -0.05, 3.5]))
    clean = render_triaxis(K, pose, 1.5, 1.0).data
    target = extract_axes_soft(render_triaxis(K, other, 1.5, 1.0))
    return clean, target


def check_extraction_vjp(rng: np.random.Generator, sharpness: float = 20.0) -> List[OracleResult]:
    img, _ = _probe_scene()
    cot = AxisObservation.from_vector(rng.standard_normal(10))
    direction = rng.standard_normal(img.shape)
    h = 1e-4

    def f(x):
        return float(extract_axes_soft(x, sharpness).as_vector() @ cot.as_vector())

    fd = (f(img + h * direction) - f(img - h * direction)) / (2 * h)
    an = float((soft_extract_vjp(img, sharpness, cot) * direction).sum())
    return [_within("extraction_vjp_rel", abs(fd - an) / max(abs(an), 1e-12), 1e-4,
                    f"sharpness {sharpness:g}")]


def check_guidance_gradient(rng: np.random.Generator, probes: int = 20,
                            sharpness: float = 50.0) -> List[OracleResult]:
    """geo_loss gradient w.r.t. x_t against central differences mid-chain."""
    clean, target = _probe_scene()
    sched = make_schedule(1000, 1e-4, 0.02)
    den = gaussian_denoiser(GaussianScoreField(clean, 0.01), sched)
    t = 500
    ab = sched.alpha_bar[t]
    x_t = np.sqrt(ab) * clean + np.sqrt(1.0 - ab) * rng.standard_normal(clean.shape)

    _, grad = geo_gradient_xt(x_t, t, den, None, target, sharpness, sched)

    # probe away from the clamp boundaries of the predicted clean image
    x0_hat = (x_t - np.sqrt(1.0 - ab) * den.evaluate(x_t, t)) / np.sqrt(ab)
    candidates = np.argwhere((x0_hat > 0.05) & (x0_hat < 0.95))
    picks = candidates[rng.choice(len(candidates), size=probes, replace=len(candidates) < probes)]

    h = 1e-3
    worst = 0.0
    for idx in map(tuple, picks):
        def loss_at(delta):
            x = x_t.copy()
            x[idx] += delta
            loss, _ = geo_gradient_xt(x, t, den, None, target, sharpness, sched)
            return loss
        fd = (loss_at(h) - loss_at(-h)) / (2 * h)
        scale = max(abs(grad[idx]), 1e-12)
        worst = max(worst, abs(fd - grad[idx]) / scale)
    return [_within("guidance_gradient_rel", worst, 1e-3, f"{probes} probes at t={t}")]


def check_rho_zero(rng_seed: int) -> List[OracleResult]:
    """rho = 0 and disabled guidance give bit-identical stochastic chains."""
    clean, target = _probe_scene()
    sched = make_schedule(1000, 1e-4, 0.02)
    den = gaussian_denoiser(GaussianScoreField(clean, 0.01), sched)
    a = sample_chain(den, None, GuidanceConfig(target=target, rho=0.0), sched, 0.5, 20,
                     np.random.default_rng(rng_seed), clean.shape)
    b = sample_chain(den, None, GuidanceConfig.disabled(), sched, 0.5, 20,
                     np.random.default_rng(rng_seed), clean.shape)
    diff = float(np.abs(a - b).max())
    return [OracleResult("rho_zero_bitexact", 0.0, diff, diff == 0.0)]


def check_mlp_gradient(rng: np.random.Generator, probes: int = 10) -> List[OracleResult]:
    arch = ArchConfig(size=4, hidden=16, layers=2, emb_dim=8)
    model = MLPDenoiser.initialize(arch, rng)
    x_t = rng.standard_normal((3, 4, 4, 3))
    cond = rng.uniform(0, 1, (3, 4, 4, 1))
    t = np.array([10, 400, 900])
    eps = rng.standard_normal(x_t.shape)

    _, grads = model.loss_and_grads(x_t, t, cond, eps)
    h = 1e-5
    worst = 0.0
    for _ in range(probes):
        k = int(rng.integers(len(model.params)))
        idx = tuple(int(rng.integers(s)) for s in model.params[k].shape)
        saved = model.params[k][idx]
        model.params[k][idx] = saved + h
        up, _ = model.loss_and_grads(x_t, t, cond, eps)
        model.params[k][idx] = saved - h
        down, _ = model.loss_and_grads(x_t, t, cond, eps)
        model.params[k][idx] = saved
        fd = (up - down) / (2 * h)
        an = grads[k][idx]
        worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-8))
    return [_within("mlp_gradient_rel", worst, 1e-3, f"{probes} weight probes")]


def check_schedule(config: RunConfig) -> List[OracleResult]:
    sched = config.schedule.build()
    ab = sched.alpha_bar
    monotone = bool(np.all(np.diff(ab) < 0))
    bounded = bool(ab[0] == 1.0 and ab[-1] > 0)
    return [OracleResult("schedule_monotone", 0.0, 0.0 if monotone and bounded else 1.0,
                         monotone and bounded, detail=f"alpha_bar[T]={ab[-1]:.3g}")]


OracleFn = Callable[[], List[OracleResult]]


def oracle_suite(config: RunConfig, quick: bool = False,
                 omega_perturbation: float = 0.0) -> Dict[str, OracleFn]:
    seed = config.seeds.seed

    def rng(name):
        return make_rng(seed, "oracle", name)

    scale = 5 if quick else 1
    return {
        "geometry_round_trip": lambda: check_geometry_round_trip(rng("round_trip"), 1000 // scale),
        "orthogonality_residual": lambda: check_orthogonality_residuals(
            rng("residual"), 200 // scale, omega_perturbation),
        "raster_path": lambda: check_raster_path(rng("raster"), 500 // scale),
        "ddim_gaussian": lambda: check_ddim_gaussian(rng("ddim")),
        "gaussian_vjp": lambda: check_gaussian_vjp(rng("gaussian_vjp")),
        "extraction_vjp": lambda: check_extraction_vjp(rng("extraction_vjp")),
        "guidance_gradient": lambda: check_guidance_gradient(rng("guidance")),
        "rho_zero": lambda: check_rho_zero(seed),
        "mlp_gradient": lambda: check_mlp_gradient(rng("mlp")),
        "schedule": lambda: check_schedule(config),
    }


def cmd_oracle(config: RunConfig, quick: bool = False, omega_perturbation: float = 0.0,
               only: Optional[Sequence[str]] = None) -> OracleReport:
    suite = oracle_suite(config, quick, omega_perturbation)
    if only:
        unknown = set(only) - set(suite)
        if unknown:
            raise ValueError(f"unknown oracles: {', '.join(sorted(unknown))}")
        suite = {k: v for k, v in suite.items() if k in only}

    report = OracleReport()
    for name, check in suite.items():
        started = time.perf_counter()
        try:
            results = check()
        except AxisForgeError as exc:
            logger.error(f"caught an error in oracle '{name}': {exc}", exc_info=exc)
            results = [OracleResult(name, 0.0, np.inf, False, detail=f"{type(exc).__name__}: {exc}")]
        elapsed = time.perf_counter() - started
        for r in results:
            report.results.append(OracleResult(r.name, r.tolerance, r.measured, r.passed,
                                               elapsed / len(results), r.detail))
            level = logging.INFO if r.passed else logging.WARNING
            logger.log(level, "%s: measured %.4g, tolerance %.4g", r.name, r.measured, r.tolerance)

    return report
