import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from ..exceptions import InvalidSchedule
from ..render import TriAxisImage
from .denoiser import DenoiserInterface
from .guidance import GuidanceConfig, guidance_step
from .schedule import DiffusionSchedule, ddim_sigma, ddim_step

logger = logging.getLogger("axisforge.diffusion.sampler")


@dataclass(frozen=True)
class StepRecord:
    t: int
    guidance_norm: float
    skipped: bool
    loss: float

    def to_record(self):
        return {"t": self.t, "guidance_norm": self.guidance_norm,
                "skipped": self.skipped,
                "loss": None if np.isnan(self.loss) else self.loss}


@dataclass
class SamplingLog:
    steps: List[StepRecord] = field(default_factory=list)

    @property
    def skipped(self) -> List[int]:
        """Timesteps where guidance was skipped."""
        return [s.t for s in self.steps if s.skipped]

    def to_records(self):
        return [s.to_record() for s in self.steps]


def sampling_timesteps(sched: DiffusionSchedule, steps: int, spacing: str = "uniform") -> List[int]:
    """Descending strided timesteps; the last one is always t = 1."""
    if not (1 <= steps <= sched.T):
        raise InvalidSchedule(f"steps must be in 1..{sched.T}, got {steps}")

    if spacing == "uniform":
        stride = sched.T // steps
        ts = [1 + stride * k for k in range(steps)]
    elif spacing == "quad":
        grid = np.linspace(0.0, np.sqrt(sched.T - 1), steps) ** 2
        ts = sorted({1 + int(round(v)) for v in grid})
    else:
        raise InvalidSchedule(f"unknown timestep spacing '{spacing}'")

    return ts[::-1]


def sample_chain(denoiser: DenoiserInterface, cond, guidance: GuidanceConfig,
                 sched: DiffusionSchedule, sigma: float, steps: int,
                 rng: np.random.Generator, shape: Sequence[int],
                 spacing: str = "uniform", log: SamplingLog = None) -> np.ndarray:
    """
    Run the (guided) reverse process from x_T ~ N(0, I); returns raw x_0.
    `sigma` scales the per-step DDIM noise: 0 is deterministic, 1 matches
    the ancestral posterior variance.
    """
    guidance = guidance or GuidanceConfig.disabled()
    ts = sampling_timesteps(sched, steps, spacing)

    x = rng.standard_normal(tuple(shape))
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        step = guidance_step(x, t, denoiser, cond, guidance, sched)
        noise = ddim_sigma(sched, t, t_prev, sigma) if sigma > 0 else 0.0
        x = ddim_step(x, t, step.eps, sched, noise, rng, t_prev=t_prev)
        if log is not None:
            log.steps.append(StepRecord(t, step.norm, step.skipped, step.loss))

    if log is not None and log.skipped:
        logger.debug("guidance skipped at %d of %d steps", len(log.skipped), len(ts))
    return x


def sample(denoiser: DenoiserInterface, cond, guidance: GuidanceConfig,
           sched: DiffusionSchedule, sigma: float, steps: int, rng: np.random.Generator,
           size: int, spacing: str = "uniform", log: SamplingLog = None) -> TriAxisImage:
    x = sample_chain(denoiser, cond, guidance, sched, sigma, steps, rng,
                     (size, size, 3), spacing=spacing, log=log)
    return TriAxisImage(np.clip(x, 0.0, 1.0))
