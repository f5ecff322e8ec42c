
from .schedule import (
    DiffusionSchedule, make_schedule, forward_diffuse, q_sample, predict_x0,
    ddim_sigma, ddim_step,
)
from .denoiser import DenoiserInterface, GaussianScoreField, GaussianDenoiser, gaussian_denoiser
from .guidance import GuidanceConfig, geo_loss, guided_epsilon, guidance_step, geo_gradient_xt
from .sampler import SamplingLog, sampling_timesteps, sample, sample_chain
from .mlp import (
    ArchConfig, OptConfig, MLPDenoiser, TrainingExample, train_denoiser,
    save_checkpoint, load_checkpoint,
)
