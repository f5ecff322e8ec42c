import numpy as np
import pytest

from axisforge.camera import CameraIntrinsics, Pose, rot_x, rot_y
from axisforge.diffusion import (
    GaussianScoreField, GuidanceConfig, SamplingLog, gaussian_denoiser, make_schedule,
    sample, sample_chain, sampling_timesteps,
)
from axisforge.diffusion.schedule import (
    ddim_sigma, ddim_step, forward_diffuse, predict_x0, q_sample,
)
from axisforge.exceptions import DiffusionError, InvalidSchedule, InvalidSigma
from axisforge.render import render_triaxis

SCHED = make_schedule(1000, 1e-4, 0.02)


def _small_scene():
    K = CameraIntrinsics.reference(32)
    pose = Pose(rot_x(25.0) @ rot_y(-35.0), np.array([0.1, -0.05, 3.5]))
    return render_triaxis(K, pose, 1.5, 1.0).data


def test_schedule_shape():
    ab = SCHED.alpha_bar
    assert len(ab) == 1001
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert 0.0 < ab[-1] < 1e-3
    assert SCHED.zeta[1] == pytest.approx(1e-4)
    assert SCHED.to_record() == {"T": 1000, "zeta_start": 1e-4, "zeta_end": 0.02}


def test_schedule_validation():
    with pytest.raises(InvalidSchedule):
        make_schedule(0, 1e-4, 0.02)
    with pytest.raises(InvalidSchedule):
        make_schedule(10, 0.0, 0.02)
    with pytest.raises(InvalidSchedule):
        make_schedule(10, 0.03, 0.02)
    with pytest.raises(DiffusionError):
        SCHED.check_t(0)
    with pytest.raises(DiffusionError):
        SCHED.check_t(1001)


def test_zero_noise_limit():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(size=(4, 4, 3))
    eps = rng.standard_normal(x0.shape)
    assert np.array_equal(q_sample(x0, 1.0, eps), x0)


def test_forward_diffuse_then_predict_x0():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(size=(8, 8, 3))
    x_t, eps = forward_diffuse(x0, 300, SCHED, rng)
    assert np.allclose(predict_x0(x_t, 300, eps, SCHED), x0, atol=1e-12)


def test_forward_diffuse_moments():
    x0 = np.full(100000, 0.7)
    x_t, _ = forward_diffuse(x0, 300, SCHED, np.random.default_rng(2))
    ab = SCHED.alpha_bar[300]
    assert abs(x_t.mean() - np.sqrt(ab) * 0.7) < 0.015
    assert abs(x_t.var() - (1.0 - ab)) < 0.02


def test_one_step_noising_composes_to_the_closed_form():
    # x_t = sqrt(1 - zeta_t) x_{t-1} + sqrt(zeta_t) n keeps the noise variance at 1 - alpha_bar_t
    var = 0.0
    for t in range(1, SCHED.T + 1):
        var = (1.0 - SCHED.zeta[t]) * var + SCHED.zeta[t]
        assert var == pytest.approx(1.0 - SCHED.alpha_bar[t], abs=1e-12)


def test_deterministic_ddim_step_with_exact_noise():
    rng = np.random.default_rng(2)
    x0 = rng.uniform(size=(8, 8, 3))
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, SCHED.alpha_bar[400], eps)

    x_prev = ddim_step(x_t, 400, eps, SCHED)
    assert np.allclose(x_prev, q_sample(x0, SCHED.alpha_bar[399], eps), atol=1e-12)

    strided = ddim_step(x_t, 400, eps, SCHED, t_prev=380)
    assert np.allclose(strided, q_sample(x0, SCHED.alpha_bar[380], eps), atol=1e-12)

    # the last step lands on the clean sample
    x_1 = q_sample(x0, SCHED.alpha_bar[1], eps)
    assert np.allclose(ddim_step(x_1, 1, eps, SCHED), x0, atol=1e-12)


def test_ddim_step_sigma_bounds():
    x = np.zeros((2, 2, 3))
    too_big = np.sqrt(1.0 - SCHED.alpha_bar[99]) * 1.01
    with pytest.raises(InvalidSigma):
        ddim_step(x, 100, x, SCHED, sigma=too_big, rng=np.random.default_rng(0))
    with pytest.raises(InvalidSigma):
        ddim_step(x, 100, x, SCHED, sigma=-0.1)
    with pytest.raises(InvalidSigma):
        ddim_step(x, 100, x, SCHED, sigma=0.01)
    with pytest.raises(InvalidSchedule):
        ddim_step(x, 100, x, SCHED, t_prev=100)


def test_ddim_sigma():
    assert ddim_sigma(SCHED, 500, 480, 0.0) == 0.0
    full = ddim_sigma(SCHED, 500, 480, 1.0)
    assert 0.0 < full < np.sqrt(1.0 - SCHED.alpha_bar[480])
    assert ddim_sigma(SCHED, 500, 480, 0.5) == pytest.approx(0.5 * full)


def test_sampling_timesteps():
    ts = sampling_timesteps(SCHED, 50)
    assert len(ts) == 50
    assert ts[0] == 981 and ts[-1] == 1
    assert all(a - b == 20 for a, b in zip(ts, ts[1:]))

    assert sampling_timesteps(SCHED, 1000) == list(range(1000, 0, -1))

    quad = sampling_timesteps(SCHED, 50, "quad")
    assert quad[-1] == 1
    assert quad == sorted(quad, reverse=True)

    with pytest.raises(InvalidSchedule):
        sampling_timesteps(SCHED, 0)
    with pytest.raises(InvalidSchedule):
        sampling_timesteps(SCHED, 1001)
    with pytest.raises(InvalidSchedule):
        sampling_timesteps(SCHED, 10, "cosine")


def test_gaussian_denoiser_is_the_scaled_score():
    rng = np.random.default_rng(3)
    mean = rng.uniform(size=(100,))
    var = rng.uniform(0.01, 0.5, size=(100,))
    den = gaussian_denoiser(GaussianScoreField(mean, var), SCHED)

    for t in (1, 10, 250, 999):
        ab = SCHED.alpha_bar[t]
        x = rng.standard_normal(100)
        expected = np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * mean) / (ab * var + 1.0 - ab)
        assert np.abs(den.evaluate(x, t) - expected).max() < 1e-10
        assert np.abs(den.evaluate(x, t) + np.sqrt(1.0 - ab) * den.score(x, t)).max() < 1e-10


def test_gaussian_denoiser_vjp():
    rng = np.random.default_rng(4)
    den = gaussian_denoiser(GaussianScoreField(rng.uniform(size=(4, 4, 3)), 0.1), SCHED)
    x = rng.standard_normal((4, 4, 3))
    cot = rng.standard_normal(x.shape)
    direction = rng.standard_normal(x.shape)
    h = 1e-6
    fd = ((den.evaluate(x + h * direction, 300) - den.evaluate(x - h * direction, 300))
          / (2 * h) * cot).sum()
    an = (den.vjp(x, 300, None, cot) * direction).sum()
    assert abs(fd - an) <= 1e-6 * max(1.0, abs(an))


def test_score_field_validation():
    with pytest.raises(ValueError):
        GaussianScoreField(np.zeros(3), 0.0)
    field = GaussianScoreField(np.zeros((2, 3)), 0.5)
    assert field.variance.shape == (2, 3)


def test_sampler_recovers_the_mean_image():
    mean = _small_scene()
    den = gaussian_denoiser(GaussianScoreField(mean, 1e-6), SCHED)
    out = sample(den, None, GuidanceConfig.disabled(), SCHED, 0.0, 50,
                 np.random.default_rng(5), 32)
    assert out.data.shape == (32, 32, 3)
    assert np.abs(out.data - mean).mean() < 0.05


def test_sampler_is_seeded():
    mean = _small_scene()
    den = gaussian_denoiser(GaussianScoreField(mean, 0.01), SCHED)
    a = sample_chain(den, None, None, SCHED, 0.5, 10, np.random.default_rng(6), mean.shape)
    b = sample_chain(den, None, None, SCHED, 0.5, 10, np.random.default_rng(6), mean.shape)
    c = sample_chain(den, None, None, SCHED, 0.5, 10, np.random.default_rng(7), mean.shape)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rho_zero_matches_disabled_guidance():
    from axisforge.extraction import extract_axes_soft

    mean = _small_scene()
    target = extract_axes_soft(mean)
    den = gaussian_denoiser(GaussianScoreField(mean, 0.01), SCHED)
    a = sample_chain(den, None, GuidanceConfig(target=target, rho=0.0), SCHED, 0.5, 20,
                     np.random.default_rng(8), mean.shape)
    b = sample_chain(den, None, GuidanceConfig.disabled(), SCHED, 0.5, 20,
                     np.random.default_rng(8), mean.shape)
    assert np.array_equal(a, b)


def test_sampling_log():
    from axisforge.extraction import extract_axes_soft

    mean = _small_scene()
    den = gaussian_denoiser(GaussianScoreField(mean, 0.01), SCHED)
    log = SamplingLog()
    sample_chain(den, None, GuidanceConfig(target=extract_axes_soft(mean), rho=0.5), SCHED,
                 0.0, 10, np.random.default_rng(9), mean.shape, log=log)
    assert [s.t for s in log.steps] == sampling_timesteps(SCHED, 10)

    records = log.to_records()
    assert set(records[0]) == {"t", "guidance_norm", "skipped", "loss"}
    for rec, step in zip(records, log.steps):
        assert rec["skipped"] == (rec["loss"] is None)
        assert step.guidance_norm >= 0.0

    unguided = SamplingLog()
    sample_chain(den, None, GuidanceConfig.disabled(), SCHED, 0.0, 10,
                 np.random.default_rng(9), mean.shape, log=unguided)
    assert unguided.skipped == []
    assert all(s.guidance_norm == 0.0 for s in unguided.steps)
