import numpy as np
import pytest

from axisforge.diffusion import (
    ArchConfig, MLPDenoiser, OptConfig, TrainingExample, load_checkpoint, make_schedule,
    save_checkpoint, train_denoiser,
)
from axisforge.diffusion.mlp import CHECKPOINT_MAGIC, Adam, timestep_embedding
from axisforge.exceptions import CheckpointError, DiffusionError, DivergedLoss, IoError

ARCH = ArchConfig(size=4, hidden=16, layers=2, emb_dim=8)
SCHED = make_schedule(100, 1e-3, 0.05)


def _dataset(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return [TrainingExample(rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 1)))
            for _ in range(n)]


def test_timestep_embedding():
    emb = timestep_embedding([0, 5, 99], 8)
    assert emb.shape == (3, 8)
    assert np.array_equal(emb[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert np.allclose((emb[:, :4] ** 2 + emb[:, 4:] ** 2), 1.0)


def test_arch_dims():
    assert ARCH.out_dim == 48
    assert ARCH.in_dim == 64 + 8

    model = MLPDenoiser.initialize(ARCH, np.random.default_rng(0))
    assert [p.shape for p in model.params] == [(72, 16), (16,), (16, 16), (16,), (16, 48), (48,)]


def test_evaluate_shapes():
    model = MLPDenoiser.initialize(ARCH, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((4, 4, 3))
    assert model.evaluate(x, 10, np.zeros((4, 4, 1))).shape == (4, 4, 3)
    assert model.evaluate(x, 10, None).shape == (4, 4, 3)

    batch = np.stack([x, x])
    out = model.evaluate(batch, np.array([10, 10]), np.zeros((2, 4, 4, 1)))
    assert out.shape == (2, 4, 4, 3)
    assert np.allclose(out[0], out[1])


def test_parameter_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    model = MLPDenoiser.initialize(ARCH, rng)
    x_t = rng.standard_normal((3, 4, 4, 3))
    cond = rng.uniform(0, 1, (3, 4, 4, 1))
    t = np.array([10, 40, 90])
    eps = rng.standard_normal(x_t.shape)

    _, grads = model.loss_and_grads(x_t, t, cond, eps)
    h = 1e-5
    for k in range(len(model.params)):
        idx = tuple(int(rng.integers(s)) for s in model.params[k].shape)
        saved = model.params[k][idx]
        model.params[k][idx] = saved + h
        up, _ = model.loss_and_grads(x_t, t, cond, eps)
        model.params[k][idx] = saved - h
        down, _ = model.loss_and_grads(x_t, t, cond, eps)
        model.params[k][idx] = saved
        fd = (up - down) / (2 * h)
        assert abs(fd - grads[k][idx]) <= 1e-3 * max(abs(fd), abs(grads[k][idx]), 1e-8)


def test_input_vjp_matches_finite_differences():
    rng = np.random.default_rng(3)
    model = MLPDenoiser.initialize(ARCH, rng)
    x = rng.standard_normal((4, 4, 3))
    cond = rng.uniform(size=(4, 4, 1))
    cot = rng.standard_normal(x.shape)
    direction = rng.standard_normal(x.shape)
    h = 1e-6

    fd = ((model.evaluate(x + h * direction, 30, cond)
           - model.evaluate(x - h * direction, 30, cond)) / (2 * h) * cot).sum()
    an = (model.vjp(x, 30, cond, cot) * direction).sum()
    assert abs(fd - an) <= 1e-5 * max(1.0, abs(an))


def test_adam_clips_the_gradient_norm():
    params = [np.zeros(2)]
    opt = OptConfig(lr=0.1, clip_norm=1.0)
    adam = Adam(params, opt)
    adam.update(params, [np.array([300.0, 400.0])])
    # the first Adam step moves each coordinate by about lr against its sign
    assert np.allclose(params[0], [-0.1, -0.1], atol=1e-6)
    assert adam.step == 1


def test_training_is_seeded():
    opt = OptConfig(steps=5, batch_size=4, log_every=1)
    a = train_denoiser(_dataset(), ARCH, opt, SCHED, np.random.default_rng(4))
    b = train_denoiser(_dataset(), ARCH, opt, SCHED, np.random.default_rng(4))
    assert a.losses == b.losses
    assert len(a.losses) == 5
    assert a.optimizer.step == 5
    for p, q in zip(a.denoiser.params, b.denoiser.params):
        assert np.array_equal(p, q)


def test_training_logs_records():
    records = []
    opt = OptConfig(steps=6, batch_size=2, log_every=3)
    train_denoiser(_dataset(), ARCH, opt, SCHED, np.random.default_rng(5), log_fn=records.append)
    assert [r["step"] for r in records] == [3, 6]
    assert set(records[0]) == {"step", "loss", "running"}


def test_training_input_validation():
    opt = OptConfig(steps=1, batch_size=1)
    with pytest.raises(ValueError):
        train_denoiser([], ARCH, opt, SCHED, np.random.default_rng(0))
    bad = [TrainingExample(np.zeros((8, 8, 3)), np.zeros((8, 8, 1)))]
    with pytest.raises(ValueError):
        train_denoiser(bad, ARCH, opt, SCHED, np.random.default_rng(0))


@pytest.mark.slow
def test_overfits_a_single_sample():
    arch = ArchConfig(size=2, hidden=64, layers=2, emb_dim=16)
    sched = make_schedule(10, 0.5, 0.9)
    rng = np.random.default_rng(6)
    sample = [TrainingExample(rng.uniform(size=(2, 2, 3)), rng.uniform(size=(2, 2, 1)))]
    opt = OptConfig(steps=2000, batch_size=16, lr=3e-3)
    result = train_denoiser(sample, arch, opt, sched, rng)
    assert np.mean(result.losses[-100:]) < 0.05 * np.mean(result.losses[:10])


def test_runaway_learning_rate_diverges():
    opt = OptConfig(steps=50, batch_size=2, lr=100.0)
    with pytest.raises(DivergedLoss):
        train_denoiser(_dataset(), ARCH, opt, SCHED, np.random.default_rng(3))


def test_checkpoint_round_trip(tmp_path):
    opt = OptConfig(steps=3, batch_size=2)
    result = train_denoiser(_dataset(), ARCH, opt, SCHED, np.random.default_rng(7))
    path = tmp_path / "run" / "checkpoint.bin"
    save_checkpoint(path, result.denoiser, SCHED, result.optimizer)

    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)

    ckpt = load_checkpoint(path)
    assert ckpt.denoiser.arch == ARCH
    assert ckpt.sched.T == SCHED.T
    assert np.array_equal(ckpt.sched.alpha_bar, SCHED.alpha_bar)
    assert ckpt.optimizer.step == 3
    for p, q in zip(result.denoiser.params, ckpt.denoiser.params):
        assert np.array_equal(p.astype(np.float32).astype(np.float64), q)
    for p, q in zip(result.optimizer.m, ckpt.optimizer.m):
        assert np.array_equal(p.astype(np.float32).astype(np.float64), q)

    # weights only
    save_checkpoint(tmp_path / "weights.bin", result.denoiser, SCHED)
    assert load_checkpoint(tmp_path / "weights.bin").optimizer is None


def test_resume_continues_the_step_count(tmp_path):
    opt = OptConfig(steps=2, batch_size=2)
    first = train_denoiser(_dataset(), ARCH, opt, SCHED, np.random.default_rng(8))
    save_checkpoint(tmp_path / "c.bin", first.denoiser, SCHED, first.optimizer)

    resumed = train_denoiser(_dataset(), ARCH, opt, SCHED, np.random.default_rng(9),
                             resume=load_checkpoint(tmp_path / "c.bin", opt))
    assert resumed.optimizer.step == 4


def test_corrupt_checkpoints(tmp_path):
    model = MLPDenoiser.initialize(ARCH, np.random.default_rng(0))
    path = tmp_path / "c.bin"
    save_checkpoint(path, model, SCHED)
    raw = path.read_bytes()

    (tmp_path / "truncated.bin").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "truncated.bin")

    (tmp_path / "trailing.bin").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trailing.bin")

    (tmp_path / "foreign.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "foreign.bin")

    with pytest.raises(DiffusionError):
        load_checkpoint(tmp_path / "missing.bin")


def test_unwritable_checkpoint_path(tmp_path):
    model = MLPDenoiser.initialize(ARCH, np.random.default_rng(0))
    (tmp_path / "taken").write_text("a file, not a directory")
    with pytest.raises(IoError):
        save_checkpoint(tmp_path / "taken" / "c.bin", model, SCHED)
    (tmp_path / "dir.bin").mkdir()
    with pytest.raises(IoError):
        save_checkpoint(tmp_path / "dir.bin", model, SCHED)
