"""
A small fully connected conditional noise predictor, trained with
hand-written reverse mode and Adam.

input  = [noisy tri-axis (H*W*3), query (H*W), sinusoidal t embedding (32)]
hidden = `layers` x (Linear -> SiLU) of width `hidden`
output = Linear to H*W*3
"""
import io
import struct
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit
from sqlblock.utils.json import json_dumps, json_loads
from tqdm import tqdm

from ..exceptions import CheckpointError, DivergedLoss, ExtractionError, IoError
from ..extraction import AxisObservation
from .guidance import geo_gradient_x0
from .schedule import DiffusionSchedule, make_schedule, q_sample

logger = logging.getLogger("axisforge.diffusion.mlp")

CHECKPOINT_MAGIC = b"AXISFORGE-CKPT\n"
CHECKPOINT_VERSION = 1
DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class ArchConfig:
    size: int = 32
    hidden: int = 512
    layers: int = 2
    emb_dim: int = 32

    @property
    def out_dim(self) -> int:
        return self.size * self.size * 3

    @property
    def in_dim(self) -> int:
        return self.size * self.size * 4 + self.emb_dim


@dataclass(frozen=True)
class OptConfig:
    steps: int = 20000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    # weight of the optional training-time geometric consistency term
    geo_weight: float = 0.0
    geo_sharpness: float = 50.0
    log_every: int = 10
    workers: int = 1


class TrainingExample(NamedTuple):
    x0: np.ndarray                  # (H, W, 3)
    cond: np.ndarray                # (H, W, 1)
    target: Optional[AxisObservation] = None


def timestep_embedding(t, dim: int = 32) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _silu(z):
    s = expit(z)
    return z * s, s


class MLPDenoiser:

    def __init__(self, arch: ArchConfig, params: List[np.ndarray]):
        self._arch = arch
        self.params = params

    @classmethod
    def initialize(cls, arch: ArchConfig, rng: np.random.Generator) -> "MLPDenoiser":
        dims = [arch.in_dim] + [arch.hidden] * arch.layers + [arch.out_dim]
        params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            params.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            params.append(np.zeros(fan_out))
        return cls(arch, params)

    @property
    def arch(self) -> ArchConfig:
        return self._arch

    def _inputs(self, x_t, t, cond):
        n = self._arch.size * self._arch.size
        x = np.asarray(x_t, dtype=float).reshape(-1, n * 3)
        batch = x.shape[0]
        if cond is None:
            c = np.zeros((batch, n))
        else:
            c = np.broadcast_to(np.asarray(cond, dtype=float).reshape(-1, n), (batch, n))
        t = np.broadcast_to(np.asarray(t), (batch,))
        return np.concatenate([x, c, timestep_embedding(t, self._arch.emb_dim)], axis=1)

    def forward(self, X: np.ndarray):
        """Returns the output and the activations the backward pass needs."""
        cache = []
        h = X
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            z = h @ W + b
            cache.append((h, z))
            if k < n_layers - 1:
                h, _ = _silu(z)
            else:
                h = z
        return h, cache

    def backward(self, cache, g_out: np.ndarray, want_params: bool = True):
        """Gradients w.r.t. the parameters (declaration order) and the input."""
        grads = [None] * len(self.params)
        g = g_out
        n_layers = len(self.params) // 2
        for k in reversed(range(n_layers)):
            h, z = cache[k]
            W = self.params[2 * k]
            if k < n_layers - 1:
                s = expit(z)
                g = g * (s * (1.0 + z * (1.0 - s)))
            if want_params:
                grads[2 * k] = h.T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            g = g @ W.T
        return grads, g

    def evaluate(self, x_t, t, cond=None):
        shape = np.shape(x_t)
        out, _ = self.forward(self._inputs(x_t, t, cond))
        return out.reshape(shape)

    def vjp(self, x_t, t, cond, cotangent):
        shape = np.shape(x_t)
        _, cache = self.forward(self._inputs(x_t, t, cond))
        g_out = np.asarray(cotangent, dtype=float).reshape(-1, self._arch.out_dim)
        _, g_in = self.backward(cache, g_out, want_params=False)
        return g_in[:, :self._arch.out_dim].reshape(shape)

    def loss_and_grads(self, x_t, t, cond, eps, alpha_bar=None, targets=None,
                       geo_weight: float = 0.0, geo_sharpness: float = 50.0):
        """Mean squared noise-prediction error over a batch and its gradients."""
        X = self._inputs(x_t, t, cond)
        out, cache = self.forward(X)
        eps = np.asarray(eps, dtype=float).reshape(out.shape)
        diff = out - eps
        loss = float(np.mean(diff * diff))
        g_out = 2.0 * diff / diff.size

        if geo_weight > 0 and targets is not None:
            loss += self._geo_term(x_t, out, alpha_bar, targets, geo_weight,
                                   geo_sharpness, g_out)

        grads, _ = self.backward(cache, g_out)
        return loss, grads

    def _geo_term(self, x_t, eps_hat, alpha_bar, targets, weight, sharpness, g_out):
        size = self._arch.size
        x_t = np.asarray(x_t, dtype=float).reshape(len(eps_hat), size, size, 3)
        total = 0.0
        for i, target in enumerate(targets):
            if target is None:
                continue
            ab = alpha_bar[i]
            s_ab, s_1m = np.sqrt(ab), np.sqrt(1.0 - ab)
            x0_hat = (x_t[i] - s_1m * eps_hat[i].reshape(size, size, 3)) / s_ab
            try:
                loss, g_x0 = geo_gradient_x0(x0_hat, target, sharpness)
            except ExtractionError:
                continue
            scale = weight / len(eps_hat)
            total += scale * loss
            g_out[i] += scale * (-s_1m / s_ab) * g_x0.reshape(-1)
        return total


class Adam:

    def __init__(self, params: Sequence[np.ndarray], opt: OptConfig):
        self.opt = opt
        self.step = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def update(self, params: List[np.ndarray], grads: List[np.ndarray]):
        opt = self.opt
        if opt.clip_norm > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > opt.clip_norm:
                grads = [g * (opt.clip_norm / norm) for g in grads]

        self.step += 1
        c1 = 1.0 - opt.beta1 ** self.step
        c2 = 1.0 - opt.beta2 ** self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * g * g
            p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


class TrainResult(NamedTuple):
    denoiser: MLPDenoiser
    optimizer: Adam
    losses: List[float]


def _batch_grads(model: MLPDenoiser, batch, opt: OptConfig, executor=None):
    x_t, t, cond, eps, ab, targets = batch
    if executor is None or opt.workers <= 1 or len(t) < 2 * opt.workers:
        return model.loss_and_grads(x_t, t, cond, eps, ab, targets,
                                    opt.geo_weight, opt.geo_sharpness)

    shards = np.array_split(np.arange(len(t)), opt.workers)

    def run(idx):
        return model.loss_and_grads(x_t[idx], t[idx], cond[idx], eps[idx], ab[idx],
                                    [targets[i] for i in idx],
                                    opt.geo_weight, opt.geo_sharpness)

    results = list(executor.map(run, shards))
    n = len(t)
    loss = sum(len(idx) / n * r[0] for idx, r in zip(shards, results))
    grads = [sum(len(idx) / n * r[1][k] for idx, r in zip(shards, results))
             for k in range(len(model.params))]
    return loss, grads


def train_denoiser(dataset: Sequence[TrainingExample], arch: ArchConfig, opt: OptConfig,
                   sched: DiffusionSchedule, rng: np.random.Generator,
                   resume: "Checkpoint" = None,
                   log_fn: Callable[[dict], None] = None,
                   progress: bool = False) -> TrainResult:
    if not dataset:
        raise ValueError("the training set is empty")
    size = arch.size
    for ex in dataset:
        if np.shape(ex.x0) != (size, size, 3):
            raise ValueError(f"training images must be {size}x{size}x3, got {np.shape(ex.x0)}")

    if resume is not None:
        model, optimizer = resume.denoiser, resume.optimizer or Adam(resume.denoiser.params, opt)
        optimizer.opt = opt
    else:
        model = MLPDenoiser.initialize(arch, rng)
        optimizer = Adam(model.params, opt)

    x0_all = np.stack([ex.x0 for ex in dataset])
    cond_all = np.stack([ex.cond for ex in dataset])
    targets_all = [ex.target for ex in dataset]

    executor = ThreadPoolExecutor(max_workers=opt.workers) if opt.workers > 1 else None
    losses = []
    initial = None
    running = None
    try:
        bar = tqdm(range(opt.steps), desc="train", disable=not progress)
        for _ in bar:
            idx = rng.integers(0, len(dataset), size=opt.batch_size)
            t = rng.integers(1, sched.T + 1, size=opt.batch_size)
            ab = sched.alpha_bar[t]
            eps = rng.standard_normal((opt.batch_size, size, size, 3))
            x_t = q_sample(x0_all[idx], ab[:, None, None, None], eps)
            batch = (x_t, t, cond_all[idx], eps, ab, [targets_all[i] for i in idx])

            loss, grads = _batch_grads(model, batch, opt, executor)
            optimizer.update(model.params, grads)
            losses.append(loss)

            running = loss if running is None else 0.9 * running + 0.1 * loss
            if initial is None:
                initial = loss
            if not np.isfinite(running) or running > DIVERGENCE_FACTOR * initial:
                raise DivergedLoss(
                    f"running loss {running:.4g} exceeds {DIVERGENCE_FACTOR:g}x the "
                    f"initial {initial:.4g} at step {optimizer.step}")

            if log_fn is not None and optimizer.step % opt.log_every == 0:
                log_fn({"step": optimizer.step, "loss": loss, "running": running})
            if progress and optimizer.step % opt.log_every == 0:
                bar.set_postfix(loss=f"{running:.4f}")
    finally:
        if executor is not None:
            executor.shutdown()

    return TrainResult(model, optimizer, losses)


class Checkpoint(NamedTuple):
    denoiser: MLPDenoiser
    sched: DiffusionSchedule
    optimizer: Optional[Adam]


def _write_floats(fp, arrays):
    for a in arrays:
        fp.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def save_checkpoint(path, model: MLPDenoiser, sched: DiffusionSchedule, optimizer: Adam = None):
    header = {
        "arch": asdict(model.arch),
        "schedule": sched.to_record(),
        "shapes": [list(p.shape) for p in model.params],
        "optimizer": None if optimizer is None else {"step": optimizer.step},
    }
    header_bytes = json_dumps(header).encode("utf-8")

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    _write_floats(buf, model.params)
    if optimizer is not None:
        _write_floats(buf, optimizer.m)
        _write_floats(buf, optimizer.v)

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint '{path}': {exc}") from exc


def load_checkpoint(path, opt: OptConfig = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc

    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"'{path}' is not an axisforge checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    header = json_loads(raw[pos:pos + header_len].decode("utf-8"))
    pos += header_len

    def read_arrays():
        nonlocal pos
        arrays = []
        for shape in header["shapes"]:
            count = int(np.prod(shape))
            end = pos + 4 * count
            if end > len(raw):
                raise CheckpointError(f"checkpoint '{path}' is truncated")
            arrays.append(np.frombuffer(raw[pos:end], dtype="<f4")
                          .reshape(shape).astype(np.float64))
            pos = end
        return arrays

    arch = ArchConfig(**header["arch"])
    model = MLPDenoiser(arch, read_arrays())
    s = header["schedule"]
    sched = make_schedule(int(s["T"]), float(s["zeta_start"]), float(s["zeta_end"]))

    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = Adam(model.params, opt or OptConfig())
        optimizer.m = read_arrays()
        optimizer.v = read_arrays()
        optimizer.step = int(header["optimizer"]["step"])

    if pos != len(raw):
        raise CheckpointError(f"checkpoint '{path}' has {len(raw) - pos} trailing bytes")
    return Checkpoint(model, sched, optimizer)
