"""Conditional denoising diffusion model with exact analytic gradients.

The denoiser is an affine stack over [noisy sample, normalized gains,
sinusoidal time embedding] with a sigmoid-weighted (SiLU) nonlinearity
on hidden layers and a linear output head. Training minimizes the MSE
between injected and predicted noise; gradients are hand-derived
backpropagation (validated against central finite differences in the
test suite). Optimization is AdamW with decoupled weight decay, cosine
learning-rate decay, and an exponential moving average of the weights
that engages after a warmup fraction of the steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import CheckpointError, FblError

_log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# noise schedule

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray        # index t-1 holds beta_t, t = 1..T
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return self.betas.size


def make_schedule(total_steps: int, beta_1: float = 1e-4,
                  beta_t: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule; cumulative products in double precision."""
    if total_steps < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {total_steps}")
    if not (0.0 < beta_1 <= beta_t < 1.0):
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_t})")
    betas = np.linspace(beta_1, beta_t, total_steps)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if alpha_bars[-1] >= 0.05:
        _log.warning("final signal fraction %.3g >= 0.05; sampling starts far "
                     "from the forward terminal distribution", alpha_bars[-1])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def time_embedding(t, d_t: int) -> np.ndarray:
    """Sinusoidal embedding, interleaved (sin, cos) pairs; t scalar or array."""
    if d_t % 2 != 0:
        raise ValueError(f"embedding width must be even, got {d_t}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    j = np.arange(d_t // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * j / d_t)
    phase = t_arr[:, None] * freqs[None, :]
    emb = np.empty((t_arr.size, d_t))
    emb[:, 0::2] = np.sin(phase)
    emb[:, 1::2] = np.cos(phase)
    return emb[0] if np.ndim(t) == 0 else emb


def forward_noise(x0, t, eps, sched: NoiseSchedule):
    """Closed-form jump to step t: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.steps):
        raise ValueError(f"t must lie in [1, {sched.steps}]")
    abar = sched.alpha_bars[t_arr - 1]
    if x0.ndim == 2 and np.ndim(abar) == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


# ---------------------------------------------------------------------------
# denoiser network

@dataclass
class DenoiserParams:
    """Affine-stack weights; weights[i] has shape (fan_in, fan_out)."""

    n: int
    d_t: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.n, self.d_t,
                              [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases])

    def flat(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)


def init_params(n: int, hidden: tuple[int, ...] = (256, 256, 256),
                d_t: int = 32, seed: int = 0) -> DenoiserParams:
    """He-scaled hidden layers; the output head starts at exactly zero so the
    initial predictor is the zero function (loss at the E[eps^2] = 1 level)."""
    rng = np.random.default_rng(seed)
    sizes = [2 * n + d_t, *hidden, n]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    weights[-1][:] = 0.0
    return DenoiserParams(n=n, d_t=d_t, weights=weights, biases=biases)


def _silu(z):
    s = expit(z)
    return z * s, s


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


def _stack_inputs(x_t, g_norm, t, params: DenoiserParams) -> np.ndarray:
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    g_norm = np.atleast_2d(np.asarray(g_norm, dtype=np.float64))
    if x_t.shape[1] != params.n or g_norm.shape[1] != params.n:
        raise ValueError(
            f"expected width {params.n}, got sample {x_t.shape[1]} "
            f"and condition {g_norm.shape[1]}")
    emb = time_embedding(t, params.d_t)
    emb = np.atleast_2d(emb)
    if emb.shape[0] == 1 and x_t.shape[0] > 1:
        emb = np.broadcast_to(emb, (x_t.shape[0], params.d_t))
    return np.concatenate([x_t, g_norm, emb], axis=1)


def denoiser_forward(x_t, t, g_norm, params: DenoiserParams) -> np.ndarray:
    """Predicted noise; accepts a single vector or a batch of rows."""
    single = np.ndim(x_t) == 1
    a = _stack_inputs(x_t, g_norm, t, params)
    n_layers = len(params.weights)
    for i in range(n_layers - 1):
        z = a @ params.weights[i] + params.biases[i]
        a, _ = _silu(z)
    out = a @ params.weights[-1] + params.biases[-1]
    return out[0] if single else out


def _forward_cached(inputs: np.ndarray, params: DenoiserParams):
    activations = [inputs]
    pre = []
    sig = []
    a = inputs
    for i in range(len(params.weights) - 1):
        z = a @ params.weights[i] + params.biases[i]
        a, s = _silu(z)
        pre.append(z)
        sig.append(s)
        activations.append(a)
    out = a @ params.weights[-1] + params.biases[-1]
    return out, activations, pre, sig


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)


def loss_and_grads_given(params: DenoiserParams, sched: NoiseSchedule,
                         x0_batch, g_batch, t_batch, eps_batch):
    """MSE between injected and predicted noise, with exact gradients.

    Deterministic in its inputs; loss_and_gradients draws (t, eps) and
    delegates here, and the finite-difference tests drive this directly.
    """
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps_batch, dtype=np.float64))
    t = np.asarray(t_batch, dtype=np.int64).ravel()
    x_t = forward_noise(x0, t, eps, sched)
    inputs = _stack_inputs(x_t, g_batch, t, params)

    out, activations, pre, sig = _forward_cached(inputs, params)
    resid = out - eps
    count = resid.size
    loss = float(np.sum(resid * resid) / count)

    d_out = 2.0 * resid / count
    n_layers = len(params.weights)
    g_w = [None] * n_layers
    g_b = [None] * n_layers
    g_w[-1] = activations[-1].T @ d_out
    g_b[-1] = d_out.sum(axis=0)
    d_a = d_out @ params.weights[-1].T
    for i in range(n_layers - 2, -1, -1):
        d_z = d_a * _silu_grad(pre[i], sig[i])
        g_w[i] = activations[i].T @ d_z
        g_b[i] = d_z.sum(axis=0)
        if i > 0:
            d_a = d_z @ params.weights[i].T
    return loss, Gradients(weights=g_w, biases=g_b)


def loss_and_gradients(x0_batch, g_batch, params: DenoiserParams,
                       sched: NoiseSchedule, rng: np.random.Generator):
    """Draw per-sample (t, eps) and evaluate the training loss and gradients."""
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    if x0.shape[0] < 1:
        raise ValueError("batch must be nonempty")
    t = rng.integers(1, sched.steps + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    loss, grads = loss_and_grads_given(params, sched, x0, g_batch, t, eps)
    return loss, grads, t, eps


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    learning_rate: float = 1e-5
    learning_rate_min: float = 1e-7
    ema_weight: float = 0.995
    ema_warm_frac: float = 0.1
    grad_clip: float = 0.0          # 0 disables clipping
    weight_decay: float = 0.01
    momentum_decay: float = 0.9
    second_moment_decay: float = 0.999
    hidden: tuple[int, ...] = (256, 256, 256)
    d_t: int = 32
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.ema_weight < 1.0):
            raise ValueError("ema_weight must lie in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        return self


def ema_update(ema: DenoiserParams, current: DenoiserParams, decay: float) -> None:
    for e, w in zip(ema.flat(), current.flat()):
        e *= decay
        e += (1.0 - decay) * w


class AdamW:
    """Decoupled-weight-decay Adam over a list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], beta1: float, beta2: float,
                 weight_decay: float, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * ((m / b1c) / (np.sqrt(v / b2c) + self.eps)
                       + self.weight_decay * p)


def _clip_gradients(grads: Gradients, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.flat()))
    if total > max_norm > 0.0:
        scale = max_norm / total
        for g in grads.flat():
            g *= scale


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    frac = step / max(1, total_steps - 1) if total_steps > 1 else 0.0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * frac))


def train(x0_rows: np.ndarray, cond_rows: np.ndarray, sched: NoiseSchedule,
          tcfg: TrainConfig) -> tuple[DenoiserParams, DenoiserParams, list[float]]:
    """Fit the denoiser; returns (params, ema_params, per-epoch mean losses)."""
    tcfg.validate()
    x0 = np.atleast_2d(np.asarray(x0_rows, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond_rows, dtype=np.float64))
    if x0.shape != cond.shape:
        raise ValueError(f"sample rows {x0.shape} and condition rows {cond.shape} differ")
    if x0.shape[0] < 1:
        raise ValueError("training set is empty")

    rng = np.random.default_rng(tcfg.seed)
    params = init_params(x0.shape[1], tcfg.hidden, tcfg.d_t,
                         seed=int(rng.integers(2 ** 32)))
    opt = AdamW(params.flat(), tcfg.momentum_decay, tcfg.second_moment_decay,
                tcfg.weight_decay)

    batches_per_epoch = math.ceil(x0.shape[0] / tcfg.batch_size)
    total_steps = tcfg.epochs * batches_per_epoch
    warm_steps = int(tcfg.ema_warm_frac * total_steps)
    ema: DenoiserParams | None = None

    step = 0
    epoch_losses: list[float] = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(x0.shape[0])
        losses = []
        for b in range(batches_per_epoch):
            idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            loss, grads, _, _ = loss_and_gradients(x0[idx], cond[idx], params, sched, rng)
            if not math.isfinite(loss):
                raise FblError(f"training diverged at step {step}: loss={loss}")
            if tcfg.grad_clip > 0.0:
                _clip_gradients(grads, tcfg.grad_clip)
            lr = cosine_lr(step, total_steps, tcfg.learning_rate, tcfg.learning_rate_min)
            opt.step(grads.flat(), lr)
            if step >= warm_steps:
                if ema is None:
                    ema = params.copy()
                else:
                    ema_update(ema, params, tcfg.ema_weight)
            losses.append(loss)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        _log.info("epoch %d/%d: loss %.5f", epoch + 1, tcfg.epochs, epoch_losses[-1])
    if ema is None:
        ema = params.copy()
    return params, ema, epoch_losses


# ---------------------------------------------------------------------------
# sampling

def sample(g_norm, params: DenoiserParams, sched: NoiseSchedule,
           rng: np.random.Generator, deterministic: bool = False,
           posterior_variance: bool = False) -> np.ndarray:
    """Reverse-process draw conditioned on g_norm; single vector or batch.

    deterministic=True suppresses the per-step noise injection (the start
    x_T is still drawn from rng). Returns the continuous x0 estimate.
    """
    single = np.ndim(g_norm) == 1
    g = np.atleast_2d(np.asarray(g_norm, dtype=np.float64))
    x = rng.standard_normal((g.shape[0], params.n))
    for t in range(sched.steps, 0, -1):
        beta = sched.betas[t - 1]
        alpha = sched.alphas[t - 1]
        abar = sched.alpha_bars[t - 1]
        eps_hat = denoiser_forward(x, t, g, params)
        x = (x - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
        if t > 1 and not deterministic:
            if posterior_variance:
                abar_prev = sched.alpha_bars[t - 2]
                sigma = math.sqrt((1.0 - abar_prev) / (1.0 - abar) * beta)
            else:
                sigma = math.sqrt(beta)
            x = x + sigma * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(x)):
        raise FblError("reverse process produced non-finite values; "
                       "check the schedule and training state")
    return x[0] if single else x


# ---------------------------------------------------------------------------
# checkpoint persistence

@dataclass
class ModelCheckpoint:
    params: DenoiserParams
    ema_params: DenoiserParams
    schedule: NoiseSchedule
    n: int
    cond_mean_db: np.ndarray
    cond_std_db: np.ndarray
    m_lo: int
    m_hi: int
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: ModelCheckpoint, path: str) -> None:
    arrays = {
        "format_version": np.int64(ckpt.format_version),
        "n": np.int64(ckpt.n),
        "d_t": np.int64(ckpt.params.d_t),
        "n_layers": np.int64(len(ckpt.params.weights)),
        "betas": ckpt.schedule.betas,
        "cond_mean_db": ckpt.cond_mean_db,
        "cond_std_db": ckpt.cond_std_db,
        "m_lo": np.int64(ckpt.m_lo),
        "m_hi": np.int64(ckpt.m_hi),
    }
    for i, (w, b) in enumerate(zip(ckpt.params.weights, ckpt.params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    for i, (w, b) in enumerate(zip(ckpt.ema_params.weights, ckpt.ema_params.biases)):
        arrays[f"ema_w{i}"] = w
        arrays[f"ema_b{i}"] = b
    with open(path, "wb") as fh:  # keep the exact path, no .npz suffixing
        np.savez(fh, **arrays)


def load_checkpoint(path: str) -> ModelCheckpoint:
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = int(data["format_version"])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    n = int(data["n"])
    d_t = int(data["d_t"])
    n_layers = int(data["n_layers"])
    params = DenoiserParams(n=n, d_t=d_t,
                            weights=[data[f"w{i}"] for i in range(n_layers)],
                            biases=[data[f"b{i}"] for i in range(n_layers)])
    ema = DenoiserParams(n=n, d_t=d_t,
                         weights=[data[f"ema_w{i}"] for i in range(n_layers)],
                         biases=[data[f"ema_b{i}"] for i in range(n_layers)])
    betas = data["betas"]
    alphas = 1.0 - betas
    sched = NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))
    return ModelCheckpoint(params=params, ema_params=ema, schedule=sched, n=n,
                           cond_mean_db=data["cond_mean_db"],
                           cond_std_db=data["cond_std_db"],
                           m_lo=int(data["m_lo"]), m_hi=int(data["m_hi"]),
                           format_version=version)
