"""Conditional denoising diffusion in embedding space.

Cosine noise schedule, x0-prediction MLP denoiser conditioned on
(noisy sample, condition vector, sinusoidal timestep embedding), AdamW-style
training with EMA shadow weights and gradient-norm clipping, and ancestral
sampling. Runs at desk scale on synthetic conditional distributions; the
epsilon parameterization is available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import formats, nets
from .optim import AdamState, adam_step
from .seeding import stream

EDIF_MAGIC = b"EDIF"
EDIF_VERSION = 1
EPRS_MAGIC = b"EPRS"
EPRS_VERSION = 1

DEFAULT_TIMESTEPS = 100
COSINE_S = 0.008
BETA_MAX = 0.999


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class DiffusionSchedule:
    T: int
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] = 1, strictly decreasing
    betas: np.ndarray      # (T+1,), betas[0] = 0 placeholder, betas[t] for t>=1

    def __post_init__(self):
        self.T = int(self.T)
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.alpha_bar.shape != (self.T + 1,):
            raise ValueError(
                f"alpha_bar must have {self.T + 1} entries, got "
                f"{self.alpha_bar.shape}"
            )
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not np.all(self.alpha_bar > 0):
            raise ValueError("alpha_bar must stay positive")
        if not np.all((self.betas[1:] > 0) & (self.betas[1:] < 1)):
            raise ValueError("betas must lie in (0, 1)")

    @staticmethod
    def from_alpha_bar(alpha_bar: np.ndarray) -> "DiffusionSchedule":
        """Canonical construction: betas derived by division from alpha_bar.

        Serializing alpha_bar and rebuilding through this constructor
        reproduces the schedule bit-exactly.
        """
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        betas = np.zeros_like(alpha_bar)
        betas[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
        return DiffusionSchedule(T=len(alpha_bar) - 1, alpha_bar=alpha_bar,
                                 betas=betas)


def cosine_schedule(T: int = DEFAULT_TIMESTEPS) -> DiffusionSchedule:
    """Squared-cosine alpha_bar with beta clipping.

    f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), s = 0.008; betas are clipped to
    <= 0.999 and alpha_bar recomputed as the running product so the product
    identity holds exactly.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + COSINE_S) / (1.0 + COSINE_S)) * (np.pi / 2.0)) ** 2
    alpha_bar = f / f[0]
    betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    betas = np.minimum(betas, BETA_MAX)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule.from_alpha_bar(alpha_bar)


def q_sample(x0: np.ndarray, t, noise: np.ndarray,
             schedule: DiffusionSchedule) -> np.ndarray:
    """Forward corruption x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    t may be a scalar or a per-row integer array for batched x0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")
    abar = schedule.alpha_bar[t_arr]
    if t_arr.ndim == 1 and x0.ndim == 2:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; (dim,) or (batch, dim)."""
    if dim < 2:
        raise ValueError("embedding dim must be >= 2")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t_arr), 1))], axis=1)
    return emb if np.ndim(t) else emb[0]


@dataclass
class Denoiser:
    """MLP on (x_t | condition | timestep embedding) -> predicted x0 (or eps)."""

    mlp: nets.MlpParams
    d: int
    d_c: int
    t_embed_dim: int
    predict: str = "x0"  # "x0" or "eps"

    def __post_init__(self):
        if self.predict not in ("x0", "eps"):
            raise ValueError(f"predict must be 'x0' or 'eps', got {self.predict!r}")
        expect_in = self.d + self.d_c + self.t_embed_dim
        if self.mlp.in_dim != expect_in:
            raise ValueError(
                f"denoiser MLP expects in_dim {expect_in} "
                f"(d={self.d} + d_c={self.d_c} + t_embed={self.t_embed_dim}), "
                f"got {self.mlp.in_dim}"
            )
        if self.mlp.out_dim != self.d:
            raise ValueError(
                f"denoiser MLP out_dim {self.mlp.out_dim} != d {self.d}"
            )

    def param_arrays(self):
        return self.mlp.param_arrays()

    def copy(self) -> "Denoiser":
        return Denoiser(mlp=self.mlp.copy(), d=self.d, d_c=self.d_c,
                        t_embed_dim=self.t_embed_dim, predict=self.predict)


def make_denoiser(d: int, d_c: int, hidden=(64, 64), t_embed_dim: int = 16,
                  seed: int = 0, predict: str = "x0") -> Denoiser:
    sizes = (d + d_c + t_embed_dim,) + tuple(hidden) + (d,)
    mlp = nets.glorot_init(sizes, stream(seed, "denoiser_init"),
                           output_activation="linear")
    return Denoiser(mlp=mlp, d=d, d_c=d_c, t_embed_dim=t_embed_dim,
                    predict=predict)


def _net_input(denoiser: Denoiser, x_t, cond, t):
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    temb = np.atleast_2d(timestep_embedding(t, denoiser.t_embed_dim))
    if len(temb) == 1 and len(x_t) > 1:
        temb = np.broadcast_to(temb, (len(x_t), temb.shape[1]))
    if len(cond) == 1 and len(x_t) > 1:
        cond = np.broadcast_to(cond, (len(x_t), cond.shape[1]))
    return np.concatenate([x_t, cond, temb], axis=1)


def predict_x0(denoiser: Denoiser, schedule: DiffusionSchedule,
               x_t, cond, t) -> np.ndarray:
    """Denoiser output mapped to the x0 estimate (handles both flavors)."""
    squeeze = np.asarray(x_t).ndim == 1
    out = nets.forward(denoiser.mlp, _net_input(denoiser, x_t, cond, t))
    if denoiser.predict == "eps":
        t_arr = np.atleast_1d(np.asarray(t))
        abar = schedule.alpha_bar[t_arr][:, None]
        x_t2 = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        out = (x_t2 - np.sqrt(1.0 - abar) * out) / np.sqrt(abar)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def training_loss(conditions: np.ndarray, targets: np.ndarray,
                  denoiser: Denoiser, schedule: DiffusionSchedule,
                  rng: np.random.Generator, t=None, noise=None):
    """Denoising loss and MLP gradients for one batch.

    Per-element timestep uniform in {1..T}; loss is the per-sample squared
    error summed over dimensions, averaged over the batch. Explicit t/noise
    overrides exist so tests can pin the randomness.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    B = len(targets)
    if B == 0:
        raise ValueError("batch must be non-empty")
    if len(conditions) != B:
        raise ValueError("conditions and targets disagree on batch size")
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    t = np.asarray(t)
    if noise is None:
        noise = rng.standard_normal(targets.shape)
    noise = np.asarray(noise, dtype=np.float64)

    x_t = q_sample(targets, t, noise, schedule)
    if not isinstance(denoiser, Denoiser):
        # stub path: any callable (x_t, cond, t) -> x0_hat, no gradients
        out = np.atleast_2d(np.asarray(denoiser(x_t, conditions, t),
                                       dtype=np.float64))
        resid = out - targets
        return float((resid ** 2).sum(axis=1).mean()), []

    net_in = _net_input(denoiser, x_t, conditions, t)
    out, tape = nets.forward_tape(denoiser.mlp, net_in)

    reference = targets if denoiser.predict == "x0" else noise
    resid = out - reference
    loss = float((resid ** 2).sum(axis=1).mean())
    d_out = 2.0 * resid / B
    _, grads_w, grads_b = nets.backward(denoiser.mlp, tape, d_out)
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads.append(gw)
        grads.append(gb)
    return loss, grads


@dataclass
class DiffusionTrainConfig:
    steps: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_beta: float = 0.9999
    ema_every: int = 10
    grad_clip: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    @staticmethod
    def reference_preset(steps: int = 2000,
                         seed: int = 0) -> "DiffusionTrainConfig":
        """Full-scale reference constants; pair with T=100 and wide layers."""
        return DiffusionTrainConfig(
            steps=steps, batch_size=1024, lr=1.1e-4, weight_decay=6.02e-2,
            ema_beta=0.9999, ema_every=10, grad_clip=0.5, seed=seed,
        )


@dataclass
class EmaState:
    """Shadow parameters, standard exponential moving average."""

    shadow: list
    updates: int = 0

    @staticmethod
    def from_params(params) -> "EmaState":
        return EmaState(shadow=[p.astype(np.float32).copy() for p in params],
                        updates=0)

    def update(self, params, beta: float) -> None:
        self.updates += 1
        for s, p in zip(self.shadow, params):
            s64 = beta * s.astype(np.float64) \
                + (1.0 - beta) * p.astype(np.float64)
            s[...] = s64.astype(np.float32)


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return float(norm)


def train_denoiser(conditions: np.ndarray, targets: np.ndarray,
                   denoiser: Denoiser, schedule: DiffusionSchedule,
                   config: DiffusionTrainConfig, callbacks=None):
    """AdamW-style loop with gradient clipping and periodic EMA updates.

    Weight decay is decoupled (applied directly to parameters, scaled by lr).
    Returns (denoiser, EmaState, list of per-step losses).
    """
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n = len(targets)
    if n == 0:
        raise ValueError("dataset must be non-empty")
    params = denoiser.param_arrays()
    state = AdamState.for_params(params)
    ema = EmaState.from_params(params)
    callbacks = list(callbacks or [])
    losses = []

    for step in range(config.steps):
        batch_rng = stream(config.seed, "diffusion_batch", step)
        idx = batch_rng.integers(0, n, size=min(config.batch_size, n))
        noise_rng = stream(config.seed, "diffusion_noise", step)
        loss, grads = training_loss(conditions[idx], targets[idx], denoiser,
                                    schedule, noise_rng)
        clip_grad_norm(grads, config.grad_clip)
        if config.weight_decay > 0:
            decay = [p.astype(np.float64, copy=True) for p in params]
        adam_step(params, grads, state, config.lr, config.beta1,
                  config.beta2, config.eps)
        if config.weight_decay > 0:
            for p, p_old in zip(params, decay):
                p[...] = (p.astype(np.float64)
                          - config.lr * config.weight_decay * p_old
                          ).astype(np.float32)
        if config.ema_every > 0 and (step + 1) % config.ema_every == 0:
            ema.update(params, config.ema_beta)
        losses.append(loss)
        for cb in callbacks:
            cb(step + 1, loss)
    return denoiser, ema, losses


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample(condition: np.ndarray, denoiser, schedule: DiffusionSchedule,
           rng: np.random.Generator, sigma_scale: float = 1.0) -> np.ndarray:
    """Ancestral sampling from pure noise, conditioned on `condition`.

    denoiser may be a Denoiser or any callable (x_t, cond, t) -> x0_hat.
    The final step adds no noise, and sigma_scale lets tests force a fully
    deterministic trajectory.
    """
    cond = np.asarray(condition, dtype=np.float64)
    squeeze = cond.ndim == 1
    cond2 = np.atleast_2d(cond)
    if isinstance(denoiser, Denoiser):
        d = denoiser.d

        def x0_fn(x_t, c, t):
            return np.atleast_2d(predict_x0(denoiser, schedule, x_t, c, t))
    else:
        d = None

        def x0_fn(x_t, c, t):
            return np.atleast_2d(denoiser(x_t, c, t))

    B = len(cond2)
    if d is None:
        probe = x0_fn(np.zeros((B, 1)), cond2, schedule.T)
        d = probe.shape[1]
    x = rng.standard_normal((B, d))
    abar = schedule.alpha_bar
    for t in range(schedule.T, 0, -1):
        x0_hat = x0_fn(x, cond2, t)
        beta_t = schedule.betas[t]
        alpha_t = 1.0 - beta_t
        abar_t = abar[t]
        abar_prev = abar[t - 1]
        mean = (np.sqrt(abar_prev) * beta_t / (1.0 - abar_t)) * x0_hat \
            + (np.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)) * x
        if t > 1:
            sigma = np.sqrt(beta_t * (1.0 - abar_prev) / (1.0 - abar_t))
            x = mean + sigma_scale * sigma * rng.standard_normal((B, d))
        else:
            x = mean
    return x[0] if squeeze else x


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_projections: int = 128,
                       seed: int = 0) -> float:
    """Monte-Carlo sliced W1 distance between two point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("point sets must share dimensionality")
    rng = stream(seed, "sliced_wasserstein")
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for u in dirs:
        pa = np.sort(a @ u)
        pb = np.sort(b @ u)
        m = min(len(pa), len(pb))
        qs = (np.arange(m) + 0.5) / m
        qa = np.quantile(pa, qs)
        qb = np.quantile(pb, qs)
        total += float(np.mean(np.abs(qa - qb)))
    return total / n_projections


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingPair:
    condition: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.condition = np.asarray(self.condition, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if not (np.all(np.isfinite(self.condition))
                and np.all(np.isfinite(self.target))):
            raise ValueError("embedding pair must be finite")


MIXTURE_CENTERS = ((-1.5, -1.5), (1.5, 1.5))
MIXTURE_STD = 0.15


def sample_mixture(rng: np.random.Generator, n: int,
                   centers=MIXTURE_CENTERS, std: float = MIXTURE_STD):
    """Two-component conditional Gaussian mixture; condition is one-hot.

    Returns (conditions (n, 2), targets (n, 2)). This closed-form generator
    doubles as the ground-truth oracle for distribution-matching checks.
    """
    centers = np.asarray(centers, dtype=np.float64)
    labels = rng.integers(0, len(centers), size=n)
    cond = np.eye(len(centers))[labels]
    targets = centers[labels] + std * rng.standard_normal((n, centers.shape[1]))
    return cond, targets


def sample_rings(rng: np.random.Generator, n: int,
                 radii=(0.5, 1.25), noise: float = 0.02):
    """Conditional rings in the plane; condition is the one-hot radius index."""
    radii = np.asarray(radii, dtype=np.float64)
    labels = rng.integers(0, len(radii), size=n)
    cond = np.eye(len(radii))[labels]
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = radii[labels] + noise * rng.standard_normal(n)
    targets = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return cond, targets


SYNTHETIC_GENERATORS = {"mixture2": sample_mixture, "rings": sample_rings}


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_pairs(path, conditions: np.ndarray, targets: np.ndarray) -> None:
    """Embedding-pair dataset: header, dims, then f32 (condition, target) records."""
    conditions = np.atleast_2d(np.asarray(conditions))
    targets = np.atleast_2d(np.asarray(targets))
    if len(conditions) != len(targets):
        raise ValueError("conditions and targets disagree on record count")
    with open(path, "wb") as f:
        formats.write_magic(f, EPRS_MAGIC, EPRS_VERSION)
        formats.write_u32(f, targets.shape[1])
        formats.write_u32(f, conditions.shape[1])
        formats.write_u64(f, len(targets))
        interleaved = np.concatenate([conditions, targets], axis=1)
        formats.write_f32_array(f, interleaved)


def load_pairs(path):
    with open(path, "rb") as f:
        formats.read_magic(f, EPRS_MAGIC, EPRS_VERSION)
        d = formats.read_u32(f)
        d_c = formats.read_u32(f)
        n = formats.read_u64(f)
        interleaved = formats.read_f32_array(f, (n, d_c + d))
    return (interleaved[:, :d_c].astype(np.float64),
            interleaved[:, d_c:].astype(np.float64))


def save_denoiser(path, denoiser: Denoiser, schedule: DiffusionSchedule,
                  ema: EmaState | None = None) -> None:
    with open(path, "wb") as f:
        formats.write_magic(f, EDIF_MAGIC, EDIF_VERSION)
        formats.write_u32(f, schedule.T)
        formats.write_f64_array(f, schedule.alpha_bar)
        formats.write_u32(f, denoiser.d)
        formats.write_u32(f, denoiser.d_c)
        formats.write_u32(f, denoiser.t_embed_dim)
        formats.write_u32(f, 1 if denoiser.predict == "eps" else 0)
        nets.write_mlp(f, denoiser.mlp)
        formats.write_u32(f, 0 if ema is None else 1)
        if ema is not None:
            formats.write_u64(f, ema.updates)
            for arr in ema.shadow:
                formats.write_f32_array(f, arr)


def load_denoiser(path):
    """Returns (denoiser, schedule, ema-or-None)."""
    with open(path, "rb") as f:
        formats.read_magic(f, EDIF_MAGIC, EDIF_VERSION)
        T = formats.read_u32(f)
        alpha_bar = formats.read_f64_array(f, (T + 1,))
        d = formats.read_u32(f)
        d_c = formats.read_u32(f)
        t_embed_dim = formats.read_u32(f)
        predict = "eps" if formats.read_u32(f) else "x0"
        mlp = nets.read_mlp(f, output_activation="linear")
        denoiser = Denoiser(mlp=mlp, d=d, d_c=d_c, t_embed_dim=t_embed_dim,
                            predict=predict)
        ema = None
        if formats.read_u32(f):
            updates = formats.read_u64(f)
            shadow = [formats.read_f32_array(f, p.shape)
                      for p in denoiser.param_arrays()]
            ema = EmaState(shadow=shadow, updates=updates)
    schedule = DiffusionSchedule.from_alpha_bar(alpha_bar)
    return denoiser, schedule, ema


def denoiser_with_ema(denoiser: Denoiser, ema: EmaState) -> Denoiser:
    """Copy of the denoiser with parameters replaced by the EMA shadow."""
    out = denoiser.copy()
    for p, s in zip(out.param_arrays(), ema.shadow):
        p[...] = s
    return out
