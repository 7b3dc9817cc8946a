"""Optimization loop: Adam over (density grid, color MLP) under guidance.

Two independent Adam instances (the grid and the MLP learn at very different
rates), per-step named RNG streams so a resumed run redraws exactly the same
cameras and backgrounds, and f32 parameter/moment storage so checkpoints
round-trip bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import formats
from .field import VoxelField, load_field, save_field
from .guidance import GuidanceTransportError
from .losses import (DEFAULT_TAU_ANNEAL_STEPS, DEFAULT_TAU_START, LossWeights,
                     tau_anneal, total_loss)
from .rendering import (BACKGROUND_MODES, DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_Y,
                        DEFAULT_RESOLUTION, DEFAULT_SAMPLES_PER_RAY,
                        composite_over, render, sample_background,
                        sample_camera_pose, settings_for_field)
from .sdf import SdfGrid
from .seeding import stream

ADAM_MAGIC = b"ADAM"
ADAM_VERSION = 1


class OptimizationError(RuntimeError):
    """Non-finite loss or gradient; the run cannot continue."""


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @staticmethod
    def for_params(params) -> "AdamState":
        return AdamState(
            m=[np.zeros(p.shape, dtype=np.float32) for p in params],
            v=[np.zeros(p.shape, dtype=np.float32) for p in params],
            t=0,
        )

    def copy(self) -> "AdamState":
        return AdamState(m=[a.copy() for a in self.m],
                         v=[a.copy() for a in self.v], t=self.t)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam; parameters updated in place.

    Moments are kept in f32 (matching parameter storage) but the update math
    runs in f64, so an interrupted-and-resumed run reproduces an uninterrupted
    one exactly.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise OptimizationError(
                f"non-finite gradient for parameter {i} "
                f"({bad}/{g.size} entries) at adam step {t}"
            )
        m64 = beta1 * state.m[i].astype(np.float64) + (1.0 - beta1) * g
        v64 = beta2 * state.v[i].astype(np.float64) + (1.0 - beta2) * g * g
        state.m[i][...] = m64.astype(np.float32)
        state.v[i][...] = v64.astype(np.float32)
        update = lr * (m64 / bc1) / (np.sqrt(v64 / bc2) + eps)
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)
    return params, state


@dataclass
class OptimConfig:
    lr_grid: float = 0.5
    lr_mlp: float = 5e-3
    steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = dc_field(default_factory=LossWeights)
    azimuth_range: tuple = (-90.0, 90.0)
    elevation_range: tuple = (20.0, 30.0)
    camera_radius: float = DEFAULT_CAMERA_RADIUS
    fov_y: float = DEFAULT_FOV_Y
    resolution: tuple = DEFAULT_RESOLUTION
    samples_per_ray: int = DEFAULT_SAMPLES_PER_RAY
    background: tuple = (1.0, 1.0, 1.0)
    # None = augment iff the guidance handle is remote
    background_augmentation: bool | None = None
    background_modes: tuple = BACKGROUND_MODES
    # None = anneal iff remote guidance; the photometric oracle wants a
    # stationary objective
    anneal_tau: bool | None = None
    tau_start: float = DEFAULT_TAU_START
    tau_anneal_steps: int = DEFAULT_TAU_ANNEAL_STEPS
    # total multiplicative lr decay across the run (1.0 = constant)
    lr_decay: float = 1.0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not self.lr_grid > 0 or not self.lr_mlp >= 0:
            raise ValueError("learning rates must be positive (lr_mlp may be 0)")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def to_json_dict(self) -> dict:
        return {
            "lr_grid": self.lr_grid, "lr_mlp": self.lr_mlp,
            "steps": self.steps, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "seed": self.seed,
            "weights": self.weights.__dict__.copy(),
            "azimuth_range": list(self.azimuth_range),
            "elevation_range": list(self.elevation_range),
            "camera_radius": self.camera_radius, "fov_y": self.fov_y,
            "resolution": list(self.resolution),
            "samples_per_ray": self.samples_per_ray,
            "background": list(self.background),
            "background_augmentation": self.background_augmentation,
            "background_modes": list(self.background_modes),
            "anneal_tau": self.anneal_tau, "tau_start": self.tau_start,
            "tau_anneal_steps": self.tau_anneal_steps,
            "lr_decay": self.lr_decay,
            "checkpoint_every": self.checkpoint_every,
            "checkpoint_dir": self.checkpoint_dir,
        }

    @staticmethod
    def from_json_dict(data: dict) -> "OptimConfig":
        kwargs = dict(data)
        for key in ("azimuth_range", "elevation_range", "resolution",
                    "background", "background_modes"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        unknown = set(kwargs) - set(OptimConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return OptimConfig(**kwargs)


@dataclass
class StepInfo:
    step: int                 # 1-based count of completed steps
    breakdown: object         # LossBreakdown
    mean_transmittance: float
    field: VoxelField


def optimize(fld: VoxelField, guidance, prior: SdfGrid | None,
             config: OptimConfig, callbacks=None,
             grid_state: AdamState | None = None,
             mlp_state: AdamState | None = None,
             start_step: int = 0) -> VoxelField:
    """Run the optimization loop; returns the (mutated) field.

    Each step: pick a camera (the guidance handle may pin one; otherwise a
    pose is sampled from the configured ranges), render, optionally
    re-composite over an augmentation background, score with guidance,
    assemble the total loss, and take one Adam step per parameter group.

    On guidance transport failure the current state is checkpointed (when a
    checkpoint_dir is configured) and the error re-raised with the checkpoint
    path attached.
    """
    if config.weights.w_prior > 0 and prior is None:
        raise ValueError("config.weights.w_prior > 0 requires a prior grid")
    callbacks = list(callbacks or [])
    mlp_params = fld.color_mlp.param_arrays()
    if grid_state is None:
        grid_state = AdamState.for_params([fld.density])
    if mlp_state is None:
        mlp_state = AdamState.for_params(mlp_params)

    is_remote = getattr(guidance, "kind", "") == "remote"
    augment = config.background_augmentation
    if augment is None:
        augment = is_remote
    anneal = config.anneal_tau
    if anneal is None:
        anneal = is_remote

    global_step = start_step
    for step in range(start_step, config.steps):
        cam = None
        if hasattr(guidance, "camera_for_step"):
            cam = guidance.camera_for_step(step)
        if cam is None:
            cam = sample_camera_pose(
                stream(config.seed, "camera", step),
                azimuth_range=config.azimuth_range,
                elevation_range=config.elevation_range,
                radius=config.camera_radius,
                fov_y=config.fov_y,
                resolution=config.resolution,
            )
        settings = settings_for_field(
            fld, cam, samples_per_ray=config.samples_per_ray,
            background=config.background,
        )
        out = render(fld, cam, settings)

        bg_image = None
        image = out.rgb
        if augment:
            bg_rng = stream(config.seed, "background", step)
            mode = config.background_modes[
                int(bg_rng.integers(len(config.background_modes)))
            ]
            bg_image = sample_background(bg_rng, mode,
                                         out.transmittance.shape)
            image = composite_over(out, bg_image)

        try:
            result = guidance.evaluate(image, step)
        except GuidanceTransportError as exc:
            if exc.step is None:
                exc.step = step
            exc.checkpoint_path = _emergency_checkpoint(
                config, fld, grid_state, mlp_state, global_step
            )
            raise

        weights = config.weights
        if anneal:
            weights = replace(
                weights,
                tau_target=tau_anneal(step, config.tau_start,
                                      config.weights.tau_target,
                                      config.tau_anneal_steps),
            )
        breakdown, grid_grad, mlp_grads = total_loss(
            fld, out, result, prior, weights, guidance_background=bg_image
        )
        if not np.isfinite(breakdown.total):
            raise OptimizationError(
                f"non-finite loss at step {step}: {breakdown.as_dict()}"
            )

        decay = config.lr_decay ** (step / config.steps) \
            if config.lr_decay != 1.0 and config.steps > 0 else 1.0
        adam_step([fld.density], [grid_grad], grid_state,
                  config.lr_grid * decay, config.beta1, config.beta2,
                  config.eps)
        if config.lr_mlp > 0:
            adam_step(mlp_params, mlp_grads, mlp_state,
                      config.lr_mlp * decay, config.beta1, config.beta2,
                      config.eps)

        global_step = step + 1
        info = StepInfo(step=global_step, breakdown=breakdown,
                        mean_transmittance=float(out.transmittance.mean()),
                        field=fld)
        for cb in callbacks:
            cb(info)
        if (config.checkpoint_dir and config.checkpoint_every > 0
                and global_step % config.checkpoint_every == 0):
            save_checkpoint(config.checkpoint_dir, fld, grid_state,
                            mlp_state, global_step)
    return fld


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_paths(directory: str, step: int):
    base = os.path.join(directory, f"ckpt_{step:06d}")
    return base + ".vfld", base + ".adam"


def save_checkpoint(directory: str, fld: VoxelField, grid_state: AdamState,
                    mlp_state: AdamState, global_step: int) -> str:
    os.makedirs(directory, exist_ok=True)
    field_path, adam_path = checkpoint_paths(directory, global_step)
    save_field(fld, field_path)
    write_adam(adam_path, global_step,
               {"grid": grid_state, "mlp": mlp_state})
    return field_path


def load_checkpoint(field_path: str):
    """Returns (field, grid_state, mlp_state, global_step)."""
    fld = load_field(field_path)
    adam_path = os.path.splitext(field_path)[0] + ".adam"
    global_step, groups = read_adam(adam_path)
    return fld, groups["grid"], groups["mlp"], global_step


def latest_checkpoint(directory: str) -> str | None:
    try:
        names = sorted(n for n in os.listdir(directory)
                       if n.startswith("ckpt_") and n.endswith(".vfld"))
    except FileNotFoundError:
        return None
    return os.path.join(directory, names[-1]) if names else None


def _emergency_checkpoint(config, fld, grid_state, mlp_state, global_step):
    if not config.checkpoint_dir:
        return None
    return save_checkpoint(config.checkpoint_dir, fld, grid_state,
                           mlp_state, global_step)


def write_adam(path, global_step: int, groups: dict) -> None:
    """Optimizer-state sidecar: shapes plus f32 moments per named group."""
    with open(path, "wb") as f:
        formats.write_magic(f, ADAM_MAGIC, ADAM_VERSION)
        formats.write_u64(f, global_step)
        formats.write_u32(f, len(groups))
        for name, state in groups.items():
            encoded = name.encode("utf-8")
            formats.write_u32(f, len(encoded))
            f.write(encoded)
            formats.write_u32(f, state.t)
            formats.write_u32(f, len(state.m))
            for m, v in zip(state.m, state.v):
                formats.write_u32(f, m.ndim)
                for d in m.shape:
                    formats.write_u32(f, d)
                formats.write_f32_array(f, m)
                formats.write_f32_array(f, v)


def read_adam(path):
    with open(path, "rb") as f:
        formats.read_magic(f, ADAM_MAGIC, ADAM_VERSION)
        global_step = formats.read_u64(f)
        n_groups = formats.read_u32(f)
        groups = {}
        for _ in range(n_groups):
            name_len = formats.read_u32(f)
            name = formats.read_exact(f, name_len).decode("utf-8")
            t = formats.read_u32(f)
            n_params = formats.read_u32(f)
            ms, vs = [], []
            for _ in range(n_params):
                ndim = formats.read_u32(f)
                shape = tuple(formats.read_u32(f) for _ in range(ndim))
                ms.append(formats.read_f32_array(f, shape))
                vs.append(formats.read_f32_array(f, shape))
            groups[name] = AdamState(m=ms, v=vs, t=t)
    return global_step, groups
