"""Optimization objective: guidance + transmittance + shape-prior terms.

Each term returns its own exact adjoints; total_loss composes them and routes
the image/transmittance adjoints through the renderer's backward pass, adding
the prior term's grid gradient directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import VoxelField, _sigmoid
from .guidance import GuidanceResult
from .rendering import RenderOutput, render_backward
from .sdf import SdfGrid

DEFAULT_TAU_TARGET = 0.88
DEFAULT_TAU_START = 0.4
DEFAULT_TAU_ANNEAL_STEPS = 500


@dataclass
class LossWeights:
    w_guidance: float = 1.0
    w_transmittance: float = 0.5
    w_prior: float = 1e-3
    tau_target: float = DEFAULT_TAU_TARGET

    def __post_init__(self):
        self.w_guidance = float(self.w_guidance)
        self.w_transmittance = float(self.w_transmittance)
        self.w_prior = float(self.w_prior)
        self.tau_target = float(self.tau_target)
        for name in ("w_guidance", "w_transmittance", "w_prior"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.tau_target < 1.0:
            raise ValueError(f"tau_target must be in (0, 1), got {self.tau_target}")


@dataclass
class LossBreakdown:
    guidance: float
    transmittance: float
    prior: float
    total: float

    def as_dict(self) -> dict:
        return {
            "guidance": self.guidance,
            "transmittance": self.transmittance,
            "prior": self.prior,
            "total": self.total,
        }


def transmittance_loss(transmittance_map: np.ndarray, tau_target: float):
    """Clamped negative mean transmittance.

    loss = -min(tau_target, mean(T)); the gradient is -1/(HW) per pixel while
    the mean is below the target and vanishes once the clamp engages.
    """
    t = np.asarray(transmittance_map, dtype=np.float64)
    mean_t = float(t.mean())
    loss = -min(float(tau_target), mean_t)
    grad = np.zeros_like(t)
    if mean_t < tau_target:
        grad.fill(-1.0 / t.size)
    return loss, grad


def tau_anneal(step: int, tau_start: float = DEFAULT_TAU_START,
               tau_end: float = DEFAULT_TAU_TARGET,
               anneal_steps: int = DEFAULT_TAU_ANNEAL_STEPS) -> float:
    """Linear ramp of the transmittance target over the first anneal_steps."""
    if anneal_steps <= 0 or step >= anneal_steps:
        return float(tau_end)
    frac = max(0, step) / anneal_steps
    return float(tau_start + (tau_end - tau_start) * frac)


def prior_preserving_loss(fld: VoxelField, sdf: SdfGrid):
    """Keep voxels inside the prior opaque.

    loss = -sum over voxels of 1(sdf < 0) * (1 - exp(-softplus(raw + b) * s))
    with per-voxel path length s = voxel_size. Returns (loss, gradient with
    respect to the raw density grid).
    """
    _check_lattice(fld, sdf)
    mask = sdf.values < 0
    s = fld.voxel_size
    raw = fld.density.astype(np.float64)
    sigma = np.logaddexp(0.0, raw + fld.bias_b)
    exp_term = np.exp(-sigma * s)
    alpha = -np.expm1(-sigma * s)
    loss = -float(alpha[mask].sum())
    grad = np.where(mask, -exp_term * s * _sigmoid(raw + fld.bias_b), 0.0)
    return loss, grad


def total_loss(fld: VoxelField, output: RenderOutput,
               guidance_result: GuidanceResult, sdf: SdfGrid | None,
               weights: LossWeights, guidance_background: np.ndarray | None = None):
    """Weighted objective with adjoints routed through the renderer.

    guidance_background: the background image the guidance term saw, when the
    render was re-composited over an augmentation background; None means
    guidance scored the raw composite. Returns
    (LossBreakdown, density_grad, mlp_grads).
    """
    t_loss, t_grad = transmittance_loss(output.transmittance, weights.tau_target)
    if weights.w_prior > 0:
        if sdf is None:
            raise ValueError("w_prior > 0 requires a prior SdfGrid")
        p_loss, p_grad = prior_preserving_loss(fld, sdf)
    else:
        p_loss, p_grad = 0.0, None

    g_loss = float(guidance_result.loss)
    total = (weights.w_guidance * g_loss
             + weights.w_transmittance * t_loss
             + weights.w_prior * p_loss)
    breakdown = LossBreakdown(guidance=g_loss, transmittance=t_loss,
                              prior=p_loss, total=total)

    d_pixels = weights.w_guidance * np.asarray(guidance_result.dL_dimage,
                                               dtype=np.float64)
    d_trans = weights.w_transmittance * t_grad
    if guidance_background is not None and weights.w_guidance != 0.0:
        # re-compositing makes the scored image depend on T through
        # (bg_augment - bg_render); chain that into the transmittance adjoint
        bg_render = np.asarray(output.tape.settings.background, dtype=np.float64)
        d_trans = d_trans + (d_pixels * (guidance_background - bg_render)).sum(axis=-1)

    density_grad, mlp_grads = render_backward(output.tape, d_pixels, d_trans)
    if p_grad is not None:
        density_grad = density_grad + weights.w_prior * p_grad
    return breakdown, density_grad, mlp_grads


def _check_lattice(fld: VoxelField, sdf: SdfGrid) -> None:
    if (fld.dims != sdf.dims
            or not np.array_equal(fld.origin, sdf.origin)
            or fld.voxel_size != sdf.voxel_size):
        raise ValueError(
            f"field lattice {fld.dims} @ {tuple(fld.origin)} h={fld.voxel_size} "
            f"does not match prior {sdf.dims} @ {tuple(sdf.origin)} "
            f"h={sdf.voxel_size}"
        )
