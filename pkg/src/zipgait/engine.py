"""DiffGait training step and multi-level silhouette sampling."""

from __future__ import annotations

import math

import torch

from .errors import InvalidParameter, ShapeError, TrainingDiverged
from .net import DiffGait
from .schedule import NoiseSchedule, ddim_step, forward_diffuse, timestep_pairs


# Weights of a healthy run stay O(1); normalization layers make the loss nearly
# scale-invariant, so a runaway learning rate shows up here long before any NaN.
PARAM_LIMIT = 1e6


def check_parameters(model: torch.nn.Module, limit: float = PARAM_LIMIT) -> None:
    """Raise :class:`TrainingDiverged` if any parameter is non-finite or exceeds ``limit`` in magnitude."""
    peak = max(float(p.detach().abs().max()) for p in model.parameters())
    if not peak <= limit:
        raise TrainingDiverged(f"parameter magnitude {peak:.3g} exceeds {limit:.0g} after the update")


def to_diffusion_range(sil01: torch.Tensor) -> torch.Tensor:
    return sil01 * 2.0 - 1.0


def from_diffusion_range(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


def diffgait_loss(model: DiffGait, heat, gt_sil, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the decoded clean estimate and the ground truth."""
    dg_t = forward_diffuse(gt_sil, t, eps, sched)
    return torch.mean((model(heat, dg_t, t) - gt_sil) ** 2)


def train_step_diffgait(model: DiffGait, batch, sched: NoiseSchedule, optimizer: torch.optim.Optimizer,
                        generator: torch.Generator) -> float:
    """One optimizer update on ``batch = (heat, gt_sil)``; ``gt_sil`` is in [-1, 1].

    Timesteps are drawn from ``{1, ..., T-1}``.
    """
    heat, gt_sil = batch
    if heat.shape[0] != gt_sil.shape[0]:
        raise ShapeError("heat and silhouette batches are not frame-aligned")
    b = heat.shape[0]
    t = torch.randint(1, sched.T, (b,), generator=generator)
    eps = torch.randn(gt_sil.shape, generator=generator, dtype=gt_sil.dtype)
    model.train()
    loss = diffgait_loss(model, heat, gt_sil, t, eps, sched)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite DiffGait loss: {value}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    check_parameters(model)
    return value


@torch.no_grad()
def sample_silhouettes(model: DiffGait, heat: torch.Tensor, sched: NoiseSchedule, steps: int = 5,
                       eta: float = 0.0, generator: torch.Generator | None = None,
                       init_noise: torch.Tensor | None = None) -> torch.Tensor:
    """Run the reverse process and return every intermediate prediction.

    Output has shape ``(B, M, 1, 64, 44)`` with values in [0, 1], ordered by
    sampling step (earliest first); ``M == steps``.  ``init_noise`` replaces
    the initial Gaussian draw when given.
    """
    if steps < 1:
        raise InvalidParameter("steps must be at least 1")
    was_training = model.training
    model.eval()
    b = heat.shape[0]
    g_ske = model.encode_condition(heat)
    shape = (b, 1) + tuple(heat.shape[2:])
    if init_noise is None:
        x = torch.randn(shape, generator=generator, dtype=heat.dtype)
    elif tuple(init_noise.shape) != shape:
        raise ShapeError(f"init_noise must have shape {shape}")
    else:
        x = init_noise
    preds = []
    for t_now, t_next in timestep_pairs(sched.T, steps):
        t = torch.full((b,), t_now, dtype=torch.long)
        x0_hat = model.decode(model.build_hgv(g_ske, x, t))
        preds.append(from_diffusion_range(x0_hat))
        eps_star = torch.randn(x.shape, generator=generator, dtype=x.dtype) if eta > 0 else None
        x = ddim_step(x, x0_hat, t_now, t_next, eta, eps_star, sched)
    model.train(was_training)
    return torch.stack(preds, dim=1)


def frame_generator(seed: int, frame_key: int) -> torch.Generator:
    """Per-frame sampling RNG so results do not depend on batch composition."""
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + frame_key) % (2**63))
    return g
