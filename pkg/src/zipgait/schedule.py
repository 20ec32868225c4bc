"""Cosine noise schedule and the scalar diffusion updates built on it.

The update functions accept numpy arrays or torch tensors. ``t`` may be a
plain int or a 1-D integer array with one timestep per leading-axis item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivisionGuard, InvalidParameter, ShapeError, SigmaOverflow

COSINE_OFFSET = 0.008
BETA_MIN = 1e-8
BETA_MAX = 0.999
TERMINAL = -1


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.setflags(write=False)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal coefficient, with the terminal index -1 mapped to 1."""
        if t == TERMINAL:
            return 1.0
        self.check_t(t)
        return float(self.alpha_bar[t])

    def check_t(self, t) -> None:
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr >= self.T):
            raise InvalidParameter(f"timestep out of range [0, {self.T}): {t}")


def cosine_schedule(T: int, s: float = COSINE_OFFSET, beta_min: float = BETA_MIN,
                    beta_max: float = BETA_MAX) -> NoiseSchedule:
    if T < 2:
        raise InvalidParameter(f"T must be at least 2, got {T}")

    def f(u):
        return np.cos((u + s) / (1 + s) * np.pi / 2) ** 2

    u = np.arange(T + 1, dtype=np.float64) / T
    ratio = f(u[1:]) / f(u[:-1])
    beta = np.clip(1.0 - ratio, beta_min, beta_max)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _coef(values, t, like):
    """Gather ``values[t]`` and shape it to broadcast against ``like``."""
    if np.ndim(t) == 0:
        return float(values[int(t)])
    idx = np.asarray(t.cpu() if hasattr(t, "cpu") else t, dtype=np.int64)
    c = values[idx].reshape((-1,) + (1,) * (like.ndim - 1))
    if hasattr(like, "new_tensor"):
        return like.new_tensor(c)
    return c.astype(np.result_type(like.dtype, np.float32))


def _sqrt(x):
    return x ** 0.5 if isinstance(x, float) else np.sqrt(x) if isinstance(x, np.ndarray) else x.sqrt()


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """Corrupt ``x0`` to timestep ``t``: ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    sched.check_t(t)
    ab = _coef(sched.alpha_bar, t, x0)
    return _sqrt(ab) * x0 + _sqrt(1.0 - ab) * eps


def recover_noise(x_t, x0_hat, t, sched: NoiseSchedule):
    """Noise implied by a clean estimate: inverse of :func:`forward_diffuse` in ``eps``."""
    if tuple(x_t.shape) != tuple(x0_hat.shape):
        raise ShapeError(f"x_t {tuple(x_t.shape)} and x0_hat {tuple(x0_hat.shape)} differ")
    sched.check_t(t)
    if np.any(1.0 - sched.alpha_bar[np.asarray(t)] < 1e-12):
        raise DivisionGuard(f"alpha_bar is numerically 1 at t={t}")
    ab = _coef(sched.alpha_bar, t, x_t)
    return (x_t - _sqrt(ab) * x0_hat) / _sqrt(1.0 - ab)


def ddim_coefficients(sched: NoiseSchedule, t_now: int, t_next: int, eta: float) -> tuple[float, float, float]:
    """Return ``(sqrt(ab_next), sigma, direction)`` for one reverse step.

    The three squared terms ``ab_next``, ``sigma**2`` and ``direction**2`` sum to one.
    """
    if not t_next < t_now:
        raise InvalidParameter(f"t_next ({t_next}) must precede t_now ({t_now})")
    if eta < 0:
        raise InvalidParameter(f"eta must be non-negative, got {eta}")
    ab_now = sched.alpha_bar_at(t_now)
    ab_next = sched.alpha_bar_at(t_next)
    sigma = eta * math.sqrt((1.0 - ab_now / ab_next) * (1.0 - ab_next) / (1.0 - ab_now))
    rest = 1.0 - ab_next - sigma**2
    if rest < 0:
        if rest < -1e-12:
            raise SigmaOverflow(f"eta={eta} too large for step {t_now}->{t_next}: 1-ab-sigma^2={rest:.3e}")
        rest = 0.0
    return math.sqrt(ab_next), sigma, math.sqrt(rest)


def ddim_step(x_t, x0_hat, t_now: int, t_next: int, eta: float, eps_star, sched: NoiseSchedule):
    """One reverse update from ``t_now`` to ``t_next``; ``t_next == -1`` returns ``x0_hat``."""
    sched.check_t(t_now)
    if t_next == TERMINAL:
        if not t_next < t_now:
            raise InvalidParameter("t_next must precede t_now")
        return x0_hat
    a_next, sigma, direction = ddim_coefficients(sched, t_now, t_next, eta)
    eps = recover_noise(x_t, x0_hat, t_now, sched)
    out = a_next * x0_hat + direction * eps
    if eta > 0:
        if eps_star is None:
            raise InvalidParameter("eps_star is required when eta > 0")
        if tuple(eps_star.shape) != tuple(x_t.shape):
            raise ShapeError("eps_star must match x_t")
        out = out + sigma * eps_star
    return out


def timestep_pairs(T: int, steps: int) -> list[tuple[int, int]]:
    """Descending ``(t_now, t_next)`` pairs from ``T - 1`` down to the terminal ``-1``."""
    if steps < 1:
        raise InvalidParameter(f"steps must be at least 1, got {steps}")
    if steps > T:
        raise InvalidParameter(f"steps ({steps}) cannot exceed T ({T})")
    # floor of linspace(-1, T - 1, steps + 1), computed exactly in integers
    times = [-1 + (k * T) // steps for k in range(steps, -1, -1)]
    return list(zip(times[:-1], times[1:]))
