"""Rectified-flow forward process and the Euler sampler with classifier-free guidance.

Convention: x_tau = (1 - tau) * x0 + tau * eps, so noise sits at tau = 1 and
the velocity is eps - x0. A sample estimate is x_tau - tau * v.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear schedule over integer timesteps 0..num_steps-1 mapped to (0, 1]."""

    num_steps: int = 1000
    kind: str = "linear"

    def tau(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.num_steps):
            raise ValueError(f"timestep outside [0, {self.num_steps - 1}]")
        return (t + 1.0) / self.num_steps

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.tau(rng.integers(0, self.num_steps, size=n))


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 1
    cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"SamplerConfig: steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"SamplerConfig: cfg_scale must be >= 0, got {self.cfg_scale}")


def _tau_column(tau, like: Tensor) -> Tensor:
    """Per-sample tau broadcast to ``like``'s shape (scalar or length-B)."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim == 0:
        return Tensor(np.full(like.shape, float(tau)))
    shape = (tau.shape[0],) + (1,) * (like.ndim - 1)
    return Tensor(np.broadcast_to(tau.reshape(shape), like.shape))


def interpolate(x0, eps, tau) -> Tensor:
    x0, eps = nx.as_tensor(x0), nx.as_tensor(eps)
    if x0.shape != eps.shape:
        raise nx.ShapeError(f"interpolate: x0 {x0.shape} vs eps {eps.shape}")
    if np.any(np.asarray(tau) < 0) or np.any(np.asarray(tau) > 1):
        raise ValueError("interpolate: tau must lie in [0, 1]")
    t = _tau_column(tau, x0)
    return nx.mul(nx.sub(Tensor(np.ones(x0.shape)), t), x0) + nx.mul(t, eps)


def velocity_target(x0, eps) -> Tensor:
    x0, eps = nx.as_tensor(x0), nx.as_tensor(eps)
    if x0.shape != eps.shape:
        raise nx.ShapeError(f"velocity_target: x0 {x0.shape} vs eps {eps.shape}")
    return eps - x0


def to_sample(x_tau, v, tau) -> Tensor:
    x_tau, v = nx.as_tensor(x_tau), nx.as_tensor(v)
    if x_tau.shape != v.shape:
        raise nx.ShapeError(f"to_sample: x_tau {x_tau.shape} vs v {v.shape}")
    if np.all(np.asarray(tau) == 0):
        return x_tau
    return x_tau - nx.mul(_tau_column(tau, x_tau), v)


VelocityFn = Callable[[np.ndarray, float, bool], np.ndarray]


def guided_velocity(model: VelocityFn, x: np.ndarray, tau: float, cfg_scale: float) -> np.ndarray:
    """v_u + s * (v_c - v_u); with s == 1 only the conditional branch is evaluated."""
    v_c = np.asarray(model(x, tau, True))
    if v_c.shape != x.shape:
        raise nx.ShapeError(f"euler_sample: model returned {v_c.shape} for input {x.shape}")
    if cfg_scale == 1.0:
        return v_c
    v_u = np.asarray(model(x, tau, False))
    if v_u.shape != x.shape:
        raise nx.ShapeError(f"euler_sample: model returned {v_u.shape} for input {x.shape}")
    return v_u + cfg_scale * (v_c - v_u)


def euler_grid(steps: int) -> np.ndarray:
    return 1.0 - np.arange(steps + 1, dtype=np.float64) / steps


def euler_sample(model: VelocityFn, eps: np.ndarray, cfg: SamplerConfig,
                 schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Integrate from noise at tau=1 to tau=0 in ``cfg.steps`` uniform Euler steps.

    ``model(x, tau, conditional)`` returns a velocity of x's shape; the LQ
    clip is bound inside the callable, only the auxiliary condition toggles.
    """
    del schedule  # continuous tau grid; the linear schedule only matters in training
    x = np.array(eps, dtype=np.float64)
    grid = euler_grid(cfg.steps)
    for i in range(cfg.steps):
        v = guided_velocity(model, x, grid[i], cfg.cfg_scale)
        x = x - (grid[i] - grid[i + 1]) * v
    return x
