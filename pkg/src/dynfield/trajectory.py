"""Implicit velocity field and trajectory integration.

The velocity network maps a frequency-encoded (position, time) pair,
modulated by the video's temporal feature, to a 3D velocity in world
units per unit of normalized time. Trajectories are obtained either by
the N-bin piecewise-constant discretization or by classical fixed-step
RK4; both are differentiated by backpropagating through the unrolled
steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tensor, concat
from .nn import ResidualMlp, ResidualMlpConfig, positional_encode

from .features import FEATURE_DIM


@dataclass
class SolverConfig:
    kind: str = "euler_bins"  # "euler_bins" | "rk4"
    n: int = 2

    def __post_init__(self):
        if self.kind not in ("euler_bins", "rk4"):
            raise ValueError(f"unknown solver kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("solver step count must be >= 1")


class VelocityField:
    """Residual MLP velocity field conditioned on the temporal feature."""

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 latent_dim: int = 64, n_blocks: int = 2,
                 n_freq_x: int = 6, n_freq_t: int = 4,
                 pos_scale: float = 0.125):
        self.n_freq_x = n_freq_x
        self.n_freq_t = n_freq_t
        self.pos_scale = pos_scale
        in_dim = 3 * 2 * n_freq_x + 2 * n_freq_t
        self.net = ResidualMlp(store, rng, "wvel", ResidualMlpConfig(
            in_dim, latent_dim, 3, n_blocks=n_blocks,
            conditioning_dim=FEATURE_DIM))

    def __call__(self, f_temp: Tensor, x: Tensor, t: float) -> Tensor:
        """Velocity at (P, 3) positions and scalar time t."""
        x = Tensor.as_tensor(x)
        P = x.shape[0]
        enc_x = positional_encode(x * self.pos_scale, self.n_freq_x)
        enc_t = positional_encode(np.full((P, 1), float(t)), self.n_freq_t)
        return self.net(concat([enc_x, enc_t], axis=1), conditioning=f_temp)


def integrate_trajectory(field, x, t_p: float, t_target: float,
                         solver: SolverConfig) -> Tensor:
    """Position at t_target of points that sit at `x` at time t_p.

    `field(x, t) -> velocity` is any differentiable callable; backward
    integration (t_target < t_p) falls out of the signed step size.
    """
    x = Tensor.as_tensor(x)
    span = float(t_target) - float(t_p)
    if span == 0.0:
        return x
    n = solver.n
    h = span / n
    if solver.kind == "euler_bins":
        # velocity held constant per bin, sampled at the bin's end time
        for step in range(1, n + 1):
            x = x + field(x, t_p + step * h) * h
        return x
    for step in range(n):
        t0 = t_p + step * h
        k1 = field(x, t0)
        k2 = field(x + k1 * (h / 2.0), t0 + h / 2.0)
        k3 = field(x + k2 * (h / 2.0), t0 + h / 2.0)
        k4 = field(x + k3 * h, t0 + h)
        x = x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (h / 6.0)
    return x


def trajectory_variation(field, x, t_p: float, t_neighbor: float | None,
                         solver: SolverConfig) -> Tensor | None:
    """Displacement to a neighbor timestamp, or None at sequence ends."""
    if t_neighbor is None:
        return None
    x = Tensor.as_tensor(x)
    return integrate_trajectory(field, x, t_p, t_neighbor, solver) - x
