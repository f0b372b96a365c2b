"""Quadrature volume rendering and the radiance-field heads.

The dynamic head maps (encoded point, time, view direction | F_dy) to
(color, density, blending weight); the static head maps
(encoded point, view direction | F_st) to (color, density). Rendering is
single-pass stratified quadrature with alpha compositing.
"""
from __future__ import annotations

import numpy as np

from .autodiff import ParamStore, Tensor, concat
from .features import FEATURE_DIM, POINT_FEATURE_DIM
from .nn import ResidualMlp, ResidualMlpConfig, positional_encode


def stratified_depths(rng: np.random.Generator, n_rays: int, n_samples: int,
                      near: float, far: float) -> np.ndarray:
    """(R, M) jittered sample depths, one uniform draw per depth bin."""
    edges = np.linspace(near, far, n_samples + 1)
    lo, width = edges[:-1], edges[1] - edges[0]
    u = rng.uniform(size=(n_rays, n_samples))
    return lo[None, :] + u * width


def deltas_from_depths(depths: np.ndarray, far: float) -> np.ndarray:
    """Per-sample interval lengths; the last interval runs to the far bound."""
    d = np.diff(depths, axis=1)
    last = far - depths[:, -1:]
    return np.concatenate([d, last], axis=1)


def quadrature_weights(sigma: Tensor, deltas: np.ndarray) -> Tensor:
    """Compositing weights w_j = T_j * (1 - exp(-sigma_j delta_j)).

    T_j is the transmittance exp(-sum_{k<j} sigma_k delta_k); weights are
    nonnegative and sum to at most one.
    """
    sd = sigma * Tensor(deltas)
    cum = sd.cumsum(axis=1)
    transmittance = (sd - cum).exp()  # exclusive prefix sum
    alpha = 1.0 - (-sd).exp()
    return transmittance * alpha


def composite(weights: Tensor, values) -> Tensor:
    """Weighted sum over the sample axis: (R, M) x (R, M, C) -> (R, C)."""
    values = Tensor.as_tensor(values)
    R, M = weights.shape
    return (weights.reshape(R, M, 1) * values).sum(axis=1)


def quadrature_render(sigma: Tensor, colors, depths: np.ndarray, far: float):
    """Color, accumulated opacity and expected depth along each ray."""
    w = quadrature_weights(sigma, deltas_from_depths(depths, far))
    color = composite(w, colors)
    opacity = w.sum(axis=1)
    depth = (w * Tensor(depths)).sum(axis=1)
    return color, opacity, depth, w


class DynamicHead:
    """W_dy: (p, d | F_dy) -> (c_dy, sigma_dy, b)."""

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 latent_dim: int = 64, n_blocks: int = 2,
                 n_freq_x: int = 6, n_freq_t: int = 4,
                 pos_scale: float = 0.125):
        self.n_freq_x = n_freq_x
        self.n_freq_t = n_freq_t
        self.pos_scale = pos_scale
        in_dim = 3 * 2 * n_freq_x + 2 * n_freq_t + 3
        self.net = ResidualMlp(store, rng, "wdy", ResidualMlpConfig(
            in_dim, latent_dim, 5, n_blocks=n_blocks,
            conditioning_dim=POINT_FEATURE_DIM))

    def __call__(self, x: Tensor, t: float, dirs, f_dy: Tensor):
        x = Tensor.as_tensor(x)
        P = x.shape[0]
        enc = concat([positional_encode(x * self.pos_scale, self.n_freq_x),
                      positional_encode(np.full((P, 1), float(t)),
                                        self.n_freq_t),
                      Tensor.as_tensor(dirs)], axis=1)
        raw = self.net(enc, conditioning=f_dy)
        color = raw[:, 0:3].sigmoid()
        sigma = raw[:, 3:4].softplus()
        blend = raw[:, 4:5].sigmoid()
        return color, sigma, blend


class StaticHead:
    """W_st: (x, d | F_st) -> (c_st, sigma_st)."""

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 latent_dim: int = 64, n_blocks: int = 2,
                 n_freq_x: int = 6, pos_scale: float = 0.125):
        self.n_freq_x = n_freq_x
        self.pos_scale = pos_scale
        in_dim = 3 * 2 * n_freq_x + 3
        self.net = ResidualMlp(store, rng, "wst", ResidualMlpConfig(
            in_dim, latent_dim, 4, n_blocks=n_blocks,
            conditioning_dim=FEATURE_DIM))

    def __call__(self, x: Tensor, dirs, f_st: Tensor):
        x = Tensor.as_tensor(x)
        enc = concat([positional_encode(x * self.pos_scale, self.n_freq_x),
                      Tensor.as_tensor(dirs)], axis=1)
        raw = self.net(enc, conditioning=f_st)
        return raw[:, 0:3].sigmoid(), raw[:, 3:4].softplus()


def blend_fields(sigma_st: Tensor, color_st: Tensor, sigma_dy: Tensor,
                 color_dy: Tensor, blend: Tensor):
    """Per-sample full-scene density and color.

    sigma_full = (1-b) sigma_st + b sigma_dy, and the emission
    sigma_full * c_full decomposes the same way; c_full is recovered by
    dividing out sigma_full (densities are softplus outputs, hence > 0).
    """
    sigma_full = (1.0 - blend) * sigma_st + blend * sigma_dy
    emission = (1.0 - blend) * sigma_st * color_st + blend * sigma_dy * color_dy
    color_full = emission / sigma_full
    return sigma_full, color_full


def combine_branches(parts: list):
    """Density-weighted composite of edited dynamic-field branches.

    Each part is a (color, sigma, blend) triple evaluated at one branch's
    mapped query point; densities add, colors and blending weights are
    density-averaged.
    """
    if len(parts) == 1:
        return parts[0]
    sigma = parts[0][1]
    for p in parts[1:]:
        sigma = sigma + p[1]
    tiny = 1e-12
    color = parts[0][0] * (parts[0][1] / (sigma + tiny))
    blend = parts[0][2] * (parts[0][1] / (sigma + tiny))
    for p in parts[1:]:
        color = color + p[0] * (p[1] / (sigma + tiny))
        blend = blend + p[2] * (p[1] / (sigma + tiny))
    return color, sigma, blend
