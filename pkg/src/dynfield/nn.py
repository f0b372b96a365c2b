"""Shared network building blocks: frequency encoding, linear layers,
residual-modulation MLPs and the small strided conv stack used by the
image/video encoders.

All parameters live in a ParamStore; construction is deterministic given
the seed, with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and zero
biases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tensor, concat, conv2d


def positional_encode(x, n_freq: int):
    """Frequency-encode the last axis of `x` (Tensor or array).

    Each input component c expands to
    [sin(2^0 pi c), cos(2^0 pi c), ..., sin(2^{n-1} pi c), cos(2^{n-1} pi c)],
    components laid out contiguously, so the output width is d * 2 * n_freq.
    """
    if n_freq < 0:
        raise ValueError("n_freq must be >= 0")
    x = Tensor.as_tensor(x)
    d = x.shape[-1]
    if n_freq == 0:
        return Tensor(np.zeros(x.shape[:-1] + (0,)))
    freqs = (2.0 ** np.arange(n_freq)) * np.pi  # (n,)
    # (..., d, 1) * (n,) -> (..., d, n)
    scaled = x.reshape(x.shape + (1,)) * freqs
    s, c = scaled.sin(), scaled.cos()
    # interleave sin/cos per frequency: (..., d, n, 2) -> (..., d*2n)
    s = s.reshape(s.shape + (1,))
    c = c.reshape(c.shape + (1,))
    enc = concat([s, c], axis=-1)
    return enc.reshape(x.shape[:-1] + (d * 2 * n_freq,))


def init_linear(store: ParamStore, rng: np.random.Generator, name: str,
                fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


@dataclass
class ResidualMlpConfig:
    """Shape of a residual-modulation MLP.

    conditioning_dim == 0 means an unconditioned network; otherwise the
    conditioning vector is mapped by a learned linear layer and added at
    the entry of every block.
    """
    input_dim: int
    latent_dim: int
    output_dim: int
    n_blocks: int = 2
    conditioning_dim: int = 0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if min(self.input_dim, self.latent_dim, self.output_dim) < 1:
            raise ValueError("all dims must be >= 1")
        if self.conditioning_dim < 0:
            raise ValueError("conditioning_dim must be >= 0")


class ResidualMlp:
    """MLP built from residual blocks with per-block conditioning injection.

    Per block: h <- h + W2 relu(W1 relu(h + Wc c)), with the conditioning
    term dropped when conditioning_dim == 0.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator,
                 name: str, cfg: ResidualMlpConfig):
        self.store = store
        self.name = name
        self.cfg = cfg
        init_linear(store, rng, f"{name}.in", cfg.input_dim, cfg.latent_dim)
        for i in range(cfg.n_blocks):
            if cfg.conditioning_dim > 0:
                init_linear(store, rng, f"{name}.blk{i}.cond",
                            cfg.conditioning_dim, cfg.latent_dim)
            init_linear(store, rng, f"{name}.blk{i}.fc1",
                        cfg.latent_dim, cfg.latent_dim)
            init_linear(store, rng, f"{name}.blk{i}.fc2",
                        cfg.latent_dim, cfg.latent_dim)
        init_linear(store, rng, f"{name}.out", cfg.latent_dim, cfg.output_dim)

    def __call__(self, x: Tensor, conditioning: Tensor | None = None) -> Tensor:
        cfg = self.cfg
        if x.shape[-1] != cfg.input_dim:
            raise ValueError(f"{self.name}: input dim {x.shape[-1]} != "
                             f"{cfg.input_dim}")
        if cfg.conditioning_dim > 0:
            if conditioning is None:
                raise ValueError(f"{self.name}: conditioning required")
            if conditioning.shape[-1] != cfg.conditioning_dim:
                raise ValueError(f"{self.name}: conditioning dim "
                                 f"{conditioning.shape[-1]} != "
                                 f"{cfg.conditioning_dim}")
        h = linear(self.store, f"{self.name}.in", x)
        for i in range(cfg.n_blocks):
            z = h
            if cfg.conditioning_dim > 0:
                z = z + linear(self.store, f"{self.name}.blk{i}.cond",
                               conditioning)
            z = linear(self.store, f"{self.name}.blk{i}.fc1", z.relu())
            z = linear(self.store, f"{self.name}.blk{i}.fc2", z.relu())
            h = h + z
        return linear(self.store, f"{self.name}.out", h)


class ConvStack:
    """Three 3x3 conv layers producing an L=3 feature pyramid.

    Level 0 keeps the input resolution (stride 1); levels 1 and 2 halve it
    (stride 2 each), so level l has extent image_extent // 2**l.
    """

    CHANNELS = (8, 16, 32)

    def __init__(self, store: ParamStore, rng: np.random.Generator, name: str,
                 in_channels: int = 3):
        self.store = store
        self.name = name
        cin = in_channels
        for i, cout in enumerate(self.CHANNELS):
            fan_in = cin * 9
            bound = 1.0 / np.sqrt(fan_in)
            store.add(f"{name}.conv{i}.w",
                      rng.uniform(-bound, bound, size=(cout, cin, 3, 3)))
            store.add(f"{name}.conv{i}.b", np.zeros(cout))
            cin = cout

    @property
    def feature_dim(self) -> int:
        return sum(self.CHANNELS)

    def __call__(self, image: Tensor) -> list[Tensor]:
        """Return the [level0, level1, level2] pyramid of a (3, H, W) image."""
        levels = []
        h = Tensor.as_tensor(image)
        for i in range(3):
            stride = 1 if i == 0 else 2
            h = conv2d(h, self.store[f"{self.name}.conv{i}.w"],
                       self.store[f"{self.name}.conv{i}.b"], stride=stride)
            h = h.relu()
            levels.append(h)
        return levels
