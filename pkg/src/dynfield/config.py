"""Plain-text key=value run configuration.

Every key has a default below; unknown keys are rejected so typos fail
loudly. Values are parsed to the type of the default. Lines starting
with '#' and blank lines are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .model import ModelConfig
from .trajectory import SolverConfig
from .training import LossWeights, TrainConfig


@dataclass
class RunConfig:
    # scene synthesis
    scene: str = "orbit"        # preset recipe: orbit|linear|two-balls|box-slide
    k: int = 12                 # number of frames
    width: int = 64
    height: int = 64
    arc_deg: float = 18.0       # camera rig arc
    elev_deg: float = 8.0
    # model
    latent_dim: int = 64
    n_blocks: int = 2
    # trajectory solvers (train / eval)
    solver: str = "euler_bins"  # euler_bins|rk4
    solver_n: int = 2
    eval_solver: str = "rk4"
    eval_solver_n: int = 4
    # sampling
    n_samples: int = 24         # quadrature samples per ray (training)
    eval_samples: int = 48
    batch_rays: int = 128
    fg_fraction: float = 0.5
    corr_rays: int = 16
    mf_points: int = 16
    smooth_points: int = 16
    # optimization
    steps: int = 1000
    lr: float = 5e-4
    seed: int = 0
    eps_band: float = 0.03
    log_every: int = 100
    checkpoint_every: int = 2000
    # loss weights
    w_full: float = 1.0
    w_static: float = 1.0
    w_opt: float = 0.02
    w_corr: float = 4.0
    w_db: float = 0.01
    w_mf: float = 1.0
    w_mask: float = 0.4
    w_depth: float = 0.05
    w_sparse: float = 0.001
    w_smooth: float = 0.01

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            latent_dim=self.latent_dim, n_blocks=self.n_blocks,
            train_samples=self.n_samples, eval_samples=self.eval_samples,
            train_solver=SolverConfig(self.solver, self.solver_n),
            eval_solver=SolverConfig(self.eval_solver, self.eval_solver_n),
            seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_rays=self.batch_rays,
            n_samples=self.n_samples,
            solver=SolverConfig(self.solver, self.solver_n),
            lr=self.lr, seed=self.seed, fg_fraction=self.fg_fraction,
            corr_rays=self.corr_rays, mf_points=self.mf_points,
            smooth_points=self.smooth_points, eps_band=self.eps_band,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
            weights=LossWeights(
                full=self.w_full, static=self.w_static, opt=self.w_opt,
                corr=self.w_corr, db=self.w_db, mf=self.w_mf,
                mask=self.w_mask,
                depth=self.w_depth, sparse=self.w_sparse,
                smooth=self.w_smooth))


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got "
                              f"{raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = getattr(RunConfig(), key)
        try:
            if isinstance(default, bool):
                parsed = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                parsed = int(value)
            elif isinstance(default, float):
                parsed = float(value)
            else:
                parsed = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}")
        setattr(cfg, key, parsed)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"
