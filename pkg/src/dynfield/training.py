"""Losses and the joint training loop.

Each step samples one video, one frame and a mixed foreground/background
pixel batch, renders it through `DynamicSceneModel.render_batch`, and
minimizes a weighted sum of reconstruction, flow, correspondence,
depth-band, mask-consistency and regularization terms with Adam.
"""
from __future__ import annotations

import os
import time
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import Adam, Tensor, backward
from .model import DynamicSceneModel, SceneContext
from .renderer import composite
from .trajectory import SolverConfig


# ------------------------------------------------------------------- losses
def loss_rgb(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean over rays of the squared L2 color error (summed over channels)."""
    diff = pred - Tensor(np.asarray(gt, dtype=np.float64))
    return (diff * diff).sum(axis=1).mean()


def flow_l1_terms(pred: Tensor, gt: np.ndarray):
    """Summed per-ray L1 flow error and the valid-ray count, one direction.

    A ray is valid when every ground-truth component is finite; invalid
    entries are encoded as NaN and excluded.
    """
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.isfinite(gt).all(axis=1)
    if not valid.any():
        return Tensor(np.zeros(())), 0
    mask = valid.astype(np.float64)[:, None]
    diff = (pred - Tensor(np.nan_to_num(gt))) * Tensor(mask)
    return (diff * diff + 1e-12).sqrt().sum(), int(valid.sum())


def loss_flow(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean per-ray L1 flow error (|dx| + |dy|) over valid rays.

    An all-invalid batch contributes zero and emits a warning.
    """
    total, count = flow_l1_terms(pred, gt)
    if count == 0:
        warnings.warn("flow loss: batch has no valid ground-truth flow")
        return total
    return total / float(count)


def loss_background(pred: Tensor, gt: np.ndarray,
                    fg_mask: np.ndarray) -> Tensor:
    """Squared color error weighted by (1 - mask), averaged over
    background rays. An all-foreground batch contributes zero."""
    bg = 1.0 - np.asarray(fg_mask, dtype=np.float64)
    n_bg = float((bg > 0).sum())
    if n_bg == 0:
        return Tensor(np.zeros(()))
    diff = (pred - Tensor(np.asarray(gt, dtype=np.float64))) \
        * Tensor(bg[:, None])
    return (diff * diff).sum() / n_bg


def loss_mask(fg_render: Tensor, fg_mask: np.ndarray) -> Tensor:
    """Binary cross-entropy between the rendered foreground map (the
    composited blending weight of each ray) and the ground-truth mask."""
    eps = 1e-5
    m = Tensor(np.asarray(fg_mask, dtype=np.float64).reshape(-1, 1))
    f = fg_render
    return -((f + eps).log() * m
             + (1.0 - f + eps).log() * (1.0 - m)).mean()


def loss_depth_band(blend: Tensor, depths: np.ndarray, gt_depth: np.ndarray,
                    fg_mask: np.ndarray, eps: float = 0.03) -> Tensor:
    """Mean squared blending weight outside the surface depth band.

    Only foreground rays are constrained: samples further than `eps`
    from the ground-truth surface depth should not be explained by the
    dynamic field.
    """
    outside = (np.abs(depths - gt_depth[:, None]) > eps) \
        & fg_mask[:, None].astype(bool)
    if not outside.any():
        return Tensor(np.zeros(()))
    sel = blend * Tensor(outside.astype(np.float64))
    return (sel * sel).sum() / float(outside.sum())


def loss_mask_consistency(b_a: Tensor, b_b: Tensor) -> Tensor:
    """Mean squared difference of blending weights along a trajectory."""
    diff = b_a - b_b
    return (diff * diff).mean()


def loss_depth(pred_depth: Tensor, gt_depth: np.ndarray,
               fg_mask: np.ndarray) -> Tensor:
    """L1 depth error on foreground rays (zero if the batch has none)."""
    fg = np.asarray(fg_mask, dtype=bool)
    if not fg.any():
        return Tensor(np.zeros(()))
    diff = (pred_depth - Tensor(np.asarray(gt_depth))) * Tensor(
        fg.astype(np.float64))
    return (diff * diff + 1e-12).sqrt().sum() / float(fg.sum())


def loss_opacity_entropy(opacity: Tensor) -> Tensor:
    """Binary entropy of accumulated opacity; pushes rays to commit."""
    eps = 1e-5
    o = opacity
    return -((o + eps).log() * o + (1.0 - o + eps).log() * (1.0 - o)).mean()


def loss_velocity_smooth(v_a: Tensor, v_b: Tensor) -> Tensor:
    """Mean squared temporal change of the velocity field."""
    diff = v_a - v_b
    return (diff * diff).mean()


@dataclass
class LossWeights:
    full: float = 1.0
    static: float = 1.0
    opt: float = 0.02
    corr: float = 4.0
    db: float = 0.01
    mf: float = 1.0
    mask: float = 0.4
    depth: float = 0.05
    sparse: float = 0.001
    smooth: float = 0.01


@dataclass
class LossReport:
    terms: dict
    weights: LossWeights
    total: Tensor

    def scalars(self) -> dict:
        out = {k: float(v.data) for k, v in self.terms.items()}
        out["total"] = float(self.total.data)
        return out


def combine_losses(terms: dict, weights: LossWeights) -> LossReport:
    total = None
    for key, term in terms.items():
        part = term * getattr(weights, key)
        total = part if total is None else total + part
    return LossReport(terms, weights, total)


# ------------------------------------------------------------ training loop
@dataclass
class TrainConfig:
    steps: int = 1000
    batch_rays: int = 1024
    n_samples: int = 24
    solver: SolverConfig = dc_field(
        default_factory=lambda: SolverConfig("euler_bins", 2))
    lr: float = 5e-4
    seed: int = 0
    fg_fraction: float = 0.5
    corr_rays: int = 16
    mf_points: int = 16
    smooth_points: int = 16
    eps_band: float = 0.03
    log_every: int = 100
    checkpoint_every: int = 2000
    weights: LossWeights = dc_field(default_factory=LossWeights)
    frames: list | None = None  # restrict supervision to these frame indices


def sample_pixel_batch(rng: np.random.Generator, mask: np.ndarray,
                       n_rays: int, fg_fraction: float):
    """Mixed pixel batch: foreground-oversampled, rest uniform background.

    Returns integer (R, 2) pixel coordinates (x, y) and the row split
    point; foreground rows come first.
    """
    H, W = mask.shape
    fg_idx = np.flatnonzero(mask.ravel() > 0)
    bg_idx = np.flatnonzero(mask.ravel() == 0)
    n_fg = int(round(n_rays * fg_fraction)) if len(fg_idx) else 0
    n_bg = n_rays - n_fg
    picks = []
    if n_fg:
        picks.append(rng.choice(fg_idx, size=n_fg, replace=len(fg_idx) < n_fg))
    picks.append(rng.choice(bg_idx, size=n_bg,
                            replace=len(bg_idx) < n_bg))
    flat = np.concatenate(picks)
    pixels = np.stack([flat % W, flat // W], axis=1).astype(np.float64)
    return pixels, n_fg


def compute_losses(model: DynamicSceneModel, ctx: SceneContext,
                   frame_idx: int, pixels: np.ndarray, n_fg: int,
                   rng: np.random.Generator, cfg: TrainConfig) -> LossReport:
    """One batch forward pass and every loss term, unweighted."""
    seq = ctx.seq
    fr = seq.frames[frame_idx]
    xi = pixels[:, 0].astype(int)
    yi = pixels[:, 1].astype(int)
    gt_rgb = fr.rgb[yi, xi]
    gt_depth = fr.depth[yi, xi]
    fg_mask = fr.mask[yi, xi] > 0

    corr_rows = np.arange(min(n_fg, cfg.corr_rays))
    out = model.render_batch(
        ctx, frame_idx, pixels, rng, n_samples=cfg.n_samples,
        solver=cfg.solver, need_flow=True,
        corr_rows=corr_rows if len(corr_rows) else None)

    terms = {"full": loss_rgb(out["color_full"], gt_rgb),
             "static": loss_background(out["color_st"], gt_rgb, fg_mask)}

    allowed = set(cfg.frames) if cfg.frames is not None else None
    flow_sum, n_pairs = Tensor(np.zeros(())), 0
    for key, gt_map, nb in (("flow_fw", fr.flow_fw, frame_idx + 1),
                            ("flow_bw", fr.flow_bw, frame_idx - 1)):
        if key not in out or gt_map is None:
            continue
        if allowed is not None and nb not in allowed:
            continue  # flow target frame outside the supervised split
        part, n = flow_l1_terms(out[key], gt_map[yi, xi])
        flow_sum = flow_sum + part
        n_pairs += n
    terms["opt"] = (flow_sum / float(n_pairs)) if n_pairs \
        else Tensor(np.zeros(()))

    if len(corr_rows):
        corr = loss_rgb(out["color_dy"][corr_rows], gt_rgb[corr_rows])
        for key in ("color_dy_bw", "color_dy_fw"):
            if key in out:
                corr = corr + loss_rgb(out[key], gt_rgb[corr_rows])
        terms["corr"] = corr
    else:
        terms["corr"] = Tensor(np.zeros(()))

    terms["db"] = loss_depth_band(out["blend"], out["depths"], gt_depth,
                                  fg_mask, cfg.eps_band)

    fg_render = composite(out["weights_full"],
                          out["blend"].reshape(len(pixels), -1, 1))
    terms["mask"] = loss_mask(fg_render, fg_mask)

    # mask consistency: blending weight of the dominant sample on each
    # foreground ray must persist along its trajectory
    M = cfg.n_samples
    if n_fg and seq.K > 1:
        take = min(n_fg, cfg.mf_points)
        ray_rows = np.arange(take)
        top = out["weights_dy"].data[ray_rows].argmax(axis=1)
        rows = ray_rows * M + top
        other = int(rng.integers(0, seq.K - 1))
        other = other + 1 if other >= frame_idx else other
        dirs_rows = np.repeat(out["dirs"], M, axis=0)[rows]
        (b_other,) = model.blend_at_frames(ctx, out["cache"], rows,
                                           dirs_rows, [other])
        b_here = out["blend"].reshape(-1, 1)[rows]
        terms["mf"] = loss_mask_consistency(b_here, b_other)
    else:
        terms["mf"] = Tensor(np.zeros(()))

    terms["depth"] = loss_depth(out["depth_full"], gt_depth, fg_mask)
    terms["sparse"] = loss_opacity_entropy(out["opacity_full"])

    if not model.freeze_velocity and cfg.smooth_points:
        vel = model.velocity_closure(ctx)
        n_pts = min(cfg.smooth_points, len(pixels) * M)
        rows = rng.choice(len(pixels) * M, size=n_pts, replace=False)
        x_s = out["cache"].pos[frame_idx].data[rows]
        t = float(seq.timestamps[frame_idx])
        dt = 0.5 / max(seq.K - 1, 1)
        terms["smooth"] = loss_velocity_smooth(vel(Tensor(x_s), t),
                                               vel(Tensor(x_s), t + dt))
    else:
        terms["smooth"] = Tensor(np.zeros(()))
    return combine_losses(terms, cfg.weights)


def train(model: DynamicSceneModel, sequences: list, cfg: TrainConfig,
          out_dir: str | None = None, log=print,
          optimizer: Adam | None = None) -> list:
    """Joint training over one or more videos; returns the metrics history.

    A non-finite gradient aborts the run after restoring the last saved
    checkpoint (if any). With `out_dir` set, periodic and final
    checkpoints land in `<out_dir>/checkpoint.bin`.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = optimizer or Adam(model.params, lr=cfg.lr)
    history = []
    ckpt_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    have_ckpt = False
    t0 = time.time()
    for step in range(cfg.steps):
        seq = sequences[rng.integers(0, len(sequences))] \
            if len(sequences) > 1 else sequences[0]
        ctx = model.encode(seq)
        if cfg.frames is not None:
            frame_idx = int(cfg.frames[rng.integers(0, len(cfg.frames))])
        else:
            frame_idx = int(rng.integers(0, seq.K))
        pixels, n_fg = sample_pixel_batch(rng, seq.frames[frame_idx].mask,
                                          cfg.batch_rays, cfg.fg_fraction)
        report = compute_losses(model, ctx, frame_idx, pixels, n_fg, rng, cfg)
        model.params.zero_grad()
        backward(report.total)
        try:
            opt.step()
        except FloatingPointError as exc:
            if ckpt_path and have_ckpt:
                model.load(ckpt_path)
                log(f"step {step}: aborting on non-finite gradient ({exc}); "
                    f"restored {ckpt_path}")
            else:
                log(f"step {step}: aborting on non-finite gradient ({exc})")
            break
        scalars = report.scalars()
        scalars["step"] = step
        history.append(scalars)
        if cfg.log_every and step % cfg.log_every == 0:
            parts = " ".join(f"{k}={v:.4f}" for k, v in scalars.items()
                             if k != "step")
            log(f"step {step} [{time.time() - t0:.1f}s] {parts}")
        if ckpt_path and cfg.checkpoint_every \
                and (step + 1) % cfg.checkpoint_every == 0:
            model.save(ckpt_path, opt)
            have_ckpt = True
    if ckpt_path:
        model.save(ckpt_path, opt)
    return history


def finetune(model: DynamicSceneModel, seq, cfg: TrainConfig | None = None,
             out_dir: str | None = None, log=print) -> list:
    """Adapt pretrained weights to one new video (default 500 steps)."""
    cfg = cfg or TrainConfig(steps=500)
    return train(model, [seq], cfg, out_dir=out_dir, log=log)
