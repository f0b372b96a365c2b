"""End-to-end scene model: encoders + velocity field + radiance heads.

`DynamicSceneModel` owns every trainable parameter and provides the ray
batch forward pass used for both training and evaluation rendering. All
per-video state (feature pyramids, temporal feature) lives in a
`SceneContext` produced by `encode`, so several videos can share one set
of weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import Adam, ParamStore, Tensor, load_checkpoint, no_grad, \
    save_checkpoint
from .features import FeatureNets, ForegroundEdit, project_points
from .renderer import (DynamicHead, StaticHead, blend_fields,
                       combine_branches, composite, quadrature_render,
                       stratified_depths)
from .scene import MonocularSequence
from .trajectory import SolverConfig, VelocityField, integrate_trajectory


@dataclass
class ModelConfig:
    latent_dim: int = 64
    static_latent_dim: int | None = None  # default: 1.5x latent_dim
    n_blocks: int = 2
    n_freq_x: int = 6
    n_freq_t: int = 4
    pos_scale: float = 0.125
    train_samples: int = 24
    eval_samples: int = 48
    train_solver: SolverConfig = dc_field(
        default_factory=lambda: SolverConfig("euler_bins", 2))
    eval_solver: SolverConfig = dc_field(
        default_factory=lambda: SolverConfig("rk4", 4))
    seed: int = 0


@dataclass
class SceneContext:
    """Per-video encoder outputs shared by every ray of a step."""
    seq: MonocularSequence
    dy_pack: object
    st_pack: object
    f_temp: Tensor

    @property
    def cameras(self):
        return self.seq.cameras

    @property
    def timestamps(self):
        return self.seq.timestamps


class TrajectoryCache:
    """Chained per-frame trajectory positions for one point batch.

    Positions at observed frames are built lazily by integrating one
    inter-frame hop at a time away from the base frame, so every
    consumer (feature window, flow, warped renders) shares the work.
    """

    def __init__(self, velocity, x0, base_frame: int,
                 timestamps: np.ndarray, solver: SolverConfig):
        self.velocity = velocity
        self.timestamps = timestamps
        self.solver = solver
        self.base = base_frame
        self.pos = {base_frame: Tensor.as_tensor(x0)}

    def at(self, j: int) -> Tensor:
        if j in self.pos:
            return self.pos[j]
        if not 0 <= j < len(self.timestamps):
            raise KeyError(f"frame {j} out of range")
        step = 1 if j > self.base else -1
        k = j - step
        prev = self.at(k)
        ts = self.timestamps
        self.pos[j] = integrate_trajectory(
            self.velocity, prev, float(ts[k]), float(ts[j]), self.solver)
        return self.pos[j]

    def subcache(self, rows: np.ndarray, base_frame: int) -> "TrajectoryCache":
        """Row-sliced view for a sub-batch, reusing computed positions."""
        sub = TrajectoryCache(self.velocity, self.pos[self.base][rows],
                              self.base, self.timestamps, self.solver)
        sub.base = base_frame
        sub.pos = {j: p[rows] for j, p in self.pos.items()}
        return sub


class DynamicSceneModel:
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        cfg = self.cfg
        self.params = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        self.features = FeatureNets(self.params, rng)
        self.velocity = VelocityField(
            self.params, rng, latent_dim=cfg.latent_dim,
            n_blocks=cfg.n_blocks, n_freq_x=cfg.n_freq_x,
            n_freq_t=cfg.n_freq_t, pos_scale=cfg.pos_scale)
        self.dynamic_head = DynamicHead(
            self.params, rng, latent_dim=cfg.latent_dim,
            n_blocks=cfg.n_blocks, n_freq_x=cfg.n_freq_x,
            n_freq_t=cfg.n_freq_t, pos_scale=cfg.pos_scale)
        # The static field must absorb every scene's background on its
        # own, so it gets a wider trunk than the other heads.
        st_dim = cfg.static_latent_dim or cfg.latent_dim * 3 // 2
        self.static_head = StaticHead(
            self.params, rng, latent_dim=st_dim,
            n_blocks=cfg.n_blocks, n_freq_x=cfg.n_freq_x,
            pos_scale=cfg.pos_scale)
        self.freeze_velocity = False

    # ----------------------------------------------------------------- setup
    def encode(self, seq: MonocularSequence) -> SceneContext:
        rgb = np.stack([fr.rgb for fr in seq.frames])
        dy_pack = self.features.encode_video(rgb, seq.timestamps)
        st_pack = self.features.encode_images(rgb, seq.timestamps)
        f_temp = self.features.temporal_feature(dy_pack)
        return SceneContext(seq, dy_pack, st_pack, f_temp)

    def velocity_closure(self, ctx: SceneContext):
        if self.freeze_velocity:
            return lambda x, t: Tensor(np.zeros(Tensor.as_tensor(x).shape))
        return lambda x, t: self.velocity(ctx.f_temp, x, t)

    # --------------------------------------------------------- point queries
    def query_dynamic(self, ctx: SceneContext, cache: TrajectoryCache,
                      frame_idx: int, dirs):
        """(c_dy, sigma_dy, b) for cached points evaluated at `frame_idx`.

        The spatial feature window is {frame_idx-1, frame_idx, frame_idx+1}
        sampled at the trajectory-projected pixels of each window frame.
        """
        K = ctx.seq.K
        window_pixels = {}
        for j in (frame_idx - 1, frame_idx, frame_idx + 1):
            if 0 <= j < K:
                pix, _ = project_points(ctx.cameras[j], cache.at(j))
                window_pixels[j] = pix
        f_sp, _ = self.features.spatial_feature(ctx.dy_pack, frame_idx,
                                                window_pixels)
        f_dy = self.features.point_feature(ctx.f_temp, f_sp)
        t = float(ctx.timestamps[frame_idx])
        return self.dynamic_head(cache.at(frame_idx), t, dirs, f_dy)

    def query_static(self, ctx: SceneContext, x: np.ndarray, dirs,
                     query_frame: int, rng: np.random.Generator,
                     source_frame: int | None = None,
                     static_ctx: SceneContext | None = None):
        src = static_ctx or ctx
        f_st, chosen, _ = self.features.static_feature(
            src.st_pack, src.cameras, x, query_frame, rng,
            source_frame=source_frame)
        color, sigma = self.static_head(Tensor(x), dirs, f_st)
        return color, sigma, chosen

    # -------------------------------------------------------------- rendering
    def render_batch(self, ctx: SceneContext, frame_idx: int,
                     pixels: np.ndarray, rng: np.random.Generator, *,
                     n_samples: int | None = None,
                     solver: SolverConfig | None = None,
                     need_flow: bool = False,
                     corr_rows: np.ndarray | None = None,
                     need_static: bool = True,
                     static_frame: int | None = None,
                     static_ctx: SceneContext | None = None,
                     edit: ForegroundEdit | None = None) -> dict:
        """Forward pass for a batch of rays through one frame's pixels.

        Returns a dict of Tensors/arrays: dynamic, static and blended
        colors, per-sample blending weights, rendered flows for available
        directions, warped dynamic renders for `corr_rows`, and the
        sample bookkeeping needed by the losses.
        """
        cfg = self.cfg
        M = n_samples or cfg.train_samples
        solver = solver or cfg.train_solver
        seq = ctx.seq
        cam = ctx.cameras[frame_idx]
        near, far = seq.near, seq.far
        R = len(pixels)

        dirs_ray = cam.pixel_rays(pixels)                     # (R, 3)
        depths = stratified_depths(rng, R, M, near, far)      # (R, M)
        x = cam.center[None, None, :] + depths[:, :, None] * dirs_ray[:, None, :]
        x_flat = x.reshape(-1, 3)
        dirs = np.repeat(dirs_ray, M, axis=0)                 # (P, 3)

        vel = self.velocity_closure(ctx)
        if edit is not None and edit.is_identity():
            edit = None
        branches = edit.branches if edit is not None else [None]
        parts, cache = [], None
        for branch in branches:
            x_b = Tensor(x_flat) if branch is None else branch.apply(
                Tensor(x_flat))
            br_cache = TrajectoryCache(vel, x_b, frame_idx, ctx.timestamps,
                                       solver)
            parts.append(self.query_dynamic(ctx, br_cache, frame_idx, dirs))
            if cache is None:
                cache = br_cache
        c_dy, s_dy, b = combine_branches(parts)

        out = {"depths": depths, "pixels": pixels, "frame": frame_idx}
        sigma_dy = s_dy.reshape(R, M)
        blend = b.reshape(R, M)
        colors_dy = c_dy.reshape(R, M, 3)
        C_dy, op_dy, depth_dy, w_dy = quadrature_render(
            sigma_dy, colors_dy, depths, far)
        out.update(color_dy=C_dy, opacity_dy=op_dy, depth_dy=depth_dy,
                   weights_dy=w_dy, blend=blend, sigma_dy=sigma_dy)

        if need_flow and edit is None:
            for key, j in (("bw", frame_idx - 1), ("fw", frame_idx + 1)):
                if not 0 <= j < seq.K:
                    continue
                pix_t, z_t = project_points(ctx.cameras[j], cache.at(j))
                ok = (z_t > 1e-6).astype(np.float64).reshape(R, M)
                diff = pix_t.reshape(R, M, 2) - Tensor(pixels[:, None, :])
                out[f"flow_{key}"] = composite(w_dy * Tensor(ok), diff)

        if corr_rows is not None and len(corr_rows) and edit is None:
            sample_rows = (corr_rows[:, None] * M
                           + np.arange(M)[None, :]).reshape(-1)
            for key, j in (("bw", frame_idx - 1), ("fw", frame_idx + 1)):
                if not 0 <= j < seq.K:
                    continue
                cache.at(j)  # materialize before slicing
                sub = cache.subcache(sample_rows, j)
                c_w, s_w, _ = self.query_dynamic(ctx, sub, j,
                                                 dirs[sample_rows])
                Rc = len(corr_rows)
                C_w, _, _, _ = quadrature_render(
                    s_w.reshape(Rc, M), c_w.reshape(Rc, M, 3),
                    depths[corr_rows], far)
                out[f"color_dy_{key}"] = C_w
            out["corr_rows"] = corr_rows

        if need_static:
            if static_frame is None:
                src_ctx = static_ctx or ctx
                choices = [k for k in range(src_ctx.seq.K) if k != frame_idx]
                static_frame = int(choices[rng.integers(0, len(choices))])
            c_st, s_st, _ = self.query_static(
                ctx, x_flat, dirs, frame_idx, rng,
                source_frame=static_frame, static_ctx=static_ctx)
            sigma_st = s_st.reshape(R, M)
            colors_st = c_st.reshape(R, M, 3)
            C_st, op_st, _, _ = quadrature_render(
                sigma_st, colors_st, depths, far)
            sigma_full, color_full = blend_fields(
                sigma_st.reshape(R, M, 1), colors_st,
                sigma_dy.reshape(R, M, 1), colors_dy, blend.reshape(R, M, 1))
            C_full, op_full, depth_full, w_full = quadrature_render(
                sigma_full.reshape(R, M), color_full, depths, far)
            out.update(color_st=C_st, opacity_st=op_st, color_full=C_full,
                       opacity_full=op_full, depth_full=depth_full,
                       weights_full=w_full, static_frame=static_frame)
        out["cache"] = cache
        out["dirs"] = dirs_ray
        return out

    def blend_at_frames(self, ctx: SceneContext, cache: TrajectoryCache,
                        rows: np.ndarray, dirs_rows: np.ndarray,
                        frames: list) -> list:
        """Blending weight b at the trajectory positions of given frames.

        `rows` index into the flattened point batch of `cache`; one
        (P_rows, 1) tensor per requested frame is returned.
        """
        outs = []
        for j in frames:
            sub = cache.subcache(rows, cache.base)
            _, _, b_j = self.query_dynamic(ctx, sub, j, dirs_rows)
            outs.append(b_j)
        return outs

    # ------------------------------------------------------------ evaluation
    def render_image(self, ctx: SceneContext, frame_idx: int,
                     camera=None, *, n_samples: int | None = None,
                     solver: SolverConfig | None = None, seed: int = 0,
                     chunk: int = 1024, need_flow: bool = False,
                     static_frame: int | None = None,
                     static_ctx: SceneContext | None = None,
                     edit: ForegroundEdit | None = None) -> dict:
        """Forward-only full-image render (fixed or novel camera)."""
        cam = camera or ctx.cameras[frame_idx]
        M = n_samples or self.cfg.eval_samples
        solver = solver or self.cfg.eval_solver
        H, W = cam.height, cam.width
        pixels = cam.pixel_grid()
        rng = np.random.default_rng(seed)
        if static_frame is None:
            src_K = (static_ctx or ctx).seq.K
            choices = [k for k in range(src_K) if k != frame_idx]
            static_frame = int(choices[rng.integers(0, len(choices))])
        acc = {}
        with no_grad():
            for lo in range(0, len(pixels), chunk):
                pix = pixels[lo:lo + chunk]
                out = self.render_batch(
                    ctx, frame_idx, pix, rng, n_samples=M, solver=solver,
                    need_flow=need_flow, static_frame=static_frame,
                    static_ctx=static_ctx, edit=edit)
                fg = composite(out["weights_full"],
                               out["blend"].reshape(len(pix), -1, 1))
                chunk_maps = {
                    "rgb": out["color_full"].data,
                    "rgb_dy": out["color_dy"].data,
                    "rgb_st": out["color_st"].data,
                    "depth": out["depth_full"].data[:, None],
                    "fg": fg.data,
                }
                if need_flow:
                    for key in ("flow_bw", "flow_fw"):
                        if key in out:
                            chunk_maps[key] = out[key].data
                for key, val in chunk_maps.items():
                    acc.setdefault(key, []).append(val)
        maps = {}
        for key, vals in acc.items():
            arr = np.concatenate(vals, axis=0)
            maps[key] = arr.reshape(H, W, arr.shape[-1]).squeeze(-1) \
                if arr.shape[-1] == 1 else arr.reshape(H, W, arr.shape[-1])
        return maps

    # ------------------------------------------------------------- persistence
    def save(self, path: str, optimizer: Adam | None = None):
        save_checkpoint(path, self.params, optimizer)

    def load(self, path: str, optimizer: Adam | None = None):
        load_checkpoint(path, self.params, optimizer)
