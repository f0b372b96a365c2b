"""Trainable video/image encoders and the point-feature machinery.

A tiny conv stack plays the role of the video encoder (per-frame feature
pyramids plus a time-weighted global latent) and a second stack with its
own weights encodes frames for the static background field. Point
features are assembled from bilinear samples of the pyramids at
trajectory-projected pixels.

Feature dimensions are fixed: F_temp, F_sp and F_st are 256-vectors and
F_dy = concat(F_temp, F_sp) is 512.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, Tensor, bilinear_sample, concat
from .nn import ConvStack, init_linear, linear

FEATURE_DIM = 256
POINT_FEATURE_DIM = 512
GLOBAL_LATENT_DIM = 128


def project_points(camera, points: Tensor):
    """Differentiable pinhole projection of (P, 3) world points.

    Returns (pixels (P, 2) Tensor, z-depth (P,) ndarray). Gradients flow
    through the pixel coordinates; the depth array is for validity masks.
    """
    points = Tensor.as_tensor(points)
    cam = points @ Tensor(camera.rotation.T) + Tensor(camera.translation)
    uvw = cam @ Tensor(camera.intrinsics.T)
    pix = uvw[:, 0:2] / uvw[:, 2:3]
    return pix, cam.data[:, 2].copy()


@dataclass
class VideoFeaturePack:
    """Per-frame 3-level feature pyramids plus a global video latent."""
    pyramids: list          # K entries of [level0, level1, level2] Tensors
    global_latent: Tensor | None
    timestamps: np.ndarray
    width: int
    height: int

    @property
    def K(self) -> int:
        return len(self.pyramids)


class FeatureNets:
    """All encoder-side parameters: E_dy, E_st, W_temp, fc_1, fc_2, fc_3."""

    def __init__(self, store: ParamStore, rng: np.random.Generator):
        self.store = store
        self.video_encoder = ConvStack(store, rng, "edy")
        self.image_encoder = ConvStack(store, rng, "est")
        pyr_dim = self.video_encoder.feature_dim
        pooled = ConvStack.CHANNELS[-1]
        # global latent: order-sensitive temporal pooling (mean + first
        # time moment of per-frame pooled features), fused by a small MLP
        init_linear(store, rng, "edy.glob1", 2 * pooled, GLOBAL_LATENT_DIM)
        init_linear(store, rng, "edy.glob2", GLOBAL_LATENT_DIM,
                    GLOBAL_LATENT_DIM)
        init_linear(store, rng, "wtemp.fc1", GLOBAL_LATENT_DIM,
                    GLOBAL_LATENT_DIM)
        init_linear(store, rng, "wtemp.fc2", GLOBAL_LATENT_DIM, FEATURE_DIM)
        init_linear(store, rng, "fc1", pyr_dim, FEATURE_DIM)
        init_linear(store, rng, "fc2", 3 * FEATURE_DIM, FEATURE_DIM)
        init_linear(store, rng, "fc3", pyr_dim, FEATURE_DIM)

    # ------------------------------------------------------------- encoders
    def encode_video(self, rgb_frames: np.ndarray,
                     timestamps: np.ndarray) -> VideoFeaturePack:
        """Encode (K, H, W, 3) frames with the dynamic-field encoder E_dy."""
        K, H, W, _ = rgb_frames.shape
        if K < 2:
            raise ValueError("a video needs at least 2 frames")
        pyramids, pooled = [], []
        for i in range(K):
            img = Tensor(rgb_frames[i].transpose(2, 0, 1))
            levels = self.video_encoder(img)
            pyramids.append(levels)
            top = levels[-1]
            c, h, w = top.shape
            pooled.append(top.reshape(c, h * w).sum(axis=1) * (1.0 / (h * w)))
        ts = np.asarray(timestamps, dtype=np.float64)
        mom0 = concat([p.reshape(1, -1) for p in pooled], axis=0).mean(axis=0)
        mom1 = concat([(p * float(t)).reshape(1, -1)
                       for p, t in zip(pooled, ts)], axis=0).mean(axis=0)
        z = concat([mom0, mom1], axis=0).reshape(1, -1)
        z = linear(self.store, "edy.glob1", z).relu()
        z = linear(self.store, "edy.glob2", z)
        return VideoFeaturePack(pyramids, z, ts, W, H)

    def encode_images(self, rgb_frames: np.ndarray,
                      timestamps: np.ndarray) -> VideoFeaturePack:
        """Per-frame pyramids from the static-field encoder E_st."""
        K, H, W, _ = rgb_frames.shape
        pyramids = [self.image_encoder(Tensor(rgb_frames[i].transpose(2, 0, 1)))
                    for i in range(K)]
        return VideoFeaturePack(pyramids, None,
                                np.asarray(timestamps, dtype=np.float64), W, H)

    # ------------------------------------------------------------- features
    def temporal_feature(self, pack: VideoFeaturePack) -> Tensor:
        """F_temp = W_temp(E_dy(V)); a (1, 256) row vector."""
        z = linear(self.store, "wtemp.fc1", pack.global_latent).relu()
        return linear(self.store, "wtemp.fc2", z)

    @staticmethod
    def sample_frame_feature(pack: VideoFeaturePack, frame_index: int,
                             pixels: Tensor):
        """Bilinear pyramid sample at (P, 2) pixels, levels concatenated.

        Pixels up to 0.5 px outside the image are clamped; anything
        farther returns a zero vector and a False flag for that point.
        """
        pixels = Tensor.as_tensor(pixels)
        W, H = pack.width, pack.height
        p = pixels.data
        inside = ((p[:, 0] >= -0.5) & (p[:, 0] <= W - 0.5)
                  & (p[:, 1] >= -0.5) & (p[:, 1] <= H - 0.5))
        parts = []
        for lvl, fmap in enumerate(pack.pyramids[frame_index]):
            scale = 1.0 / (2 ** lvl)
            coords = (pixels + 0.5) * scale - 0.5
            parts.append(bilinear_sample(fmap, coords))
        out = concat(parts, axis=1)
        if not inside.all():
            out = out * Tensor(inside.astype(np.float64)[:, None])
        return out, inside

    def spatial_feature(self, pack: VideoFeaturePack, frame_index: int,
                        window_pixels: dict):
        """Aggregate F_sp over the {i-1, i, i+1} frame window.

        window_pixels maps frame index -> (P, 2) projected trajectory
        pixels; missing neighbors (sequence ends, or frames left out by
        the caller) contribute zero slots before fc_2.
        """
        slots = []
        valid_any = None
        P = None
        for offset in (-1, 0, 1):
            j = frame_index + offset
            if j in window_pixels:
                feat, inside = self.sample_frame_feature(
                    pack, j, window_pixels[j])
                slot = linear(self.store, "fc1", feat)
                P = slot.shape[0]
                valid_any = inside if valid_any is None else (valid_any | inside)
                slots.append(slot)
            else:
                slots.append(None)
        if P is None:
            raise ValueError("spatial_feature needs at least one window frame")
        slots = [s if s is not None else Tensor(np.zeros((P, FEATURE_DIM)))
                 for s in slots]
        f_sp = linear(self.store, "fc2", concat(slots, axis=1))
        low_confidence = ~valid_any
        if low_confidence.any():
            f_sp = f_sp * Tensor((~low_confidence).astype(np.float64)[:, None])
        return f_sp, low_confidence

    @staticmethod
    def point_feature(f_temp: Tensor, f_sp: Tensor) -> Tensor:
        """F_dy = concat(F_temp, F_sp), temporal part first; (P, 512)."""
        if f_temp.shape[-1] != FEATURE_DIM or f_sp.shape[-1] != FEATURE_DIM:
            raise ValueError("point_feature expects two 256-dim inputs")
        P = f_sp.shape[0]
        rep = f_temp.reshape(1, FEATURE_DIM) * Tensor(np.ones((P, 1)))
        return concat([rep, f_sp], axis=1)

    def static_feature(self, pack: VideoFeaturePack, cameras: list,
                       x: np.ndarray, query_frame: int,
                       rng: np.random.Generator,
                       source_frame: int | None = None):
        """F_st from a random non-query frame's pyramid at the projection of x.

        Each point draws its source frame uniformly from the other frames;
        a point behind the drawn camera is redrawn once and zeroed (and
        flagged) if still behind. Passing source_frame pins the draw.
        """
        K = pack.K
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        P = len(x)
        if source_frame is not None:
            chosen = np.full(P, source_frame, dtype=np.int64)
            if source_frame == query_frame:
                raise ValueError("source frame must differ from query frame")
        else:
            draws = rng.integers(0, K - 1, size=P)
            chosen = np.where(draws >= query_frame, draws + 1, draws)
        feat = Tensor(np.zeros((P, self.image_encoder.feature_dim)))
        flagged = np.zeros(P, dtype=bool)
        for attempt in range(2):
            redraw = np.zeros(P, dtype=bool)
            for j in np.unique(chosen):
                sel = np.nonzero(chosen == j)[0]
                pix, z = project_points(cameras[j], Tensor(x[sel]))
                behind = z <= 1e-9
                ok = sel[~behind]
                if len(ok):
                    sub_pix = pix[np.nonzero(~behind)[0]]
                    sampled, _ = self.sample_frame_feature(
                        pack, int(j), sub_pix)
                    feat = feat + _scatter_rows(sampled, ok, P)
                redraw[sel[behind]] = True
            if not redraw.any():
                break
            if attempt == 0:
                n = int(redraw.sum())
                draws = rng.integers(0, K - 1, size=n)
                chosen[redraw] = np.where(draws >= query_frame,
                                          draws + 1, draws)
            else:
                flagged = redraw
        f_st = linear(self.store, "fc3", feat)
        if flagged.any():
            f_st = f_st * Tensor((~flagged).astype(np.float64)[:, None])
        return f_st, chosen, flagged


def _scatter_rows(rows: Tensor, indices: np.ndarray, total: int) -> Tensor:
    """Place (n, C) rows at given (unique) indices of a zero (total, C) tensor."""
    data = np.zeros((total, rows.shape[1]))
    data[indices] = rows.data
    return Tensor._make(data, (rows,), lambda g: (g[indices],), "scatter")


# ------------------------------------------------------------------- editing
@dataclass
class AffineMap:
    """x -> matrix @ x + offset over world coordinates."""
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, x: Tensor) -> Tensor:
        return Tensor.as_tensor(x) @ Tensor(self.matrix.T) + Tensor(self.offset)

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """self after inner: x -> self(inner(x))."""
        return AffineMap(self.matrix @ inner.matrix,
                         self.matrix @ inner.offset + self.offset)

    def inverse(self) -> "AffineMap":
        inv = np.linalg.inv(self.matrix)
        return AffineMap(inv, -inv @ self.offset)

    def is_identity(self, tol=0.0) -> bool:
        return (np.abs(self.matrix - np.eye(3)).max() <= tol
                and np.abs(self.offset).max() <= tol)


@dataclass
class ForegroundEdit:
    """Query mapping for the dynamic field: one AffineMap per branch.

    The edited field evaluates the original field at every branch map of
    the query point and composites the branch outputs (density-weighted);
    a single identity branch is the unedited field.
    """
    branches: list = field(default_factory=lambda: [AffineMap()])

    @staticmethod
    def translate(delta) -> "ForegroundEdit":
        # scene moved by +delta => query the original field at x - delta
        return ForegroundEdit([AffineMap(np.eye(3),
                                         -np.asarray(delta, dtype=np.float64))])

    @staticmethod
    def scale(s: float, anchor=(0.0, 0.0, 0.0)) -> "ForegroundEdit":
        if s == 0.0:
            raise ValueError("scale factor must be nonzero")
        anchor = np.asarray(anchor, dtype=np.float64)
        m = np.eye(3) / s
        return ForegroundEdit([AffineMap(m, anchor - m @ anchor)])

    @staticmethod
    def flip(axis: int, plane_pos: float = 0.0) -> "ForegroundEdit":
        m = np.eye(3)
        m[axis, axis] = -1.0
        off = np.zeros(3)
        off[axis] = 2.0 * plane_pos
        return ForegroundEdit([AffineMap(m, off)])

    @staticmethod
    def duplicate(offset) -> "ForegroundEdit":
        return ForegroundEdit([AffineMap(),
                               AffineMap(np.eye(3),
                                         -np.asarray(offset, dtype=np.float64))])

    def then(self, nxt: "ForegroundEdit") -> "ForegroundEdit":
        """Apply `self` first, then `nxt` (query maps compose inside-out)."""
        return ForegroundEdit([a.compose(b) for b in nxt.branches
                               for a in self.branches])

    def is_identity(self, tol=0.0) -> bool:
        return len(self.branches) == 1 and self.branches[0].is_identity(tol)
