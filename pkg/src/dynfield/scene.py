"""Procedural monocular-video generator with analytic ground truth.

Scenes are a textured background plane plus a few rigid movers (spheres
or axis-aligned boxes) on C1 center paths over t in [0, 1]. Rendering is
exact ray intersection with flat Lambertian shading, which gives analytic
depth, foreground masks and bidirectional optical flow for supervision.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

MISS_COLOR = np.array([0.08, 0.08, 0.10])
LIGHT_DIR = np.array([-0.3, -0.5, -0.8]) / np.linalg.norm([-0.3, -0.5, -0.8])


# ------------------------------------------------------------------- cameras
@dataclass
class CameraModel:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics."""
    intrinsics: np.ndarray  # 3x3
    rotation: np.ndarray    # 3x3 world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        rtr = self.rotation @ self.rotation.T
        if (np.abs(rtr - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9):
            raise ValueError("camera rotation is not a proper rotation")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray, strict: bool = True):
        """Project (N, 3) world points; returns (pixels (N, 2), z-depth (N,)).

        Depth is the distance along the optical axis. With strict=True a
        point at or behind the camera plane raises; otherwise callers get
        the raw values and must mask on depth themselves.
        """
        points = np.atleast_2d(points)
        cam = self.to_camera(points)
        z = cam[:, 2]
        if strict and np.any(z <= 0.0):
            raise ValueError("point behind camera")
        with np.errstate(divide="ignore", invalid="ignore"):
            uvw = cam @ self.intrinsics.T
            pix = uvw[:, :2] / uvw[:, 2:3]
        return pix, z

    def unproject(self, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Invert project: pixel coords + optical-axis depth -> world points."""
        pixels = np.atleast_2d(pixels)
        depth = np.atleast_1d(depth)
        ones = np.ones((len(pixels), 1))
        homo = np.concatenate([pixels, ones], axis=1)
        cam = (homo @ np.linalg.inv(self.intrinsics).T) * depth[:, None]
        return (cam - self.translation) @ self.rotation

    def pixel_rays(self, pixels: np.ndarray):
        """Unit world-space ray directions through given (N, 2) pixels."""
        pixels = np.atleast_2d(pixels)
        homo = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
        d_cam = homo @ np.linalg.inv(self.intrinsics).T
        d_world = d_cam @ self.rotation
        return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)

    def pixel_grid(self) -> np.ndarray:
        """(H*W, 2) pixel-center coordinates in raster order."""
        xs = np.arange(self.width, dtype=np.float64)
        ys = np.arange(self.height, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


def look_at_camera(eye, target, width, height, focal,
                   up=(0.0, 1.0, 0.0)) -> CameraModel:
    """Camera at `eye` whose +z axis points toward `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(up, fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    K = np.array([[focal, 0.0, (width - 1) / 2.0],
                  [0.0, focal, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return CameraModel(K, R, t, width, height)


# --------------------------------------------------------------------- scene
@dataclass
class Mover:
    """A rigid primitive translating along a C1 path c(t)."""
    kind: str                 # "sphere" | "box"
    size: np.ndarray          # sphere: (radius,); box: half extents (3,)
    color: np.ndarray         # base albedo
    path_kind: str = "poly"   # "poly" | "circle"
    # poly: 3x3 coefficient rows c0 + c1 t + c2 t^2
    # circle: [cx cy cz], [radius, turns, phase]
    path_params: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def center(self, t: float) -> np.ndarray:
        p = np.asarray(self.path_params, dtype=np.float64)
        if self.path_kind == "poly":
            return p[0] + p[1] * t + p[2] * t * t
        if self.path_kind == "circle":
            base, (radius, turns, phase) = p[0], p[1]
            ang = 2.0 * np.pi * turns * t + phase
            return base + radius * np.array([np.cos(ang), np.sin(ang), 0.0])
        raise ValueError(f"unknown path kind {self.path_kind!r}")


@dataclass
class SceneSpec:
    """Background plane at z=plane_z plus a list of movers."""
    movers: list
    plane_z: float = 2.0
    texture_phase: float = 0.0
    near: float = 3.0
    far: float = 11.0


def _plane_albedo(points: np.ndarray, phase: float) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    r = 0.50 + 0.33 * np.sin(1.3 * x + 0.7 * y + phase)
    g = 0.50 + 0.33 * np.sin(0.9 * x - 1.1 * y + 2.0 + 0.7 * phase)
    b = 0.55 + 0.30 * np.cos(0.8 * x + 1.4 * y + 1.3 * phase)
    return np.stack([r, g, b], axis=1)


def _mover_albedo(mover: Mover, local: np.ndarray) -> np.ndarray:
    mod = 0.12 * np.sin(3.0 * local[:, 0] + 2.0 * local[:, 1])
    return np.clip(mover.color[None, :] + mod[:, None], 0.05, 0.95)


def _shade(albedo: np.ndarray, normals: np.ndarray) -> np.ndarray:
    lam = np.maximum(0.0, -(normals @ LIGHT_DIR))
    return np.clip(albedo * (0.55 + 0.45 * lam)[:, None], 0.0, 1.0)


@dataclass
class TraceResult:
    rgb: np.ndarray      # (H, W, 3) in [0, 1]
    depth: np.ndarray    # (H, W) distance along the (unit) ray
    mask: np.ndarray     # (H, W) bool, True on movers
    points: np.ndarray   # (H, W, 3) world hit points (miss: far point)
    obj_id: np.ndarray   # (H, W) int, -1 miss, 0 background, 1.. movers


def trace_frame(scene: SceneSpec, camera: CameraModel, t: float) -> TraceResult:
    """Exact nearest-hit render of the scene at time t."""
    H, W = camera.height, camera.width
    pixels = camera.pixel_grid()
    dirs = camera.pixel_rays(pixels)
    origin = camera.center
    n = len(dirs)

    best_u = np.full(n, np.inf)
    best_obj = np.full(n, -1, dtype=np.int64)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore"):
        u_plane = (scene.plane_z - origin[2]) / dz
    hit = (dz > 1e-12) & (u_plane > 0)
    best_u[hit] = u_plane[hit]
    best_obj[hit] = 0

    for k, mover in enumerate(scene.movers):
        c = mover.center(t)
        if mover.kind == "sphere":
            oc = origin - c
            bq = dirs @ oc
            disc = bq * bq - (oc @ oc - float(mover.size[0]) ** 2)
            ok = disc >= 0.0
            u = -bq - np.sqrt(np.maximum(disc, 0.0))
            ok &= u > 1e-9
        elif mover.kind == "box":
            he = np.asarray(mover.size, dtype=np.float64)
            lo, hi = c - he, c + he
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - origin) / dirs
                t2 = (hi - origin) / dirs
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            ok = (tmax >= tmin) & (tmax > 0)
            u = np.where(tmin > 1e-9, tmin, tmax)
        else:
            raise ValueError(f"unknown mover kind {mover.kind!r}")
        closer = ok & (u < best_u)
        best_u[closer] = u[closer]
        best_obj[closer] = k + 1

    points = origin[None, :] + best_u[:, None] * dirs
    rgb = np.tile(MISS_COLOR, (n, 1))
    depth = np.where(np.isfinite(best_u), best_u, scene.far)
    points = np.where(np.isfinite(best_u)[:, None], points,
                      origin[None, :] + scene.far * dirs)

    bg = best_obj == 0
    if bg.any():
        normals = np.tile(np.array([0.0, 0.0, -1.0]), (bg.sum(), 1))
        rgb[bg] = _shade(_plane_albedo(points[bg], scene.texture_phase),
                         normals)
    for k, mover in enumerate(scene.movers):
        sel = best_obj == k + 1
        if not sel.any():
            continue
        local = points[sel] - mover.center(t)
        if mover.kind == "sphere":
            normals = local / np.linalg.norm(local, axis=1, keepdims=True)
        else:
            he = np.asarray(mover.size, dtype=np.float64)
            rel = local / he
            axis = np.argmax(np.abs(rel), axis=1)
            normals = np.zeros_like(local)
            normals[np.arange(len(local)), axis] = np.sign(
                rel[np.arange(len(local)), axis])
        rgb[sel] = _shade(_mover_albedo(mover, local), normals)

    return TraceResult(rgb.reshape(H, W, 3), depth.reshape(H, W),
                       (best_obj > 0).reshape(H, W),
                       points.reshape(H, W, 3), best_obj.reshape(H, W))


def advect_points(scene: SceneSpec, points: np.ndarray, obj_id: np.ndarray,
                  t_i: float, t_j: float) -> np.ndarray:
    """Move surface points rigidly with their mover from t_i to t_j."""
    out = points.copy()
    for k, mover in enumerate(scene.movers):
        sel = obj_id == k + 1
        if sel.any():
            out[sel] += mover.center(t_j) - mover.center(t_i)
    return out


def analytic_flow(scene: SceneSpec, cam_i: CameraModel, cam_j: CameraModel,
                  t_i: float, t_j: float,
                  trace_i: TraceResult | None = None,
                  trace_j: TraceResult | None = None) -> np.ndarray:
    """Ground-truth pixel flow from frame i to frame j (NaN where invalid).

    Surface points of frame i are advected with their mover (background
    stays put), reprojected through cam_j, and depth-tested against the
    frame-j render; occluded or behind-camera pixels are marked NaN.
    """
    trace_i = trace_i or trace_frame(scene, cam_i, t_i)
    trace_j = trace_j or trace_frame(scene, cam_j, t_j)
    H, W = cam_i.height, cam_i.width
    pts = trace_i.points.reshape(-1, 3)
    obj = trace_i.obj_id.reshape(-1)
    moved = advect_points(scene, pts, obj, t_i, t_j)
    pix_j, z_j = cam_j.project(moved, strict=False)
    flow = pix_j - cam_i.pixel_grid()

    invalid = z_j <= 1e-6
    # occlusion: compare ray distance from cam_j with the traced depth there
    dist_j = np.linalg.norm(moved - cam_j.center, axis=1)
    px = np.clip(np.round(pix_j[:, 0]), 0, W - 1).astype(np.int64)
    py = np.clip(np.round(pix_j[:, 1]), 0, H - 1).astype(np.int64)
    seen = trace_j.depth[py, px]
    inside = ((pix_j[:, 0] >= -0.5) & (pix_j[:, 0] <= W - 0.5)
              & (pix_j[:, 1] >= -0.5) & (pix_j[:, 1] <= H - 0.5))
    invalid |= inside & (seen < dist_j - 0.05)
    invalid |= obj < 0

    flow[invalid] = np.nan
    return flow.reshape(H, W, 2)


# ------------------------------------------------------------------ sequence
@dataclass
class FrameRecord:
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    flow_fw: np.ndarray | None = None
    flow_bw: np.ndarray | None = None


@dataclass
class MonocularSequence:
    frames: list
    cameras: list
    timestamps: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if len(ts) < 2 or np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be >= 2 and strictly increasing")
        if abs(ts[0]) > 1e-12 or abs(ts[-1] - 1.0) > 1e-12:
            raise ValueError("timestamps must span [0, 1]")
        self.timestamps = ts

    @property
    def K(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height


def camera_rig(K: int, width: int, height: int, radius: float = 5.0,
               arc_deg: float = 18.0, elev_deg: float = 8.0,
               focal: float | None = None) -> list:
    """K cameras on a small azimuth arc, all looking at the origin."""
    focal = focal if focal is not None else 0.9 * width
    cams = []
    for i in range(K):
        frac = i / (K - 1) - 0.5
        az = np.deg2rad(arc_deg) * frac
        el = np.deg2rad(elev_deg)
        eye = radius * np.array([np.sin(az) * np.cos(el),
                                 np.sin(el),
                                 -np.cos(az) * np.cos(el)])
        cams.append(look_at_camera(eye, (0.0, 0.0, 0.0), width, height, focal))
    return cams


def synthesize_sequence(scene: SceneSpec, cameras: list) -> MonocularSequence:
    """Render frames, depths, masks, and bidirectional flows for a rig."""
    K = len(cameras)
    ts = np.linspace(0.0, 1.0, K)
    traces = [trace_frame(scene, cameras[i], ts[i]) for i in range(K)]
    frames = []
    for i in range(K):
        tr = traces[i]
        fw = bw = None
        if i + 1 < K:
            fw = analytic_flow(scene, cameras[i], cameras[i + 1],
                               ts[i], ts[i + 1], traces[i], traces[i + 1])
        if i - 1 >= 0:
            bw = analytic_flow(scene, cameras[i], cameras[i - 1],
                               ts[i], ts[i - 1], traces[i], traces[i - 1])
        frames.append(FrameRecord(tr.rgb, tr.depth, tr.mask, fw, bw))
    return MonocularSequence(frames, cameras, ts, scene.near, scene.far)


# ------------------------------------------------------------------- presets
def preset_scene(name: str) -> SceneSpec:
    """Named toy scene recipes used throughout training and evaluation."""
    if name == "orbit":
        m = Mover("sphere", np.array([0.65]), np.array([0.85, 0.25, 0.2]),
                  "circle", np.array([[0.0, 0.0, 0.2],
                                      [0.75, 0.5, 0.6],
                                      [0.0, 0.0, 0.0]]))
        return SceneSpec([m], texture_phase=0.0)
    if name == "linear":
        m = Mover("sphere", np.array([0.6]), np.array([0.2, 0.45, 0.85]),
                  "poly", np.array([[-0.8, -0.1, 0.1],
                                    [1.6, 0.3, 0.0],
                                    [0.0, 0.0, 0.0]]))
        return SceneSpec([m], texture_phase=1.9)
    if name == "two-balls":
        m1 = Mover("sphere", np.array([0.5]), np.array([0.85, 0.7, 0.2]),
                   "poly", np.array([[-0.9, 0.5, 0.0],
                                     [1.5, -0.7, 0.2],
                                     [0.0, 0.0, 0.0]]))
        m2 = Mover("sphere", np.array([0.45]), np.array([0.3, 0.8, 0.5]),
                   "poly", np.array([[0.8, -0.6, 0.4],
                                     [-1.0, 0.5, 0.0],
                                     [0.0, 0.6, 0.0]]))
        return SceneSpec([m1, m2], texture_phase=3.1)
    if name == "box-slide":
        m = Mover("box", np.array([0.5, 0.4, 0.4]), np.array([0.75, 0.4, 0.8]),
                  "poly", np.array([[-0.7, 0.2, 0.1],
                                    [1.4, -0.3, 0.0],
                                    [0.0, 0.0, 0.0]]))
        return SceneSpec([m], texture_phase=5.0)
    raise ValueError(f"unknown scene preset {name!r}")


# --------------------------------------------------------------- dataset I/O
def _fmt_floats(arr) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(arr).ravel())


def write_dataset(seq: MonocularSequence, out_dir: str) -> None:
    """Write the on-disk layout: manifest + rgb/depth/flow/mask channels.

    rgb and mask are 8-bit PNG; depth and flows are raw row-major
    little-endian float32 (flows with x/y interleaved per pixel).
    """
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("rgb", "depth", "flow_fw", "flow_bw", "mask"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    lines = [f"K={seq.K}", f"width={seq.width}", f"height={seq.height}",
             f"near={seq.near!r}", f"far={seq.far!r}",
             f"intrinsics={_fmt_floats(seq.cameras[0].intrinsics)}"]
    for i, cam in enumerate(seq.cameras):
        pose = np.eye(4)
        pose[:3, :3] = cam.rotation
        pose[:3, 3] = cam.translation
        lines.append(f"timestamp_{i:04d}={float(seq.timestamps[i])!r}")
        lines.append(f"pose_{i:04d}={_fmt_floats(pose)}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")

    for i, fr in enumerate(seq.frames):
        rgb8 = np.clip(np.round(fr.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8).save(os.path.join(out_dir, "rgb", f"{i:04d}.png"))
        Image.fromarray((fr.mask * 255).astype(np.uint8)).save(
            os.path.join(out_dir, "mask", f"{i:04d}.png"))
        fr.depth.astype("<f4").tofile(
            os.path.join(out_dir, "depth", f"{i:04d}.f32"))
        if fr.flow_fw is not None:
            fr.flow_fw.astype("<f4").tofile(
                os.path.join(out_dir, "flow_fw", f"{i:04d}.f32"))
        if fr.flow_bw is not None:
            fr.flow_bw.astype("<f4").tofile(
                os.path.join(out_dir, "flow_bw", f"{i:04d}.f32"))


class DatasetError(IOError):
    pass


def _read_f32(path: str, shape: tuple) -> np.ndarray:
    if not os.path.exists(path):
        raise DatasetError(f"missing channel file: {path}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise DatasetError(f"corrupt channel file: {path}")
    return data.reshape(shape).astype(np.float32)


def read_dataset(in_dir: str) -> MonocularSequence:
    """Load a dataset directory written by write_dataset."""
    manifest = os.path.join(in_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise DatasetError(f"missing manifest: {manifest}")
    kv = {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, val = line.split("=", 1)
                kv[key] = val
    K = int(kv["K"])
    width, height = int(kv["width"]), int(kv["height"])
    near, far = float(kv["near"]), float(kv["far"])
    intr = np.array([float(v) for v in kv["intrinsics"].split()]).reshape(3, 3)

    cameras, timestamps = [], []
    for i in range(K):
        tkey, pkey = f"timestamp_{i:04d}", f"pose_{i:04d}"
        if tkey not in kv or pkey not in kv:
            raise DatasetError(f"manifest frame count mismatch at frame {i}")
        timestamps.append(float(kv[tkey]))
        pose = np.array([float(v) for v in kv[pkey].split()]).reshape(4, 4)
        cameras.append(CameraModel(intr, pose[:3, :3], pose[:3, 3],
                                   width, height))

    frames = []
    for i in range(K):
        rgb_path = os.path.join(in_dir, "rgb", f"{i:04d}.png")
        mask_path = os.path.join(in_dir, "mask", f"{i:04d}.png")
        for p in (rgb_path, mask_path):
            if not os.path.exists(p):
                raise DatasetError(f"missing channel file: {p}")
        rgb = np.asarray(Image.open(rgb_path), dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(mask_path)) > 127
        depth = _read_f32(os.path.join(in_dir, "depth", f"{i:04d}.f32"),
                          (height, width)).astype(np.float64)
        fw = bw = None
        if i + 1 < K:
            fw = _read_f32(os.path.join(in_dir, "flow_fw", f"{i:04d}.f32"),
                           (height, width, 2))
        if i - 1 >= 0:
            bw = _read_f32(os.path.join(in_dir, "flow_bw", f"{i:04d}.f32"),
                           (height, width, 2))
        frames.append(FrameRecord(rgb, depth, mask, fw, bw))
    return MonocularSequence(frames, cameras, np.array(timestamps), near, far)
