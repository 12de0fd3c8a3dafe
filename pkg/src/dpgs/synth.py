"""Procedural tabletop scenes with ground truth for every supervision signal.

A static room (back wall and table top), a rigid box sliding and turning on
the table, a five-sphere "hand" whose finger spheres bob sinusoidally, and a
slowly drifting camera. Frames are rendered by splatting a dense ground-truth
Gaussian set; masks, depth and optical flow come from exact ray casting
against the analytic surfaces, so flow is the true displacement of the surface
point seen at each pixel.

Dataset layout::

    frames/%05d.png  masks_hand/%05d.png  masks_obj/%05d.png  flow/%05d.dpfl
    depth/%05d.pfm   cameras.json  init.ply  labels.txt  script.json
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .core import Category, FrameRecord, GaussianScene, PinholeCamera, logit, rgb_to_sh_dc
from .errors import FormatError, InvalidInput
from .io import (read_flow, read_json, read_mask, read_pfm, read_ply, read_png, write_flow,
                 write_json, write_mask, write_pfm, write_ply, write_png, atomic_write)
from .losses import same_camera
from .pipeline import render_all
from .projection import project_gaussians
from .raster import depth_sort, max_weights

logger = logging.getLogger(__name__)

GT_OPACITY = 0.98
STATIC_PART = 0
OBJECT_PART = 1
HAND_PARTS = (2, 3, 4, 5, 6)
_RAY_EPS = 1e-6


def _lerp_keys(keys, t: float) -> np.ndarray:
    """Piecewise-linear interpolation of ``[(t, v0, v1, ...), ...]`` keyframes."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or len(keys) == 0:
        raise InvalidInput("keyframes must be a non-empty list of (t, values...)")
    return np.array([np.interp(t, keys[:, 0], keys[:, j]) for j in range(1, keys.shape[1])])


@dataclass
class SceneScript:
    """Everything needed to regenerate a synthetic sequence bit for bit."""

    width: int = 128
    height: int = 128
    n_frames: int = 60
    focal: float = 110.0                  # pixels at 128 px width
    # camera: (t, x, y, z) keyframes for the eye and the look-at target
    camera_eye: list = field(default_factory=lambda: [[0.0, -0.08, -0.55, 0.75], [1.0, 0.08, -0.50, 0.78]])
    camera_target: list = field(default_factory=lambda: [[0.0, 0.0, 0.40, 0.05], [1.0, 0.03, 0.40, 0.07]])
    # static surfaces: table top z = 0 and back wall y = wall_y
    table_x: tuple = (-1.6, 1.6)
    table_y: tuple = (-0.6, 1.02)
    wall_y: float = 1.0
    wall_z: tuple = (-0.02, 1.0)
    # rigid box: half sizes and (t, x, y, z, yaw) keyframes
    object_half: tuple = (0.13, 0.09, 0.08)
    object_keys: list = field(default_factory=lambda: [[0.0, -0.30, 0.35, 0.08, 0.0],
                                                       [1.0, 0.02, 0.35, 0.08, 0.8]])
    # hand: palm sphere plus four finger spheres bobbing along z
    hand_keys: list = field(default_factory=lambda: [[0.0, 0.40, 0.15, 0.32],
                                                     [0.5, 0.26, 0.26, 0.24],
                                                     [1.0, 0.36, 0.18, 0.30]])
    palm_radius: float = 0.09
    finger_radius: float = 0.045
    finger_offsets: list = field(default_factory=lambda: [[-0.12, -0.08, -0.03], [-0.13, -0.027, -0.03],
                                                          [-0.13, 0.027, -0.03], [-0.12, 0.08, -0.03]])
    finger_amp: float = 0.03
    finger_freq: float = 1.5
    # ground-truth Gaussian spacing (world units)
    background_spacing: float = 0.015
    object_spacing: float = 0.009
    hand_spacing: float = 0.0075
    # structure-from-motion emulation
    drop_fraction: float = 0.7
    init_jitter: float = 0.01             # fraction of scene extent
    visibility_threshold: float = 0.05

    def __post_init__(self):
        for name in ("table_x", "table_y", "wall_z", "object_half"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.width <= 0 or self.height <= 0 or self.n_frames < 1:
            raise InvalidInput("resolution and frame count must be positive")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise InvalidInput("drop_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInput(f"unknown scene script keys {sorted(unknown)}")
        return cls(**d)

    def times(self) -> np.ndarray:
        if self.n_frames == 1:
            return np.zeros(1)
        return np.arange(self.n_frames) / (self.n_frames - 1)

    # -- motion ---------------------------------------------------------------
    def camera(self, t: float) -> PinholeCamera:
        eye = _lerp_keys(self.camera_eye, t)
        target = _lerp_keys(self.camera_target, t)
        f = target - eye
        f /= np.linalg.norm(f)
        r = np.cross(f, [0.0, 0.0, 1.0])
        r /= np.linalg.norm(r)
        d = np.cross(f, r)
        R = np.stack([r, d, f])
        scale = self.width / 128.0
        return PinholeCamera(self.focal * scale, self.focal * scale, (self.width - 1) / 2.0,
                             (self.height - 1) / 2.0, self.width, self.height, R, -R @ eye)

    def object_pose(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        v = _lerp_keys(self.object_keys, t)
        return Rotation.from_euler("z", v[3]).as_matrix(), v[:3]

    def sphere_centers(self, t: float) -> np.ndarray:
        palm = _lerp_keys(self.hand_keys, t)
        out = [palm]
        for i, off in enumerate(self.finger_offsets):
            bob = self.finger_amp * np.sin(2 * np.pi * self.finger_freq * t + 0.8 * i)
            out.append(palm + np.asarray(off) + np.array([0.0, 0.0, bob]))
        return np.array(out)

    def sphere_radii(self) -> np.ndarray:
        return np.array([self.palm_radius] + [self.finger_radius] * len(self.finger_offsets))

    def part_pose(self, part: int, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Rigid pose ``x_world = R @ x_local + c`` of one scene part at time ``t``."""
        if part == STATIC_PART:
            return np.eye(3), np.zeros(3)
        if part == OBJECT_PART:
            return self.object_pose(t)
        return np.eye(3), self.sphere_centers(t)[part - HAND_PARTS[0]]


# -- textures (colours baked per Gaussian and per surface point) ---------------

_LIGHT = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])


def _shade(rgb, normal):
    lam = np.clip(np.asarray(normal) @ _LIGHT, 0.0, 1.0)
    return np.clip(rgb * (0.65 + 0.35 * lam)[..., None], 0.0, 1.0)


def _wall_color(p):
    x, z = p[..., 0], p[..., 2]
    base = np.array([0.72, 0.70, 0.64])
    c = base + 0.10 * np.sin(2 * np.pi * x / 0.6)[..., None] * np.array([1.0, 0.8, 0.5])
    c = c + 0.08 * (z[..., None] - 0.5) * np.array([0.4, 0.5, 0.9])
    poster = (np.abs(x + 0.35) < 0.22) & (np.abs(z - 0.55) < 0.18)
    c = np.where(poster[..., None], np.array([0.20, 0.35, 0.70]) + 0.1 * np.sin(6 * z)[..., None], c)
    return np.clip(c, 0, 1)


def _table_color(p):
    x, y = p[..., 0], p[..., 1]
    grain = np.sin(2 * np.pi * (2.5 * y + 0.3 * np.sin(2 * np.pi * 1.5 * x)))
    c = np.array([0.55, 0.38, 0.22]) + 0.07 * grain[..., None] * np.array([1.0, 0.8, 0.6])
    mat = (np.abs(x - 0.55) < 0.2) & (np.abs(y - 0.55) < 0.15)
    c = np.where(mat[..., None], np.array([0.25, 0.55, 0.30]), c)
    return np.clip(c, 0, 1)


_FACE_COLORS = np.array([[0.85, 0.18, 0.12], [0.85, 0.18, 0.12], [0.95, 0.80, 0.15],
                         [0.95, 0.80, 0.15], [0.90, 0.45, 0.10], [0.90, 0.45, 0.10]])


def _box_color(local, half):
    """Face colour from the dominant normalised coordinate, plus a soft stripe."""
    q = np.abs(local) / np.asarray(half)
    axis = np.argmax(q, axis=-1)
    sign = (np.take_along_axis(local, axis[..., None], -1)[..., 0] > 0).astype(int)
    face = 2 * axis + sign
    c = _FACE_COLORS[face] * (0.9 + 0.1 * np.cos(2 * np.pi * local[..., 0] / 0.1))[..., None]
    normal = np.zeros(local.shape)
    np.put_along_axis(normal, axis[..., None], (2 * sign - 1)[..., None].astype(float), -1)
    return c, normal


def _skin_color(local, radius):
    n = local / radius
    return _shade(np.array([0.86, 0.62, 0.50]) * (0.92 + 0.08 * n[..., 2:3]), n)


# -- ground-truth Gaussian set ------------------------------------------------

@dataclass
class GroundTruth:
    """Dense Gaussian set in part-local coordinates."""

    local_mu: np.ndarray
    local_rot: np.ndarray        # (w, x, y, z)
    log_scale: np.ndarray
    color: np.ndarray
    part: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.part)


def _frame_quat(u, v, n):
    mats = np.stack([u, v, n], axis=-1)
    xyzw = Rotation.from_matrix(mats).as_quat()
    return np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)


def _rect_samples(origin, U, V, spacing):
    nu = max(int(np.ceil(np.linalg.norm(U) / spacing)), 1)
    nv = max(int(np.ceil(np.linalg.norm(V) / spacing)), 1)
    a, b = np.meshgrid((np.arange(nu) + 0.5) / nu, (np.arange(nv) + 0.5) / nv, indexing="ij")
    pts = origin + a.reshape(-1, 1) * U + b.reshape(-1, 1) * V
    u = np.broadcast_to(U / np.linalg.norm(U), pts.shape)
    v = np.broadcast_to(V / np.linalg.norm(V), pts.shape)
    return pts, u, v, np.cross(u, v)


def _sphere_samples(radius, spacing):
    n = max(int(round(4 * np.pi * radius ** 2 / spacing ** 2)), 8)
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k
    nrm = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
    helper = np.where(np.abs(nrm[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    u = np.cross(helper, nrm)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return radius * nrm, u, np.cross(nrm, u), nrm


def _flat_scales(n, spacing):
    return np.log(np.tile([0.6 * spacing, 0.6 * spacing, 0.08 * spacing], (n, 1)))


def build_ground_truth(script: SceneScript) -> GroundTruth:
    chunks = []

    def add(mu, u, v, n, spacing, color, part, label):
        if np.linalg.det(np.stack([u[0], v[0], n[0]], -1)) < 0:
            u = -u
        chunks.append((mu, _frame_quat(u, v, n), _flat_scales(len(mu), spacing), color,
                       np.full(len(mu), part), np.full(len(mu), int(label))))

    s = script.background_spacing
    (x0, x1), (y0, y1) = script.table_x, script.table_y
    mu, u, v, n = _rect_samples(np.array([x0, y0, 0.0]), np.array([x1 - x0, 0, 0]),
                                np.array([0, y1 - y0, 0.0]), s)
    add(mu, u, v, n, s, _shade(_table_color(mu), n), STATIC_PART, Category.BG)
    z0, z1 = script.wall_z
    mu, u, v, n = _rect_samples(np.array([x0, script.wall_y, z0]), np.array([x1 - x0, 0, 0]),
                                np.array([0, 0, z1 - z0]), s)
    add(mu, u, v, -n, s, _shade(_wall_color(mu), -n), STATIC_PART, Category.BG)

    s = script.object_spacing
    h = np.asarray(script.object_half, dtype=np.float64)
    for axis in range(3):
        a1, a2 = [k for k in range(3) if k != axis]
        for sign in (-1.0, 1.0):
            origin = np.zeros(3)
            origin[axis] = sign * h[axis]
            origin[a1], origin[a2] = -h[a1], -h[a2]
            U = np.zeros(3)
            U[a1] = 2 * h[a1]
            V = np.zeros(3)
            V[a2] = 2 * h[a2]
            mu, u, v, _ = _rect_samples(origin, U, V, s)
            nrm = np.zeros_like(mu)
            nrm[:, axis] = sign
            color, _ = _box_color(mu, h)
            add(mu, u, v, nrm, s, _shade(color, nrm), OBJECT_PART, Category.OBJ)

    s = script.hand_spacing
    for part, r in zip(HAND_PARTS, script.sphere_radii()):
        mu, u, v, n = _sphere_samples(r, s)
        add(mu, u, v, n, s, _skin_color(mu, r), part, Category.HAND)

    cols = list(zip(*chunks))
    return GroundTruth(*(np.concatenate(c) for c in cols))


def gt_scene_at(script: SceneScript, gt: GroundTruth, t: float) -> GaussianScene:
    """The ground-truth Gaussians posed at time ``t`` (degree-0 colour, one-hot logits)."""
    mu = np.empty_like(gt.local_mu)
    rot = gt.local_rot.copy()
    for part in np.unique(gt.part):
        sel = gt.part == part
        R, c = script.part_pose(int(part), t)
        mu[sel] = gt.local_mu[sel] @ R.T + c
        if part == OBJECT_PART:
            q = Rotation.from_matrix(R)
            local = Rotation.from_quat(np.concatenate([gt.local_rot[sel, 1:], gt.local_rot[sel, :1]], 1))
            xyzw = (q * local).as_quat()
            rot[sel] = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], 1)
    n = len(gt)
    return GaussianScene(
        mu=mu, rot=rot, log_scale=gt.log_scale.copy(),
        opacity_logit=np.full(n, float(logit(GT_OPACITY))),
        sh=rgb_to_sh_dc(gt.color)[:, None, :],
        brightness=np.full(n, 0.25),
        cat_logits=10.0 * np.eye(3)[gt.label],
        sh_degree=0,
    )


def render_gt(script: SceneScript, gt: GroundTruth, t: float) -> np.ndarray:
    out = render_all(gt_scene_at(script, gt, t), None, script.camera(t), t)
    return out["composite"].image


# -- analytic ray casting -----------------------------------------------------

def _pixel_rays(cam: PinholeCamera):
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], -1)
    d = d_cam.reshape(-1, 3) @ cam.R
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(cam.center, d.shape), d


def _hit_rect(o, d, origin, U, V):
    n = np.cross(U, V)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((origin - o) @ n) / denom
    p = o + t[:, None] * d
    a = (p - origin) @ U / (U @ U)
    b = (p - origin) @ V / (V @ V)
    ok = np.isfinite(t) & (t > _RAY_EPS) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
    return np.where(ok, t, np.inf)


def _hit_box(o, d, R, c, half):
    ol = (o - c) @ R
    dl = d @ R
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - ol) / dl
        t2 = (half - ol) / dl
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    ok = (tmax >= tmin) & (tmin > _RAY_EPS)
    return np.where(ok, tmin, np.inf)


def _hit_sphere(o, d, c, r):
    oc = o - c
    b = np.sum(d * oc, axis=1)
    disc = b * b - (np.sum(oc * oc, axis=1) - r * r)
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    return np.where((disc >= 0) & (t > _RAY_EPS), t, np.inf)


def ray_cast(script: SceneScript, t: float, t_next: float | None):
    """Per-pixel (part id, depth, flow to ``t_next``) by intersecting the analytic surfaces."""
    cam = script.camera(t)
    o, d = _pixel_rays(cam)
    (x0, x1), (y0, y1) = script.table_x, script.table_y
    z0, z1 = script.wall_z
    hits = [
        (STATIC_PART, _hit_rect(o, d, np.array([x0, y0, 0.0]), np.array([x1 - x0, 0, 0]),
                                np.array([0, y1 - y0, 0.0]))),
        (STATIC_PART, _hit_rect(o, d, np.array([x0, script.wall_y, z0]), np.array([x1 - x0, 0, 0]),
                                np.array([0, 0, z1 - z0]))),
    ]
    R_obj, c_obj = script.object_pose(t)
    hits.append((OBJECT_PART, _hit_box(o, d, R_obj, c_obj, np.asarray(script.object_half))))
    for part, c, r in zip(HAND_PARTS, script.sphere_centers(t), script.sphere_radii()):
        hits.append((part, _hit_sphere(o, d, c, r)))
    dist = np.stack([h for _, h in hits], axis=1)
    parts = np.array([p for p, _ in hits])
    best = np.argmin(dist, axis=1)
    tbest = dist[np.arange(len(best)), best]
    if not np.all(np.isfinite(tbest)):
        raise InvalidInput("scene does not cover every pixel; enlarge the wall or table")
    part = parts[best]
    world = o + tbest[:, None] * d
    depth = (world @ cam.R.T + cam.t)[:, 2]
    flow = np.zeros((len(part), 2))
    if t_next is not None:
        cam1 = script.camera(t_next)
        moved = world.copy()
        # pixels whose point and camera are both unchanged keep an exact zero flow
        changed = np.full(len(part), not same_camera(cam, cam1))
        for p in np.unique(part):
            sel = part == p
            R0, c0 = script.part_pose(int(p), t)
            R1, c1 = script.part_pose(int(p), t_next)
            if p == STATIC_PART or (np.array_equal(R0, R1) and np.array_equal(c0, c1)):
                continue
            local = (world[sel] - c0) @ R0
            moved[sel] = local @ R1.T + c1
            changed |= sel
        v, u = np.divmod(np.arange(len(part)), cam.width)
        flow[changed] = cam1.project(moved[changed]) - np.stack([u, v], 1)[changed]
    shape = (cam.height, cam.width)
    return part.reshape(shape), depth.reshape(shape), flow.reshape(shape + (2,))


# -- dataset generation -----------------------------------------------------------

def _frame_name(k: int, ext: str) -> str:
    return f"{k:05d}.{ext}"


def sample_init_points(script: SceneScript, gt: GroundTruth, seed: int):
    """SfM stand-in: a random subset of observed ground-truth centres at t=0, jittered.

    Positions are taken at t=0, so a moving point is only a candidate if it is
    visible in the first frame; a static point qualifies if any frame sees it.
    """
    rng = np.random.default_rng(seed)
    seen = np.zeros(len(gt))
    seen_first = None
    for t in script.times():
        scene = gt_scene_at(script, gt, t)
        cam = script.camera(t)
        proj = project_gaussians(scene.mu, scene.rot, scene.log_scale, cam)
        vis = np.flatnonzero(proj.visible)
        order = vis[depth_sort(proj.depth[vis])]
        w = max_weights(proj.mean2d, proj.conic, proj.radius, order,
                        np.full(len(gt), GT_OPACITY), cam.width, cam.height)
        seen = np.maximum(seen, w)
        if seen_first is None:
            seen_first = w
    static = gt.part == STATIC_PART
    observed = np.where(static, seen, seen_first)
    candidates = np.flatnonzero(observed > script.visibility_threshold)
    keep = max(int(round((1.0 - script.drop_fraction) * len(candidates))), 1)
    chosen = np.sort(rng.choice(candidates, size=keep, replace=False))
    scene0 = gt_scene_at(script, gt, 0.0)
    mu = scene0.mu[chosen]
    extent = float(np.linalg.norm(scene0.mu.max(0) - scene0.mu.min(0)))
    mu = mu + rng.normal(0.0, script.init_jitter * extent, mu.shape)
    return mu, gt.color[chosen], gt.label[chosen]


def generate(script: SceneScript, seed: int, out_dir) -> dict:
    """Write a complete dataset to ``out_dir`` and return a small summary."""
    out = Path(out_dir)
    gt = build_ground_truth(script)
    times = script.times()
    cameras = []
    for k, t in enumerate(times):
        t_next = times[k + 1] if k + 1 < len(times) else None
        part, depth, flow = ray_cast(script, t, t_next)
        write_png(out / "frames" / _frame_name(k, "png"), render_gt(script, gt, t))
        write_mask(out / "masks_hand" / _frame_name(k, "png"), np.isin(part, HAND_PARTS))
        write_mask(out / "masks_obj" / _frame_name(k, "png"), part == OBJECT_PART)
        write_flow(out / "flow" / _frame_name(k, "dpfl"), flow)
        write_pfm(out / "depth" / _frame_name(k, "pfm"), depth)
        cam = script.camera(t).to_dict()
        cam["t"] = float(t)
        cameras.append(cam)
    write_json(out / "cameras.json", cameras)
    xyz, rgb, labels = sample_init_points(script, gt, seed)
    write_ply(out / "init.ply", xyz, rgb)
    with atomic_write(out / "labels.txt", "w") as fh:
        fh.write("\n".join(str(int(v)) for v in labels) + "\n")
    write_json(out / "script.json", {"seed": int(seed), "script": script.to_dict()})
    summary = {"frames": len(times), "gt_gaussians": len(gt), "init_points": len(xyz),
               "label_counts": np.bincount(labels, minlength=3).tolist()}
    logger.info("generated %s: %s", out, summary)
    return summary


# -- loading ----------------------------------------------------------------------

@dataclass
class Dataset:
    frames: list[FrameRecord]
    points: np.ndarray
    colors: np.ndarray
    labels: np.ndarray | None = None      # evaluation only
    script: SceneScript | None = None
    seed: int | None = None
    root: Path | None = None


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"dataset directory {root} does not exist")
    cams = read_json(root / "cameras.json")
    if not isinstance(cams, list) or not cams:
        raise FormatError(f"{root / 'cameras.json'}: expected a non-empty list of cameras")
    n = len(cams)
    frames = []
    for k, cd in enumerate(cams):
        try:
            cam = PinholeCamera.from_dict(cd)
            cam.validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"cameras.json entry {k} is invalid: {exc}") from exc
        files = {
            "rgb": root / "frames" / _frame_name(k, "png"),
            "hand": root / "masks_hand" / _frame_name(k, "png"),
            "obj": root / "masks_obj" / _frame_name(k, "png"),
            "flow": root / "flow" / _frame_name(k, "dpfl"),
        }
        for what, f in files.items():
            if not f.exists():
                raise FormatError(f"frame {k}: missing {what} file {f.relative_to(root)}")
        rgb = read_png(files["rgb"])
        if rgb.ndim != 3:
            raise FormatError(f"frame {k}: {files['rgb'].relative_to(root)} is not an RGB image")
        hand = read_mask(files["hand"])
        obj = read_mask(files["obj"])
        flow = read_flow(files["flow"]).astype(np.float64)
        for what, arr in (("hand mask", hand), ("object mask", obj), ("flow", flow)):
            if arr.shape[:2] != rgb.shape[:2]:
                raise FormatError(f"frame {k}: {what} size {arr.shape[:2]} != image size {rgb.shape[:2]}")
        if (cam.height, cam.width) != rgb.shape[:2]:
            raise FormatError(f"frame {k}: camera size does not match the image")
        overlap = (hand > 0) & (obj > 0)
        if overlap.any():
            logger.warning("frame %d: %d pixels in both masks, assigned to the hand", k, int(overlap.sum()))
            obj = np.where(overlap, 0.0, obj)
        depth_file = root / "depth" / _frame_name(k, "pfm")
        depth = read_pfm(depth_file).astype(np.float64) if depth_file.exists() else None
        t = float(cd.get("t", k / (n - 1) if n > 1 else 0.0))
        rec = FrameRecord(rgb, hand, obj, flow, cam, t, index=k, depth=depth)
        try:
            rec.validate()
        except InvalidInput as exc:
            raise FormatError(f"frame {k}: {exc}") from exc
        frames.append(rec)
    xyz, colors = read_ply(root / "init.ply")
    labels = None
    lab_file = root / "labels.txt"
    if lab_file.exists():
        try:
            labels = np.array([int(x) for x in lab_file.read_text().split()], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"{lab_file}: non-integer label") from exc
        if len(labels) != len(xyz) or np.any((labels < 0) | (labels > 2)):
            raise FormatError(f"{lab_file}: expected {len(xyz)} labels in 0..2")
    script, seed = None, None
    if (root / "script.json").exists():
        meta = read_json(root / "script.json")
        script, seed = SceneScript.from_dict(meta["script"]), meta.get("seed")
    return Dataset(frames, xyz, colors, labels, script, seed, root)
