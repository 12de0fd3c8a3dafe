"""EWA projection of 3D Gaussians to screen-space splats, with its adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AugmentedGaussian, CategoryProbs, PinholeCamera, category_probs, sigmoid
from .sh import eval_sh

NEAR_PLANE = 0.01
COV_FLOOR = 0.3
CUTOFF_SIGMA = 3.0


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices ``(N,3,3)`` from unit quaternions ``(N,4)`` ordered (w, x, y, z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`quat_to_rotmat` with respect to the (already unit) quaternion."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    d = lambda i, j: dR[:, i, j]  # noqa: E731
    dw = 2 * (-z * d(0, 1) + y * d(0, 2) + z * d(1, 0) - x * d(1, 2) - y * d(2, 0) + x * d(2, 1))
    dx = (2 * (y * d(0, 1) + z * d(0, 2) + y * d(1, 0) - w * d(1, 2) + z * d(2, 0) + w * d(2, 1))
          - 4 * x * (d(1, 1) + d(2, 2)))
    dy = (2 * (x * d(0, 1) + w * d(0, 2) + x * d(1, 0) + z * d(1, 2) - w * d(2, 0) + z * d(2, 1))
          - 4 * y * (d(0, 0) + d(2, 2)))
    dz = (2 * (-w * d(0, 1) + x * d(0, 2) + w * d(1, 0) + y * d(1, 2) + x * d(2, 0) + y * d(2, 1))
          - 4 * z * (d(0, 0) + d(1, 1)))
    return np.stack([dw, dx, dy, dz], axis=1)


def normalize_quat(q: np.ndarray):
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    return q / norm, norm


def normalize_quat_backward(qn: np.ndarray, norm: np.ndarray, dqn: np.ndarray) -> np.ndarray:
    return (dqn - qn * np.sum(dqn * qn, axis=1, keepdims=True)) / norm


def covariance_3d(rot: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    qn, _ = normalize_quat(rot)
    M = quat_to_rotmat(qn) * np.exp(log_scale)[:, None, :]
    return M @ np.transpose(M, (0, 2, 1))


@dataclass
class ProjectedSplats:
    """Screen-space splats for every input Gaussian; culled entries have ``visible`` False."""

    mean2d: np.ndarray      # (N, 2) pixels
    cov2d: np.ndarray       # (N, 3) unique entries a, b, c of [[a, b], [b, c]]
    conic: np.ndarray       # (N, 3) inverse covariance entries
    depth: np.ndarray       # (N,) camera-space z
    radius: np.ndarray      # (N,) cutoff half-extent in pixels
    visible: np.ndarray     # (N,) bool
    cache: tuple | None = None


def project_gaussians(mu, rot, log_scale, cam: PinholeCamera,
                      cutoff_sigma: float = CUTOFF_SIGMA) -> ProjectedSplats:
    n = len(mu)
    qn, qnorm = normalize_quat(rot)
    Rq = quat_to_rotmat(qn)
    s = np.exp(log_scale)
    M = Rq * s[:, None, :]
    Sigma = M @ np.transpose(M, (0, 2, 1))

    Rc = cam.R
    Xc = mu @ Rc.T + cam.t
    z = Xc[:, 2]
    in_front = z > NEAR_PLANE
    zs = np.where(in_front, z, 1.0)
    x, y = Xc[:, 0], Xc[:, 1]
    fx, fy = cam.fx, cam.fy

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / zs ** 2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / zs ** 2
    T = J @ Rc
    cov = T @ Sigma @ np.transpose(T, (0, 2, 1))
    a = cov[:, 0, 0] + COV_FLOOR
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + COV_FLOOR
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d = np.stack([fx * x / zs + cam.cx, fy * y / zs + cam.cy], axis=1)

    half_tr = 0.5 * (a + c)
    lam_max = half_tr + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = cutoff_sigma * np.sqrt(lam_max)
    on_screen = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= cam.width - 1)
                 & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= cam.height - 1))
    visible = in_front & on_screen & np.isfinite(det) & (det > 0)

    cache = (qn, qnorm, Rq, s, M, Sigma, Rc, Xc, zs, T, a, b, c, det, fx, fy)
    return ProjectedSplats(mean2d, np.stack([a, b, c], 1), conic, z, radius, visible, cache)


def conic_backward(a, b, c, det, g_conic):
    """Gradient w.r.t. covariance entries (a, b, c) from gradient w.r.t. conic (A, B, C)."""
    gA, gB, gC = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    d2 = det * det
    ga = (-c * c * gA + b * c * gB - b * b * gC) / d2
    gb = (2 * b * c * gA - (det + 2 * b * b) * gB + 2 * a * b * gC) / d2
    gc = (-b * b * gA + a * b * gB - a * a * gC) / d2
    return ga, gb, gc


def project_backward(proj: ProjectedSplats, g_mean2d: np.ndarray, g_conic: np.ndarray):
    """Returns gradients ``(mu, rot, log_scale)`` given adjoints of mean2d and conic."""
    qn, qnorm, Rq, s, M, Sigma, Rc, Xc, zs, T, a, b, c, det, fx, fy = proj.cache
    vis = proj.visible
    g_mean2d = np.where(vis[:, None], g_mean2d, 0.0)
    g_conic = np.where(vis[:, None], g_conic, 0.0)

    ga, gb, gc = conic_backward(a, b, c, det, g_conic)
    G = np.empty((len(a), 2, 2))
    G[:, 0, 0] = ga
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * gb
    G[:, 1, 1] = gc

    dSigma = np.transpose(T, (0, 2, 1)) @ G @ T
    dT = 2.0 * G @ T @ Sigma
    dJ = dT @ Rc.T

    x, y = Xc[:, 0], Xc[:, 1]
    z2 = zs * zs
    z3 = z2 * zs
    dX = np.zeros_like(Xc)
    dX[:, 0] = -fx / z2 * dJ[:, 0, 2] + g_mean2d[:, 0] * fx / zs
    dX[:, 1] = -fy / z2 * dJ[:, 1, 2] + g_mean2d[:, 1] * fy / zs
    dX[:, 2] = (-fx / z2 * dJ[:, 0, 0] + 2 * fx * x / z3 * dJ[:, 0, 2]
                - fy / z2 * dJ[:, 1, 1] + 2 * fy * y / z3 * dJ[:, 1, 2]
                - g_mean2d[:, 0] * fx * x / z2 - g_mean2d[:, 1] * fy * y / z2)
    g_mu = dX @ Rc

    dM = 2.0 * dSigma @ M
    g_s = np.sum(Rq * dM, axis=1)
    g_log_scale = g_s * s
    dR = dM * s[:, None, :]
    g_qn = rotmat_backward(qn, dR)
    g_rot = normalize_quat_backward(qn, qnorm, g_qn)
    return g_mu, g_rot, g_log_scale


def project_points(points: np.ndarray, cam: PinholeCamera):
    """Pixel positions and the 2x3 projection Jacobian with respect to world points."""
    Xc = points @ cam.R.T + cam.t
    z = Xc[:, 2]
    zs = np.where(z > NEAR_PLANE, z, 1.0)
    uv = np.stack([cam.fx * Xc[:, 0] / zs + cam.cx, cam.fy * Xc[:, 1] / zs + cam.cy], 1)
    Jc = np.zeros((len(points), 2, 3))
    Jc[:, 0, 0] = cam.fx / zs
    Jc[:, 0, 2] = -cam.fx * Xc[:, 0] / zs ** 2
    Jc[:, 1, 1] = cam.fy / zs
    Jc[:, 1, 2] = -cam.fy * Xc[:, 1] / zs ** 2
    return uv, Jc @ cam.R, z > NEAR_PLANE


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    rgb: np.ndarray
    brightness: float
    probs: CategoryProbs
    flow2d: np.ndarray


CULLED = None


def project(g: AugmentedGaussian, cam: PinholeCamera, cutoff_sigma: float = CUTOFF_SIGMA):
    """Single-Gaussian projection; returns a :class:`Splat2D` or ``CULLED`` (None)."""
    p = project_gaussians(g.mu[None], g.rot[None], g.log_scale[None], cam, cutoff_sigma)
    if not p.visible[0]:
        return CULLED
    a, b, c = p.cov2d[0]
    view = g.mu - cam.center
    rgb = eval_sh(g.sh, view / np.linalg.norm(view))
    return Splat2D(
        mean2d=p.mean2d[0], cov2d=np.array([[a, b], [b, c]]), depth=float(p.depth[0]),
        opacity=float(sigmoid(g.opacity_logit)), rgb=rgb, brightness=float(g.brightness),
        probs=category_probs(g), flow2d=np.zeros(2))
