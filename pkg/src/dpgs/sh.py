"""Real spherical-harmonic colour evaluation (degree 0..3) and its adjoint."""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def sh_basis(dirs: np.ndarray, degree: int, with_grad: bool = False):
    """Basis values ``(N, K)`` and optionally their direction derivatives ``(N, K, 3)``."""
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    k = (degree + 1) ** 2
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    B = np.zeros((n, k))
    dB = np.zeros((n, k, 3)) if with_grad else None
    B[:, 0] = C0
    if degree >= 1:
        B[:, 1] = -C1 * y
        B[:, 2] = C1 * z
        B[:, 3] = -C1 * x
        if with_grad:
            dB[:, 1, 1] = -C1
            dB[:, 2, 2] = C1
            dB[:, 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        B[:, 4] = C2[0] * xy
        B[:, 5] = C2[1] * yz
        B[:, 6] = C2[2] * (2 * zz - xx - yy)
        B[:, 7] = C2[3] * xz
        B[:, 8] = C2[4] * (xx - yy)
        if with_grad:
            dB[:, 4] = C2[0] * np.stack([y, x, 0 * x], -1)
            dB[:, 5] = C2[1] * np.stack([0 * x, z, y], -1)
            dB[:, 6] = C2[2] * np.stack([-2 * x, -2 * y, 4 * z], -1)
            dB[:, 7] = C2[3] * np.stack([z, 0 * x, x], -1)
            dB[:, 8] = C2[4] * np.stack([2 * x, -2 * y, 0 * x], -1)
    if degree >= 3:
        B[:, 9] = C3[0] * y * (3 * xx - yy)
        B[:, 10] = C3[1] * xy * z
        B[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        B[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        B[:, 14] = C3[5] * z * (xx - yy)
        B[:, 15] = C3[6] * x * (xx - 3 * yy)
        if with_grad:
            zero = 0 * x
            dB[:, 9] = C3[0] * np.stack([6 * xy, 3 * xx - 3 * yy, zero], -1)
            dB[:, 10] = C3[1] * np.stack([yz, xz, xy], -1)
            dB[:, 11] = C3[2] * np.stack([-2 * xy, 4 * zz - xx - 3 * yy, 8 * yz], -1)
            dB[:, 12] = C3[3] * np.stack([-6 * xz, -6 * yz, 6 * zz - 3 * xx - 3 * yy], -1)
            dB[:, 13] = C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * xy, 8 * xz], -1)
            dB[:, 14] = C3[5] * np.stack([2 * xz, -2 * yz, xx - yy], -1)
            dB[:, 15] = C3[6] * np.stack([3 * xx - 3 * yy, -6 * xy, zero], -1)
    return (B, dB) if with_grad else B


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray, degree: int | None = None) -> np.ndarray:
    """RGB in [0, 1] from an SH block ``(K, 3)`` or ``(N, K, 3)`` and unit view directions."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    single = coeffs.ndim == 2
    if single:
        coeffs = coeffs[None]
    if degree is None:
        degree = int(round(np.sqrt(coeffs.shape[1]))) - 1
    B = sh_basis(np.asarray(view_dir, dtype=np.float64).reshape(-1, 3), degree)
    rgb = np.clip(np.einsum("nk,nkc->nc", B, coeffs[:, : B.shape[1]]) + 0.5, 0.0, 1.0)
    return rgb[0] if single else rgb


def sh_to_rgb(coeffs: np.ndarray, mu: np.ndarray, cam_center: np.ndarray, degree: int):
    """Forward colour evaluation from Gaussian centres; returns ``(rgb, cache)``."""
    v = mu - cam_center
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    dirs = v / norm
    B, dB = sh_basis(dirs, degree, with_grad=True)
    raw = np.einsum("nk,nkc->nc", B, coeffs) + 0.5
    rgb = np.clip(raw, 0.0, 1.0)
    cache = (coeffs, dirs, norm, B, dB, (raw > 0.0) & (raw < 1.0))
    return rgb, cache


def sh_to_rgb_backward(grad_rgb: np.ndarray, cache):
    """Adjoint of :func:`sh_to_rgb`; returns ``(grad_coeffs, grad_mu)``."""
    coeffs, dirs, norm, B, dB, inside = cache
    g = grad_rgb * inside
    grad_coeffs = B[:, :, None] * g[:, None, :]
    # dL/ddir = sum_k sum_c g_c coeff_kc dB_k/ddir
    gk = np.einsum("nkc,nc->nk", coeffs, g)
    grad_dir = np.einsum("nk,nkd->nd", gk, dB)
    grad_v = (grad_dir - dirs * np.sum(grad_dir * dirs, axis=1, keepdims=True)) / norm
    return grad_coeffs, grad_v
