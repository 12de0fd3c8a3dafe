"""Brightness, motion-flow and mask controls plus the combined objective.

Loss functions return a scalar, or ``(scalar, grad)`` with ``grad=True`` where
``grad`` is the derivative with respect to the first (predicted) argument.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .core import CATEGORIES, Category, PinholeCamera
from .errors import InvalidInput, NumericalError
from .projection import NEAR_PLANE

logger = logging.getLogger(__name__)

BRIGHTNESS_KNEE = 0.75
BRIGHTNESS_SLOPE = 35.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise InvalidInput(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


# -- brightness control ------------------------------------------------------

def brightness_activation(raw, grad: bool = False):
    """Piecewise-linear activation of the rasterized brightness map.

    The input is clamped to [0, 1]; below the 0.75 knee the map is shifted by
    0.5, above it rises with slope 35 from 1.25, reaching 10.0 at 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    x = np.clip(raw, 0.0, 1.0)
    upper = x > BRIGHTNESS_KNEE
    out = np.where(upper, BRIGHTNESS_SLOPE * (x - BRIGHTNESS_KNEE) + 1.25, x + 0.5)
    if not grad:
        return out
    slope = np.where(upper, BRIGHTNESS_SLOPE, 1.0) * ((raw > 0.0) & (raw < 1.0))
    return out, slope


def apply_brightness(bg_image: np.ndarray, activated: np.ndarray) -> np.ndarray:
    if np.shape(bg_image)[:2] != np.shape(activated)[:2]:
        raise InvalidInput("brightness map and background image differ in size")
    act = np.asarray(activated, dtype=np.float64)
    return bg_image * (act[..., None] if np.ndim(bg_image) == 3 else act)


# -- motion-flow control -----------------------------------------------------

def dynamic_flow_target(flow_gt: np.ndarray, flow_cam: np.ndarray) -> np.ndarray:
    """Scene motion left after removing the camera-induced component."""
    _check_same_shape(flow_gt, flow_cam, "dynamic_flow_target")
    return np.asarray(flow_gt, dtype=np.float64) - np.asarray(flow_cam, dtype=np.float64)


def same_camera(a: PinholeCamera, b: PinholeCamera) -> bool:
    return ((a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
            and np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t))


def camera_flow(depth: np.ndarray, cam_t: PinholeCamera, cam_t1: PinholeCamera,
                alpha: np.ndarray | None = None):
    """Flow induced purely by the camera moving from ``cam_t`` to ``cam_t1``.

    ``depth`` is camera-space z per pixel. Returns ``(flow (H,W,2), valid (H,W))``;
    pixels with alpha below 0.5 or non-positive depth in either view are invalid
    and carry zero flow.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    valid = np.isfinite(depth) & (depth > NEAR_PLANE)
    if alpha is not None:
        valid &= np.asarray(alpha) >= 0.5
    if same_camera(cam_t, cam_t1):
        return np.zeros((h, w, 2)), valid
    z = np.where(valid, depth, 1.0)
    pc = np.stack([(u - cam_t.cx) / cam_t.fx * z, (v - cam_t.cy) / cam_t.fy * z, z], axis=-1)
    R_rel = cam_t1.R @ cam_t.R.T
    t_rel = cam_t1.t - R_rel @ cam_t.t
    q = pc @ R_rel.T + t_rel
    valid &= q[..., 2] > NEAR_PLANE
    zq = np.where(valid, q[..., 2], 1.0)
    u1 = cam_t1.fx * q[..., 0] / zq + cam_t1.cx
    v1 = cam_t1.fy * q[..., 1] / zq + cam_t1.cy
    flow = np.stack([u1 - u, v1 - v], axis=-1)
    flow[~valid] = 0.0
    return flow, valid


def flow_loss(pred: np.ndarray, target: np.ndarray, valid: np.ndarray, grad: bool = False):
    """Mean absolute flow error over valid pixels and both channels."""
    _check_same_shape(pred, target, "flow_loss")
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        warnings.warn("flow loss evaluated on an empty valid set", RuntimeWarning, stacklevel=2)
        return (0.0, np.zeros_like(pred)) if grad else 0.0
    diff = (pred - target) * valid[..., None]
    value = float(np.abs(diff).sum() / (2 * n))
    if not grad:
        return value
    return value, np.sign(diff) / (2 * n)


# -- mask control ------------------------------------------------------------

def masked_rgb_loss(image: np.ndarray, gt: np.ndarray, mask: np.ndarray, grad: bool = False):
    """L1 between masked prediction and masked target, normalised by mask area."""
    _check_same_shape(image, gt, "masked_rgb_loss")
    m = np.asarray(mask, dtype=np.float64)
    area = m.sum() * image.shape[-1]
    if area == 0:
        return (0.0, np.zeros_like(image)) if grad else 0.0
    diff = (image - gt) * m[..., None]
    value = float(np.abs(diff).sum() / area)
    if not grad:
        return value
    return value, np.sign(diff) * m[..., None] / area


def masked_alpha_loss(alpha: np.ndarray, mask: np.ndarray, grad: bool = False):
    """Mean absolute difference between a category alpha map and its mask."""
    _check_same_shape(alpha, mask, "masked_alpha_loss")
    diff = alpha - np.asarray(mask, dtype=np.float64)
    value = float(np.abs(diff).mean())
    if not grad:
        return value
    return value, np.sign(diff) / diff.size


# -- SSIM and entropy --------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


_WINDOW = gaussian_window()


def _blur(x: np.ndarray) -> np.ndarray:
    # zero padding; the window is symmetric, so this filter is its own adjoint
    y = correlate1d(x, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _WINDOW, axis=1, mode="constant", cval=0.0)


def ssim(img: np.ndarray, ref: np.ndarray, grad: bool = False):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over all pixels and channels."""
    _check_same_shape(img, ref, "ssim")
    x = np.asarray(img, dtype=np.float64)
    y = np.asarray(ref, dtype=np.float64)
    mu1, mu2 = _blur(x), _blur(y)
    pxx, pyy, pxy = _blur(x * x), _blur(y * y), _blur(x * y)
    s11 = pxx - mu1 * mu1
    s22 = pyy - mu2 * mu2
    s12 = pxy - mu1 * mu2
    A1 = 2 * mu1 * mu2 + SSIM_C1
    A2 = 2 * s12 + SSIM_C2
    B1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    B2 = s11 + s22 + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(smap.mean())
    if not grad:
        return value
    g = 1.0 / smap.size
    d_mu1 = g * ((2 * mu2 * A2 - 2 * mu2 * A1) / (B1 * B2) - smap * (2 * mu1 / B1 - 2 * mu1 / B2))
    d_pxx = g * (-smap / B2)
    d_pxy = g * (2 * A1 / (B1 * B2))
    dx = _blur(d_mu1) + 2 * x * _blur(d_pxx) + y * _blur(d_pxy)
    return value, dx


def ssim_loss(img: np.ndarray, ref: np.ndarray, grad: bool = False):
    if not grad:
        return 1.0 - ssim(img, ref)
    value, d = ssim(img, ref, grad=True)
    return 1.0 - value, -d


def entropy_terms(probs: np.ndarray, grad: bool = False):
    """Per-category entropy contributions ``mean_i(-p_i^l log p_i^l)``; they sum to the entropy."""
    p = np.asarray(probs, dtype=np.float64)
    n = len(p)
    logp = np.log(np.clip(p, 1e-300, 1.0))
    terms = np.where(p > 0, -p * logp, 0.0).sum(axis=0) / n
    if not grad:
        return terms
    return terms, -(logp + 1.0) / n


def entropy_loss(probs: np.ndarray) -> float:
    return float(entropy_terms(probs).sum())


# -- objective ---------------------------------------------------------------

@dataclass
class LossWeights:
    l1: float = 0.8
    ssim: float = 0.2
    flow: float = 0.05
    rgb: float = 1.0
    alpha: float = 0.5
    entropy: float = 0.01

    def weight_of(self, component: str) -> float:
        return getattr(self, component.split("_")[0])


def component_names() -> list[str]:
    names = ["l1", "flow"]
    for kind in ("rgb", "alpha", "ssim", "entropy"):
        names += [f"{kind}_{c.name.lower()}" for c in CATEGORIES]
    return names


@dataclass
class LossReport:
    components: dict[str, float]
    weights: dict[str, float]
    total: float
    stage: str = ""
    step: int = 0
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.components[name]

    def category(self, kind: str, category: Category) -> float:
        return self.components[f"{kind}_{Category(category).name.lower()}"]

    def csv_row(self) -> list:
        return [self.step, self.stage] + [self.components[k] for k in component_names()] + [self.total]

    @staticmethod
    def csv_header() -> list[str]:
        return ["step", "stage"] + component_names() + ["total"]


def total_loss(components: dict[str, float], weights: LossWeights | None = None) -> LossReport:
    weights = weights or LossWeights()
    comps = {name: float(components.get(name, 0.0)) for name in component_names()}
    for name, value in comps.items():
        if not np.isfinite(value):
            raise NumericalError(f"loss component {name} is {value}")
        if value < 0:
            raise InvalidInput(f"loss component {name} is negative: {value}")
    w = {name: weights.weight_of(name) for name in comps}
    total = float(sum(w[k] * comps[k] for k in comps))
    return LossReport(comps, w, total)
