"""Augmented Gaussian representation, category probabilities, cameras and frames.

Gaussians are stored struct-of-arrays in :class:`GaussianScene`; a single
:class:`AugmentedGaussian` is a lightweight record used at API boundaries and
in tests.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInput, NumericalError

SH_C0 = 0.28209479177387814
DEFAULT_PRIOR = (0.8, 0.1, 0.1)
INIT_OPACITY = 0.1
INIT_BRIGHTNESS = 0.25


class Category(enum.IntEnum):
    BG = 0
    OBJ = 1
    HAND = 2


CATEGORIES = (Category.BG, Category.OBJ, Category.HAND)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def logit(x):
    x = np.asarray(x, dtype=np.float64)
    return np.log(x) - np.log1p(-x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis; raises on non-finite input."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        bad = np.argwhere(~np.all(np.isfinite(np.atleast_2d(logits)), axis=-1))
        raise NumericalError("non-finite category logits",
                             index=int(bad[0, 0]) if bad.size else None)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax: p * (g - <g, p>)."""
    inner = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def hard_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, which is the bg > obj > hand priority.
    return np.argmax(probs, axis=-1).astype(np.int64)


@dataclass(frozen=True)
class CategoryProbs:
    p_bg: float
    p_obj: float
    p_hand: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_bg, self.p_obj, self.p_hand], dtype=np.float64)

    @classmethod
    def from_array(cls, p) -> "CategoryProbs":
        p = np.asarray(p, dtype=np.float64)
        return cls(float(p[0]), float(p[1]), float(p[2]))

    def validate(self, tol: float = 1e-6) -> None:
        p = self.as_array()
        if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise InvalidInput(f"probabilities out of [0, 1]: {p}")
        if abs(p.sum() - 1.0) > tol:
            raise InvalidInput(f"probabilities do not sum to 1: {p.sum()!r}")


@dataclass
class AugmentedGaussian:
    """One splat. ``scale`` is stored as log-scale, ``opacity_logit`` as a logit."""

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    brightness: float
    cat_logits: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def category_probs(g: AugmentedGaussian) -> CategoryProbs:
    return CategoryProbs.from_array(softmax(np.asarray(g.cat_logits, dtype=np.float64)))


def hard_label(g: AugmentedGaussian) -> Category:
    return Category(int(hard_labels(category_probs(g).as_array())))


@dataclass
class PinholeCamera:
    """Pinhole intrinsics plus a world-to-camera pose ``x_cam = R @ x + t``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def validate(self, tol: float = 1e-6) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInput("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInput("image size must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > tol or abs(np.linalg.det(self.R) - 1) > tol:
            raise InvalidInput("camera rotation is not a proper rotation")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @classmethod
    def from_matrix(cls, fx, fy, cx, cy, width, height, w2c) -> "PinholeCamera":
        w2c = np.asarray(w2c, dtype=np.float64).reshape(4, 4)
        return cls(fx, fy, cx, cy, int(width), int(height), w2c[:3, :3].copy(), w2c[:3, 3].copy())

    def project(self, points: np.ndarray) -> np.ndarray:
        pc = points @ self.R.T + self.t
        return np.stack([self.fx * pc[..., 0] / pc[..., 2] + self.cx,
                         self.fy * pc[..., 1] / pc[..., 2] + self.cy], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": self.world_to_camera().reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PinholeCamera":
        return cls.from_matrix(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                               d["world_to_camera"])


@dataclass
class GaussianScene:
    """Struct-of-arrays Gaussian set.

    Shapes: ``mu (N,3)``, ``rot (N,4)`` as (w, x, y, z), ``log_scale (N,3)``,
    ``opacity_logit (N,)``, ``sh (N,K,3)``, ``brightness (N,)``, ``cat_logits (N,3)``.
    """

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    brightness: np.ndarray
    cat_logits: np.ndarray
    sh_degree: int = 1
    time_range: tuple[float, float] = (0.0, 1.0)

    FIELDS = ("mu", "rot", "log_scale", "opacity_logit", "sh", "brightness", "cat_logits")

    def __post_init__(self):
        if len(self.mu) == 0:
            raise InvalidInput("a scene needs at least one Gaussian")
        if self.sh.shape[1] != num_sh_coeffs(self.sh_degree):
            raise InvalidInput("SH block does not match sh_degree")

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> AugmentedGaussian:
        return AugmentedGaussian(
            self.mu[i].copy(), self.rot[i].copy(), self.log_scale[i].copy(),
            float(self.opacity_logit[i]), self.sh[i].copy(), float(self.brightness[i]),
            self.cat_logits[i].copy())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def replace(self, **arrays) -> "GaussianScene":
        fields = self.arrays()
        fields.update(arrays)
        return GaussianScene(**fields, sh_degree=self.sh_degree, time_range=self.time_range)

    def astype(self, dtype) -> "GaussianScene":
        return self.replace(**{k: np.ascontiguousarray(v, dtype=dtype) for k, v in self.arrays().items()})

    def copy(self) -> "GaussianScene":
        return self.replace(**{k: v.copy() for k, v in self.arrays().items()})

    def probs(self) -> np.ndarray:
        return softmax(self.cat_logits)

    def labels(self) -> np.ndarray:
        return hard_labels(self.probs())


@dataclass
class FrameRecord:
    rgb: np.ndarray
    mask_hand: np.ndarray
    mask_obj: np.ndarray
    flow_gt: np.ndarray
    camera: PinholeCamera
    t: float
    index: int = 0
    depth: np.ndarray | None = None

    def validate(self) -> None:
        h, w = self.rgb.shape[:2]
        for name in ("mask_hand", "mask_obj", "flow_gt"):
            if getattr(self, name).shape[:2] != (h, w):
                raise InvalidInput(f"{name} does not match the image size")
        for name in ("mask_hand", "mask_obj"):
            m = getattr(self, name)
            if not np.all((m == 0) | (m == 1)):
                raise InvalidInput(f"{name} is not binary")
        if np.any((self.mask_hand > 0) & (self.mask_obj > 0)):
            raise InvalidInput("hand and object masks overlap")
        if not 0.0 <= self.t <= 1.0:
            raise InvalidInput("frame time must lie in [0, 1]")


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def init_from_pointcloud(xyz: Sequence, rgb: Sequence | None = None,
                         prior=DEFAULT_PRIOR, sh_degree: int = 1) -> GaussianScene:
    """Build one Gaussian per input point.

    ``xyz`` may also be a list of ``(position, rgb)`` pairs, in which case
    ``rgb`` is omitted. A lone point has no neighbours and gets scale 0.01.
    """
    if rgb is None:
        pairs = list(xyz)
        if not pairs:
            raise InvalidInput("empty point cloud")
        xyz = np.array([p for p, _ in pairs], dtype=np.float64)
        rgb = np.array([c for _, c in pairs], dtype=np.float64)
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    n = len(xyz)
    if n == 0:
        raise InvalidInput("empty point cloud")
    if len(rgb) != n:
        raise InvalidInput("positions and colours differ in length")
    if not isinstance(prior, CategoryProbs):
        prior = CategoryProbs.from_array(prior)
    prior.validate()
    p = prior.as_array()
    if np.any(p <= 0):
        raise InvalidInput("prior must be strictly positive to be expressed as logits")

    k = min(3, n - 1)
    if k == 0:
        mean_dist = np.full(n, 0.01)
    else:
        dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
        mean_dist = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)

    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(rgb)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianScene(
        mu=xyz.copy(),
        rot=rot,
        log_scale=np.repeat(np.log(mean_dist)[:, None], 3, axis=1),
        opacity_logit=np.full(n, float(logit(INIT_OPACITY))),
        sh=sh,
        brightness=np.full(n, INIT_BRIGHTNESS),
        cat_logits=np.tile(np.log(p), (n, 1)),
        sh_degree=sh_degree,
    )
