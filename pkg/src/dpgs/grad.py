"""Gradient plumbing: occlusion masking of image adjoints and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import InvalidInput, NumericalError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a ``(2r+1) x (2r+1)`` square structuring element."""
    m = np.asarray(mask) > 0
    if radius <= 0:
        return m
    return maximum_filter(m, size=2 * int(radius) + 1, mode="constant", cval=False)


def apply_occlusion_gradient_mask(image_grad: np.ndarray, occ_mask: np.ndarray,
                                  dilation_radius: int) -> np.ndarray:
    """Zero image-space gradients inside the dilated mask of the other branches."""
    if np.shape(occ_mask) != np.shape(image_grad)[:2]:
        raise InvalidInput(f"occlusion mask {np.shape(occ_mask)} does not match "
                           f"gradient {np.shape(image_grad)}")
    keep = 1.0 - dilate(occ_mask, dilation_radius)
    if np.ndim(image_grad) == 3:
        keep = keep[..., None]
    return image_grad * keep


def scaled_dilation_radius(base_radius: int, height: int, width: int, base_size: int = 128) -> int:
    return max(int(round(base_radius * max(height, width) / base_size)), 0)


def exponential_lr(lr_init: float, lr_final: float, max_steps: int) -> Callable[[int], float]:
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""

    def schedule(step: int) -> float:
        if max_steps <= 0:
            return lr_init
        s = min(max(step / max_steps, 0.0), 1.0)
        return float(np.exp(np.log(lr_init) * (1 - s) + np.log(lr_final) * s))

    return schedule


@dataclass
class Adam:
    """Adam with per-parameter learning rates and per-parameter step counts.

    ``lrs`` maps a parameter name to a constant or a ``step -> lr`` schedule.
    Moments are stored in the dtype of the parameter they belong to; the
    update itself is computed in float64.
    """

    lrs: Mapping[str, float | Callable[[int], float]]
    renormalize: tuple[str, ...] = ("rot",)
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    def lr_for(self, name: str, step: int) -> float:
        lr = self.lrs[name] if name in self.lrs else self.lrs[name.split(".")[0]]
        return lr(step) if callable(lr) else float(lr)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             names=None, global_step: int = 0) -> None:
        """Update ``params`` in place for every name in ``names`` (default: all grads)."""
        for name in (names if names is not None else grads.keys()):
            p = params[name]
            g = np.asarray(grads[name], dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
            m = self.m.get(name)
            v = self.v.get(name)
            m = np.zeros(p.shape) if m is None else m.astype(np.float64)
            v = np.zeros(p.shape) if v is None else v.astype(np.float64)
            t = self.t.get(name, 0) + 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            update = self.lr_for(name, global_step) * m_hat / (np.sqrt(v_hat) + self.eps)
            new = p.astype(np.float64) - update
            if name in self.renormalize:
                new = new / np.linalg.norm(new, axis=-1, keepdims=True)
            if not np.all(np.isfinite(new)):
                raise NumericalError(f"non-finite parameter update for {name}")
            p[...] = new.astype(p.dtype)
            self.m[name] = m.astype(p.dtype)
            self.v[name] = v.astype(p.dtype)
            self.t[name] = t

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: Mapping[str, np.ndarray], steps: Mapping[str, int]) -> None:
        self.m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
        self.t = dict(steps)


def sgd_adam_step(params, grads, lr_schedule, step, optimizer: Adam | None = None) -> Adam:
    """Functional wrapper: one Adam step with the given per-name learning rates."""
    opt = optimizer or Adam(lr_schedule)
    opt.step(params, grads, global_step=step)
    return opt
