"""Multi-resolution factorised (x, y, z, t) feature planes.

Each level holds six planes, one per coordinate pair. A query samples every
plane bilinearly, multiplies the six samples elementwise and the per-level
products are concatenated.
"""

from __future__ import annotations

import numba as nb
import numpy as np

PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))


_AXES = np.array(PLANE_AXES, dtype=np.int64)


@nb.njit(cache=True)
def _level_forward(coords, level, out):
    n = coords.shape[0]
    res = level.shape[1]
    nf = level.shape[3]
    for k in range(n):
        for f in range(nf):
            out[k, f] = 1.0
        for p in range(6):
            g = coords[k, _AXES[p, 0]] * (res - 1)
            a = min(max(int(np.floor(g)), 0), res - 2)
            u = g - a
            g = coords[k, _AXES[p, 1]] * (res - 1)
            b = min(max(int(np.floor(g)), 0), res - 2)
            v = g - b
            for f in range(nf):
                out[k, f] *= ((1 - u) * (1 - v) * level[p, a, b, f] + u * (1 - v) * level[p, a + 1, b, f]
                              + (1 - u) * v * level[p, a, b + 1, f] + u * v * level[p, a + 1, b + 1, f])


@nb.njit(cache=True)
def _level_backward(coords, level, gl, glevel, dcoords):
    """Adjoint of one level's product of six bilinear samples."""
    n = coords.shape[0]
    res = level.shape[1]
    nf = level.shape[3]
    iu = np.empty(6, np.int64)
    iv = np.empty(6, np.int64)
    fu = np.empty(6)
    fv = np.empty(6)
    samp = np.empty((6, nf))
    pre = np.empty(7)
    for k in range(n):
        for p in range(6):
            for j, ax in enumerate((_AXES[p, 0], _AXES[p, 1])):
                g = coords[k, ax] * (res - 1)
                i0 = int(np.floor(g))
                if i0 < 0:
                    i0 = 0
                elif i0 > res - 2:
                    i0 = res - 2
                if j == 0:
                    iu[p] = i0
                    fu[p] = g - i0
                else:
                    iv[p] = i0
                    fv[p] = g - i0
            u, v = fu[p], fv[p]
            a, b = iu[p], iv[p]
            for f in range(nf):
                samp[p, f] = ((1 - u) * (1 - v) * level[p, a, b, f] + u * (1 - v) * level[p, a + 1, b, f]
                              + (1 - u) * v * level[p, a, b + 1, f] + u * v * level[p, a + 1, b + 1, f])
        for f in range(nf):
            g0 = gl[k, f]
            if g0 == 0.0:
                continue
            pre[0] = 1.0
            for p in range(6):
                pre[p + 1] = pre[p] * samp[p, f]
            suf = 1.0
            for p in range(5, -1, -1):
                ds = g0 * pre[p] * suf
                suf *= samp[p, f]
                u, v = fu[p], fv[p]
                a, b = iu[p], iv[p]
                glevel[p, a, b, f] += (1 - u) * (1 - v) * ds
                glevel[p, a + 1, b, f] += u * (1 - v) * ds
                glevel[p, a, b + 1, f] += (1 - u) * v * ds
                glevel[p, a + 1, b + 1, f] += u * v * ds
                c00 = level[p, a, b, f]
                c10 = level[p, a + 1, b, f]
                c01 = level[p, a, b + 1, f]
                c11 = level[p, a + 1, b + 1, f]
                dcoords[k, _AXES[p, 0]] += ds * ((1 - v) * (c10 - c00) + v * (c11 - c01)) * (res - 1)
                dcoords[k, _AXES[p, 1]] += ds * ((1 - u) * (c01 - c00) + u * (c11 - c10)) * (res - 1)


class HexPlaneEncoder:
    def __init__(self, bounds, resolutions=(32, 64), channels: int = 16,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        self.resolutions = tuple(int(r) for r in resolutions)
        self.channels = int(channels)
        self.planes = []
        for r in self.resolutions:
            level = np.empty((6, r, r, self.channels))
            for p, (_, b) in enumerate(PLANE_AXES):
                if b == 3:
                    level[p] = 1.0
                else:
                    level[p] = rng.uniform(0.1, 0.5, (r, r, self.channels))
            self.planes.append(level)

    @property
    def out_dim(self) -> int:
        return self.channels * len(self.resolutions)

    def params(self, prefix: str = "enc") -> dict[str, np.ndarray]:
        return {f"{prefix}.level{i}": p for i, p in enumerate(self.planes)}

    def load_params(self, params: dict[str, np.ndarray], prefix: str = "enc") -> None:
        for i in range(len(self.planes)):
            self.planes[i] = params[f"{prefix}.level{i}"]

    def normalized_coords(self, mu: np.ndarray, t):
        """Coordinates in [0, 1]^4 and the derivative of each w.r.t. its input (0 when clamped)."""
        lo, hi = self.bounds
        raw = (mu - lo) / (hi - lo)
        n = len(mu)
        coords = np.empty((n, 4))
        coords[:, :3] = np.clip(raw, 0.0, 1.0)
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        coords[:, 3] = np.clip(tt, 0.0, 1.0)
        dcoord = np.where((raw > 0.0) & (raw < 1.0), 1.0 / (hi - lo), 0.0)
        return coords, dcoord

    def encode(self, mu: np.ndarray, t):
        """Features ``(N, L*F)`` and a cache for :meth:`backward`."""
        coords, dcoord = self.normalized_coords(mu, t)
        F = self.channels
        feats = np.empty((len(mu), F * len(self.planes)))
        for li, level in enumerate(self.planes):
            out = np.empty((len(mu), F))
            _level_forward(coords, level, out)
            feats[:, li * F:(li + 1) * F] = out
        return feats, (coords, dcoord)

    def __call__(self, mu, t):
        return self.encode(mu, t)[0]

    def backward(self, dfeat: np.ndarray, cache, prefix: str = "enc"):
        """Returns ``(grads keyed by plane level, d_mu)``."""
        coords, dcoord = cache
        n = len(coords)
        dcoords = np.zeros((n, 4))
        grads = {}
        F = self.channels
        for li, level in enumerate(self.planes):
            glevel = np.zeros(level.shape)
            gl = np.ascontiguousarray(dfeat[:, li * F:(li + 1) * F], dtype=np.float64)
            _level_backward(coords, level, gl, glevel, dcoords)
            grads[f"{prefix}.level{li}"] = glevel
        return grads, dcoords[:, :3] * dcoord
