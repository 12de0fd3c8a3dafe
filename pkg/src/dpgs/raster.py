"""Front-to-back alpha compositing of screen-space splats, forward and adjoint.

Pixels are rasterized naively: every splat whose cutoff box contains the
pixel centre contributes. Splats are binned into square tiles only to bound
the per-pixel candidate list; the tile loop runs in parallel and the adjoint
writes one gradient row per (tile, splat) pair, which is reduced serially in
pair order so results do not depend on the thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import Category, hard_labels
from .errors import ContractViolation
from .projection import CUTOFF_SIGMA, Splat2D

TILE = 8


@dataclass
class RenderOutput:
    image: np.ndarray           # (H, W, 3)
    alpha_map: np.ndarray       # (H, W)
    depth_map: np.ndarray       # (H, W) alpha-weighted camera z
    brightness_raw: np.ndarray  # (H, W)
    flow_map: np.ndarray        # (H, W, 2)


@dataclass(frozen=True)
class Composite:
    pass


@dataclass(frozen=True)
class SoftCategory:
    category: Category


@dataclass(frozen=True)
class HardCategory:
    category: Category


def depth_sort(depths: np.ndarray) -> np.ndarray:
    """Indices sorting ``depths`` ascending; ties keep input order."""
    return np.argsort(np.asarray(depths), kind="stable")


@nb.njit(cache=True)
def _bin_tiles(order, mean2d, radius, width, height, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0 = max(int(np.floor((mean2d[g, 0] - radius[g]) / tile)), 0)
        x1 = min(int(np.floor((mean2d[g, 0] + radius[g]) / tile)), ntx - 1)
        y0 = max(int(np.floor((mean2d[g, 1] - radius[g]) / tile)), 0)
        y1 = min(int(np.floor((mean2d[g, 1] + radius[g]) / tile)), nty - 1)
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * ntx + tx + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    pairs = np.empty(start[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0 = max(int(np.floor((mean2d[g, 0] - radius[g]) / tile)), 0)
        x1 = min(int(np.floor((mean2d[g, 0] + radius[g]) / tile)), ntx - 1)
        y0 = max(int(np.floor((mean2d[g, 1] - radius[g]) / tile)), 0)
        y1 = min(int(np.floor((mean2d[g, 1] + radius[g]) / tile)), nty - 1)
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                t = ty * ntx + tx
                pairs[fill[t]] = g
                fill[t] += 1
    return start, pairs


@nb.njit(parallel=True, cache=True)
def _forward(start, pairs, mean2d, conic, radius, opac, feats, nchan, width, height, tile,
             out, trans):
    # opac is (N, S): S compositing layers share geometry and features;
    # layer l composites only the first nchan[l] feature channels
    ntx = (width + tile - 1) // tile
    ntiles = start.shape[0] - 1
    ns = opac.shape[1]
    for t in nb.prange(ntiles):
        s, e = start[t], start[t + 1]
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        T = np.empty(ns)
        for py in range(ty0, min(height, ty0 + tile)):
            for px in range(tx0, min(width, tx0 + tile)):
                for l in range(ns):
                    T[l] = 1.0
                for k in range(s, e):
                    g = pairs[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    r = radius[g]
                    if dx > r or dx < -r or dy > r or dy < -r:
                        continue
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    fall = np.exp(power)
                    for l in range(ns):
                        a = opac[g, l] * fall
                        if a == 0.0:
                            continue
                        w = a * T[l]
                        for c in range(nchan[l]):
                            out[l, py, px, c] += w * feats[g, c]
                        T[l] *= 1.0 - a
                for l in range(ns):
                    trans[l, py, px] = T[l]


@nb.njit(parallel=True, cache=True, fastmath={"contract", "reassoc"})
def _backward(start, pairs, mean2d, conic, radius, opac, feats, nchan, width, height, tile,
              dout, dalpha, pair_grad):
    # pair_grad row layout: d_feats (C) | d_opac (S) | d_mean2d (2) | d_conic (3)
    ntx = (width + tile - 1) // tile
    ntiles = start.shape[0] - 1
    nc = feats.shape[1]
    ns = opac.shape[1]
    for t in nb.prange(ntiles):
        s, e = start[t], start[t + 1]
        n = e - s
        if n == 0:
            continue
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        # per-pixel list of splats whose cutoff box holds the pixel
        hit = np.empty(n, dtype=np.int64)
        Tbuf = np.empty((n, ns))
        gbuf = np.empty(n)
        T = np.empty(ns)
        acc = np.empty((ns, nc))
        acc_a = np.empty(ns)
        for py in range(ty0, min(height, ty0 + tile)):
            for px in range(tx0, min(width, tx0 + tile)):
                for l in range(ns):
                    T[l] = 1.0
                m = 0
                for k in range(s, e):
                    g = pairs[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    r = radius[g]
                    if dx > r or dx < -r or dy > r or dy < -r:
                        continue
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    fall = np.exp(power)
                    hit[m] = k
                    gbuf[m] = fall
                    for l in range(ns):
                        Tbuf[m, l] = T[l]
                        T[l] *= 1.0 - opac[g, l] * fall
                    m += 1
                for l in range(ns):
                    acc_a[l] = 0.0
                    for c in range(nc):
                        acc[l, c] = 0.0
                for j in range(m - 1, -1, -1):
                    k = hit[j]
                    g = pairs[k]
                    fall = gbuf[j]
                    dfall = 0.0
                    for l in range(ns):
                        o = opac[g, l]
                        a = o * fall
                        Tk = Tbuf[j, l]
                        dLda = dalpha[l, py, px] * (1.0 - acc_a[l])
                        for c in range(nchan[l]):
                            go = dout[l, py, px, c]
                            f = feats[g, c]
                            dLda += go * (f - acc[l, c])
                            pair_grad[k, c] += go * a * Tk
                            acc[l, c] = a * f + (1.0 - a) * acc[l, c]
                        acc_a[l] = a + (1.0 - a) * acc_a[l]
                        dLda *= Tk
                        pair_grad[k, nc + l] += dLda * fall
                        dfall += dLda * o
                    dpow = dfall * fall
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    q = nc + ns
                    pair_grad[k, q] += (conic[g, 0] * dx + conic[g, 1] * dy) * dpow
                    pair_grad[k, q + 1] += (conic[g, 1] * dx + conic[g, 2] * dy) * dpow
                    pair_grad[k, q + 2] += -0.5 * dx * dx * dpow
                    pair_grad[k, q + 3] += -dx * dy * dpow
                    pair_grad[k, q + 4] += -0.5 * dy * dy * dpow


@nb.njit(cache=True)
def _reduce_pairs(pairs, pair_grad, n):
    out = np.zeros((n, pair_grad.shape[1]))
    for k in range(pairs.shape[0]):
        g = pairs[k]
        for c in range(pair_grad.shape[1]):
            out[g, c] += pair_grad[k, c]
    return out


@nb.njit(parallel=True, cache=True)
def _max_weight(start, pairs, mean2d, conic, radius, opac, width, height, tile, pair_w):
    ntx = (width + tile - 1) // tile
    ntiles = start.shape[0] - 1
    for t in nb.prange(ntiles):
        s, e = start[t], start[t + 1]
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        for py in range(ty0, min(height, ty0 + tile)):
            for px in range(tx0, min(width, tx0 + tile)):
                T = 1.0
                for k in range(s, e):
                    g = pairs[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    r = radius[g]
                    if dx > r or dx < -r or dy > r or dy < -r:
                        continue
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    a = opac[g] * np.exp(power)
                    if a * T > pair_w[k]:
                        pair_w[k] = a * T
                    T *= 1.0 - a


@dataclass
class RasterContext:
    start: np.ndarray
    pairs: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    radius: np.ndarray
    opac: np.ndarray
    feats: np.ndarray
    nchan: np.ndarray
    width: int
    height: int
    tile: int


def rasterize_layers(mean2d, conic, radius, order, opac, feats, width, height, tile=TILE,
                     layer_channels=None):
    """Composite splats listed in ``order`` (front to back) into ``S`` layers at once.

    ``opac`` is ``(N, S)``: the effective opacity of each splat in each layer
    (already multiplied by any category weight). ``feats`` are the shared
    ``(N, C)`` per-splat channels; ``layer_channels[l]`` limits layer ``l`` to
    the leading channels (the rest stay zero). Returns
    ``(channels (S,H,W,C), alpha (S,H,W), ctx)``.
    """
    mean2d = np.ascontiguousarray(mean2d, dtype=np.float64)
    conic = np.ascontiguousarray(conic, dtype=np.float64)
    radius = np.ascontiguousarray(radius, dtype=np.float64)
    opac = np.ascontiguousarray(opac, dtype=np.float64)
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    start, pairs = _bin_tiles(order, mean2d, radius, width, height, tile)
    ns = opac.shape[1]
    nc = feats.shape[1]
    if layer_channels is None:
        nchan = np.full(ns, nc, dtype=np.int64)
    else:
        nchan = np.minimum(np.asarray(layer_channels, dtype=np.int64), nc)
    out = np.zeros((ns, height, width, nc))
    trans = np.ones((ns, height, width))
    _forward(start, pairs, mean2d, conic, radius, opac, feats, nchan, width, height, tile, out, trans)
    ctx = RasterContext(start, pairs, mean2d, conic, radius, opac, feats, nchan, width, height, tile)
    return out, 1.0 - trans, ctx


def rasterize_layers_backward(ctx: RasterContext, dout: np.ndarray, dalpha: np.ndarray):
    """Adjoint of :func:`rasterize_layers`.

    Returns ``(d_feats (N,C), d_opac (N,S), d_mean2d (N,2), d_conic (N,3))``;
    feature and geometry gradients are summed over layers.
    """
    nc = ctx.feats.shape[1]
    ns = ctx.opac.shape[1]
    pair_grad = np.zeros((len(ctx.pairs), nc + ns + 5))
    _backward(ctx.start, ctx.pairs, ctx.mean2d, ctx.conic, ctx.radius, ctx.opac, ctx.feats, ctx.nchan,
              ctx.width, ctx.height, ctx.tile,
              np.ascontiguousarray(dout, dtype=np.float64),
              np.ascontiguousarray(dalpha, dtype=np.float64), pair_grad)
    g = _reduce_pairs(ctx.pairs, pair_grad, len(ctx.mean2d))
    return g[:, :nc], g[:, nc:nc + ns], g[:, nc + ns:nc + ns + 2], g[:, nc + ns + 2:]


def rasterize(mean2d, conic, radius, order, opac, feats, width, height, tile=TILE):
    """Single-layer :func:`rasterize_layers`: returns ``(channels (H,W,C), alpha (H,W), ctx)``."""
    opac = np.asarray(opac, dtype=np.float64).reshape(-1, 1)
    out, alpha, ctx = rasterize_layers(mean2d, conic, radius, order, opac, feats, width, height, tile)
    return out[0], alpha[0], ctx


def rasterize_backward(ctx: RasterContext, dout: np.ndarray, dalpha: np.ndarray):
    """Adjoint of :func:`rasterize`: ``(d_feats, d_opac (N,), d_mean2d, d_conic)``."""
    df, dop, dm, dc = rasterize_layers_backward(ctx, np.asarray(dout)[None], np.asarray(dalpha)[None])
    return df, dop[:, 0], dm, dc


def max_weights(mean2d, conic, radius, order, opac, width, height, tile=TILE) -> np.ndarray:
    """Largest compositing weight each splat attains at any pixel."""
    mean2d = np.ascontiguousarray(mean2d, dtype=np.float64)
    conic = np.ascontiguousarray(conic, dtype=np.float64)
    radius = np.ascontiguousarray(radius, dtype=np.float64)
    opac = np.ascontiguousarray(opac, dtype=np.float64)
    start, pairs = _bin_tiles(np.ascontiguousarray(order, dtype=np.int64), mean2d, radius,
                              width, height, tile)
    pair_w = np.zeros(len(pairs))
    _max_weight(start, pairs, mean2d, conic, radius, opac, width, height, tile, pair_w)
    out = np.zeros(len(mean2d))
    np.maximum.at(out, pairs, pair_w)
    return out


def _cov_to_conic(cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def composite(splats: list[Splat2D], mode=Composite(), width: int = 64, height: int = 64,
              cutoff_sigma: float = CUTOFF_SIGMA) -> RenderOutput:
    """Render a depth-sorted list of :class:`Splat2D` in the requested mode."""
    if not splats:
        return RenderOutput(np.zeros((height, width, 3)), np.zeros((height, width)),
                            np.zeros((height, width)), np.zeros((height, width)),
                            np.zeros((height, width, 2)))
    depth = np.array([s.depth for s in splats])
    if np.any(np.diff(depth) < 0):
        raise ContractViolation("splats are not sorted by depth")
    mean2d = np.array([s.mean2d for s in splats], dtype=np.float64)
    cov = np.array([s.cov2d for s in splats], dtype=np.float64)
    opacity = np.array([s.opacity for s in splats])
    probs = np.array([s.probs.as_array() for s in splats])
    if isinstance(mode, SoftCategory):
        weight = probs[:, int(mode.category)]
    elif isinstance(mode, HardCategory):
        if np.any(hard_labels(probs) != int(mode.category)):
            raise ContractViolation("hard category render given splats of another category")
        weight = np.ones(len(splats))
    else:
        weight = np.ones(len(splats))
    lam = np.linalg.eigvalsh(cov)[:, -1]
    radius = cutoff_sigma * np.sqrt(lam)
    feats = np.concatenate([
        np.array([s.rgb for s in splats]), depth[:, None],
        np.array([s.brightness for s in splats])[:, None],
        np.array([s.flow2d for s in splats])], axis=1)
    out, alpha, _ = rasterize(mean2d, _cov_to_conic(cov), radius, np.arange(len(splats)),
                              weight * opacity, feats, width, height)
    return RenderOutput(out[..., :3], alpha, out[..., 3], out[..., 4], out[..., 5:7])
