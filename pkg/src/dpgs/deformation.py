"""Category-specific deformation branches, probability head and gating."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AugmentedGaussian, Category, GaussianScene, hard_labels, softmax, softmax_backward
from .hexplane import HexPlaneEncoder
from .nn import MLP

DELTA_DIM = 15
HEAD_SCALE = 1.0
# In the hard stage the probability head reads features at this fixed time, so a
# Gaussian's exclusive category (and therefore the background render) cannot
# change from one frame to the next.
LABEL_TIME = 0.0
DYNAMIC = (Category.OBJ, Category.HAND)
BRANCH_NAMES = {Category.OBJ: "dec_obj", Category.HAND: "dec_hand"}


@dataclass
class DeformationDelta:
    d_mu: np.ndarray
    d_rot: np.ndarray
    d_scale: np.ndarray
    d_opacity: np.ndarray
    d_color: np.ndarray
    d_brightness: np.ndarray

    @classmethod
    def from_array(cls, a: np.ndarray) -> "DeformationDelta":
        a = np.asarray(a)
        return cls(a[..., 0:3], a[..., 3:7], a[..., 7:10], a[..., 10], a[..., 11:14], a[..., 14])

    def as_array(self) -> np.ndarray:
        parts = [self.d_mu, self.d_rot, self.d_scale, np.asarray(self.d_opacity)[..., None],
                 self.d_color, np.asarray(self.d_brightness)[..., None]]
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=-1)


@dataclass
class DeformResult:
    """Output of :meth:`DeformationField.forward` plus the tape for its adjoint."""

    mode: str
    feats: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    delta: np.ndarray
    branch_out: dict
    cache: tuple


def apply_delta(arrays: dict[str, np.ndarray], delta: np.ndarray) -> dict[str, np.ndarray]:
    """``G' = G + dG`` fieldwise; the colour offset only touches the DC band."""
    sh = arrays["sh"].copy()
    sh[:, 0, :] += delta[:, 11:14]
    return {
        "mu": arrays["mu"] + delta[:, 0:3],
        "rot": arrays["rot"] + delta[:, 3:7],
        "log_scale": arrays["log_scale"] + delta[:, 7:10],
        "opacity_logit": arrays["opacity_logit"] + delta[:, 10],
        "sh": sh,
        "brightness": arrays["brightness"] + delta[:, 14],
    }


def apply_delta_backward(grads: dict[str, np.ndarray]) -> np.ndarray:
    """Gradient on the packed delta given gradients on the deformed fields."""
    n = len(grads["mu"])
    d = np.zeros((n, DELTA_DIM))
    d[:, 0:3] = grads["mu"]
    d[:, 3:7] = grads["rot"]
    d[:, 7:10] = grads["log_scale"]
    d[:, 10] = grads["opacity_logit"]
    d[:, 11:14] = grads["sh"][:, 0, :]
    d[:, 14] = grads["brightness"]
    return d


class DeformationField:
    """Shared encoder, one decoder per dynamic category and the probability head.

    The background branch is the identity and owns no parameters.
    """

    def __init__(self, bounds, resolutions=(32, 64), channels=16, decoder_width=64,
                 decoder_depth=2, head_width=32, head_depth=2, seed=0):
        rng = np.random.default_rng(seed)
        self.encoder = HexPlaneEncoder(bounds, resolutions, channels, rng)
        d = self.encoder.out_dim
        self.decoders = {
            c: MLP([d] + [decoder_width] * decoder_depth + [DELTA_DIM], rng) for c in DYNAMIC
        }
        self.head = MLP([d] + [head_width] * head_depth + [3], rng)
        self.soft_calls = 0
        self.hard_calls = 0

    # -- parameters -------------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        out = self.encoder.params("enc")
        for c in DYNAMIC:
            out.update(self.decoders[c].params(BRANCH_NAMES[c]))
        out.update(self.head.params("head"))
        return out

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        self.encoder.load_params(params, "enc")
        for c in DYNAMIC:
            self.decoders[c].load_params(BRANCH_NAMES[c], params)
        self.head.load_params("head", params)

    # -- single-Gaussian / batched convenience API ------------------------
    def encode(self, g: AugmentedGaussian | np.ndarray, t: float) -> np.ndarray:
        mu = g.mu if isinstance(g, AugmentedGaussian) else np.asarray(g)
        out = self.encoder(np.atleast_2d(mu).astype(np.float64), t)
        return out[0] if np.ndim(mu) == 1 else out

    def deform_branch(self, category: Category, mu: np.ndarray, t: float) -> np.ndarray:
        mu2 = np.atleast_2d(mu)
        if Category(category) == Category.BG:
            out = np.zeros((len(mu2), DELTA_DIM))
        else:
            out = self.decoders[Category(category)](self.encoder(mu2, t))
        return out[0] if np.ndim(mu) == 1 else out

    def update_probs(self, scene: GaussianScene, t: float) -> np.ndarray:
        """Updated logits: stored logits plus the head's logit-space offset."""
        return scene.cat_logits + HEAD_SCALE * self.head(self.encoder(scene.mu, t))

    def soft_gate(self, scene: GaussianScene, t: float) -> np.ndarray:
        return self.forward(scene.mu, scene.cat_logits, t, "soft").delta

    def hard_gate(self, scene: GaussianScene, t: float) -> np.ndarray:
        return self.forward(scene.mu, scene.cat_logits, t, "hard").delta

    # -- differentiable path ----------------------------------------------
    def forward(self, mu: np.ndarray, cat_logits: np.ndarray, t: float, mode: str,
                labels_from: DeformResult | None = None) -> DeformResult:
        """Deform at time ``t``.

        In hard mode ``labels_from`` may pass an earlier hard result for the same
        Gaussians and parameters; its time-independent probabilities are reused.
        """
        if mode not in ("soft", "hard"):
            raise ValueError(f"unknown gating mode {mode!r}")
        feats, enc_cache = self.encoder.encode(mu, t)
        if mode == "hard" and labels_from is not None:
            _, head_acts, head_cache = labels_from.cache
            probs, labels = labels_from.probs, labels_from.labels
        else:
            if mode == "hard":
                head_feats, head_cache = self.encoder.encode(mu, LABEL_TIME)
            else:
                head_feats, head_cache = feats, None
            head_out, head_acts = self.head.forward(head_feats)
            probs = softmax(cat_logits + HEAD_SCALE * head_out)
            labels = hard_labels(probs)
        n = len(mu)
        delta = np.zeros((n, DELTA_DIM))
        branch_out = {}
        if mode == "soft":
            self.soft_calls += 1
            for c in DYNAMIC:
                out, acts = self.decoders[c].forward(feats)
                branch_out[c] = (out, acts, None)
                delta += probs[:, int(c), None] * out
        else:
            self.hard_calls += 1
            for c in DYNAMIC:
                rows = np.flatnonzero(labels == int(c))
                out, acts = self.decoders[c].forward(feats[rows])
                branch_out[c] = (out, acts, rows)
                delta[rows] = out
        return DeformResult(mode, feats, probs, labels, delta, branch_out,
                            (enc_cache, head_acts, head_cache))

    def backward(self, res: DeformResult, d_delta: np.ndarray, d_probs: np.ndarray | None = None):
        """Returns ``(grads, d_mu, d_cat_logits)`` for a :class:`DeformResult`."""
        enc_cache, head_acts, head_cache = res.cache
        d_feats = np.zeros_like(res.feats)
        d_p = np.zeros_like(res.probs) if d_probs is None else d_probs.copy()
        grads = {}
        for c in DYNAMIC:
            out, acts, rows = res.branch_out[c]
            name = BRANCH_NAMES[c]
            if rows is None:
                d_out = res.probs[:, int(c), None] * d_delta
                d_p[:, int(c)] += np.sum(d_delta * out, axis=1)
                dx, g = self.decoders[c].backward(d_out, acts, name)
                d_feats += dx
            else:
                dx, g = self.decoders[c].backward(d_delta[rows], acts, name)
                d_feats[rows] += dx
            grads.update(g)
        d_logits = softmax_backward(res.probs, d_p)
        if head_cache is not None and not d_logits.any():
            # hard mode without a probability gradient: the head path contributes nothing
            grads.update({k: np.zeros_like(v) for k, v in self.head.params("head").items()})
            g_enc, d_mu = self.encoder.backward(d_feats, enc_cache, "enc")
            grads.update(g_enc)
            return grads, d_mu, d_logits
        dx, g = self.head.backward(HEAD_SCALE * d_logits, head_acts, "head")
        grads.update(g)
        if head_cache is None:
            d_feats += dx
        g_enc, d_mu = self.encoder.backward(d_feats, enc_cache, "enc")
        if head_cache is not None:
            g_head_enc, d_mu_head = self.encoder.backward(dx, head_cache, "enc")
            for k, v in g_head_enc.items():
                g_enc[k] = g_enc[k] + v
            d_mu = d_mu + d_mu_head
        grads.update(g_enc)
        return grads, d_mu, d_logits
