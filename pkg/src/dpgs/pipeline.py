"""One training sample end to end: deform, render every view, score, backpropagate.

``evaluate`` is the single differentiable path used by the trainer and by the
finite-difference suite. Parameters arrive as a flat ``{name: array}`` dict
holding both the Gaussian fields and the deformation network tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (CATEGORIES, Category, FrameRecord, GaussianScene, PinholeCamera, hard_labels,
                   sigmoid, softmax)
from .deformation import DeformationField, apply_delta, apply_delta_backward
from .errors import NumericalError
from .grad import apply_occlusion_gradient_mask, dilate
from .losses import (LossReport, LossWeights, brightness_activation, camera_flow,
                     dynamic_flow_target, entropy_terms, flow_loss, masked_alpha_loss,
                     masked_rgb_loss, ssim_loss, total_loss)
from .projection import CUTOFF_SIGMA, project_backward, project_gaussians, project_points
from .raster import (RenderOutput, depth_sort, rasterize, rasterize_layers,
                     rasterize_layers_backward)
from .sh import sh_to_rgb, sh_to_rgb_backward

SCENE_FIELDS = GaussianScene.FIELDS
GEOMETRY_FIELDS = ("mu", "rot", "log_scale", "opacity_logit", "sh", "brightness")
CATEGORY_CHANNELS = 5


@dataclass
class PipelineConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    dilation_radius: int = 5
    cutoff_sigma: float = CUTOFF_SIGMA
    use_brightness: bool = True
    use_flow: bool = True
    use_occlusion_mask: bool = True


@dataclass
class FrameTargets:
    """Everything a training step needs about one frame, precomputed once."""

    frame: FrameRecord
    gt: np.ndarray
    masks: dict                      # category -> float mask
    occ_keep: dict                   # category -> 1 - dilate(other branches)
    next_camera: PinholeCamera | None = None
    t_next: float | None = None
    flow_target: np.ndarray | None = None
    flow_valid: np.ndarray | None = None


def background_mask(mask_hand, mask_obj, radius: int) -> np.ndarray:
    """Background supervision region: outside the dilated hand/object masks."""
    return 1.0 - dilate((mask_hand > 0) | (mask_obj > 0), radius)


def prepare_targets(frame: FrameRecord, next_frame: FrameRecord | None,
                    cfg: PipelineConfig) -> FrameTargets:
    r = cfg.dilation_radius
    hand = (frame.mask_hand > 0).astype(np.float64)
    obj = (frame.mask_obj > 0).astype(np.float64)
    masks = {Category.BG: background_mask(hand, obj, r), Category.OBJ: obj, Category.HAND: hand}
    occ = {Category.BG: np.maximum(hand, obj), Category.OBJ: hand, Category.HAND: obj}
    occ_keep = {c: 1.0 - dilate(occ[c], r) for c in CATEGORIES}
    tg = FrameTargets(frame, np.asarray(frame.rgb, dtype=np.float64), masks, occ_keep)
    if next_frame is not None:
        tg.next_camera = next_frame.camera
        tg.t_next = float(next_frame.t)
        if frame.depth is not None:
            set_flow_target(tg, frame.depth, None)
    return tg


def set_flow_target(tg: FrameTargets, depth: np.ndarray, alpha: np.ndarray | None) -> None:
    """Dynamic-flow target from a depth map; only dynamic (non-background) pixels supervise."""
    fcam, valid = camera_flow(depth, tg.frame.camera, tg.next_camera, alpha)
    tg.flow_target = dynamic_flow_target(tg.frame.flow_gt, fcam)
    tg.flow_valid = valid & (tg.masks[Category.BG] < 0.5)


# -- shared forward pieces -----------------------------------------------------

def split_params(params: dict) -> tuple[dict, dict]:
    scene = {k: params[k] for k in SCENE_FIELDS}
    net = {k: v for k, v in params.items() if k not in SCENE_FIELDS}
    return scene, net


def _splats(arrays, cam: PinholeCamera, sh_degree: int, cutoff: float):
    proj = project_gaussians(arrays["mu"], arrays["rot"], arrays["log_scale"], cam, cutoff)
    rgb, sh_cache = sh_to_rgb(arrays["sh"], arrays["mu"], cam.center, sh_degree)
    opacity = sigmoid(arrays["opacity_logit"])
    vis = np.flatnonzero(proj.visible)
    order = vis[depth_sort(proj.depth[vis])]
    return proj, rgb, sh_cache, opacity, order


def _render(proj, order, opac, feats, cam):
    """Rasterize with per-layer opacities ``(N, S)``, or a single layer for ``(N,)``."""
    if np.ndim(opac) == 1:
        return rasterize(proj.mean2d, proj.conic, proj.radius, order, opac, feats,
                         cam.width, cam.height)
    # category layers carry rgb, depth and brightness; flow only matters in the composite
    nchan = [feats.shape[1]] + [CATEGORY_CHANNELS] * (np.shape(opac)[1] - 1)
    return rasterize_layers(proj.mean2d, proj.conic, proj.radius, order, opac, feats,
                            cam.width, cam.height, layer_channels=nchan)


def category_weights(mode: str, probs: np.ndarray, labels: np.ndarray, category: Category):
    if mode == "soft":
        return probs[:, int(category)]
    return (labels == int(category)).astype(np.float64)


def render_all(scene: GaussianScene | dict, field: DeformationField | None, cam: PinholeCamera,
               t: float, mode: str = "hard", next_camera: PinholeCamera | None = None,
               t_next: float | None = None, cutoff: float = CUTOFF_SIGMA,
               sh_degree: int | None = None) -> dict:
    """Forward-only renders: ``composite`` plus one :class:`RenderOutput` per category.

    With ``field=None`` the scene is rendered undeformed and every Gaussian keeps
    its stored probabilities (the static render).
    """
    if isinstance(scene, GaussianScene):
        sh_degree = scene.sh_degree
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in scene.arrays().items()}
    else:
        arrays = {k: np.asarray(scene[k], dtype=np.float64) for k in SCENE_FIELDS}
    if field is None:
        probs = softmax(arrays["cat_logits"])
        labels = hard_labels(probs)
        deformed = {k: arrays[k] for k in GEOMETRY_FIELDS}
        mu_next = deformed["mu"]
    else:
        res = field.forward(arrays["mu"], arrays["cat_logits"], t, mode)
        probs, labels = res.probs, res.labels
        deformed = apply_delta(arrays, res.delta)
        mu_next = deformed["mu"]
        if next_camera is not None and t_next is not None:
            res_n = field.forward(arrays["mu"], arrays["cat_logits"], t_next, mode,
                                  labels_from=res if mode == "hard" else None)
            mu_next = arrays["mu"] + res_n.delta[:, :3]
    proj, rgb, _, opacity, order = _splats(deformed, cam, sh_degree, cutoff)
    if next_camera is not None:
        uv_a, _, _ = project_points(deformed["mu"], next_camera)
        uv_b, _, _ = project_points(mu_next, next_camera)
        flow2d = uv_b - uv_a
    else:
        flow2d = np.zeros((len(opacity), 2))
    feats = np.concatenate([rgb, proj.depth[:, None], deformed["brightness"][:, None], flow2d], 1)
    layer_opac = np.stack([opacity] + [category_weights(mode, probs, labels, c) * opacity
                                       for c in CATEGORIES], axis=1)
    layers, alpha, _ = _render(proj, order, layer_opac, feats, cam)
    outputs = {"composite": _as_output(layers[0], alpha[0])}
    for c in CATEGORIES:
        outputs[c] = _as_output(layers[1 + int(c)], alpha[1 + int(c)])
    outputs["probs"] = probs
    outputs["labels"] = labels
    return outputs


def _as_output(out, alpha) -> RenderOutput:
    return RenderOutput(out[..., 0:3], alpha, out[..., 3], out[..., 4], out[..., 5:7])


def background_image(render: RenderOutput, use_brightness: bool = True) -> np.ndarray:
    """Background category image modulated by its activated brightness map."""
    if not use_brightness:
        return render.image
    return render.image * brightness_activation(render.brightness_raw)[..., None]


# -- differentiable step -------------------------------------------------------

@dataclass
class StepResult:
    report: LossReport
    grads: dict
    renders: dict
    labels: np.ndarray
    probs: np.ndarray


def evaluate(params: dict, field: DeformationField, tg: FrameTargets, stage: str,
             sh_degree: int, cfg: PipelineConfig | None = None, need_grad: bool = True) -> StepResult:
    """Loss report and gradients for every entry of ``params``.

    ``stage`` is ``warmup`` or ``soft`` (soft gating and probability-weighted
    category renders) or ``hard`` (argmax routing and subset renders; the
    category weights pass their gradient straight through to the probabilities).
    ``field`` must already hold the network tensors found in ``params``.
    """
    cfg = cfg or PipelineConfig()
    mode = "hard" if stage == "hard" else "soft"
    frame = tg.frame
    cam = frame.camera
    H, W = cam.height, cam.width
    arrays = {k: params[k] for k in SCENE_FIELDS}

    res = field.forward(arrays["mu"], arrays["cat_logits"], frame.t, mode)
    deformed = apply_delta(arrays, res.delta)
    probs, labels = res.probs, res.labels

    use_flow = (cfg.use_flow and cfg.weights.flow > 0 and tg.next_camera is not None
                and tg.flow_target is not None and bool(np.any(tg.flow_valid)))
    res_n = None
    if use_flow:
        res_n = field.forward(arrays["mu"], arrays["cat_logits"], tg.t_next, mode,
                              labels_from=res if mode == "hard" else None)
        mu_next = arrays["mu"] + res_n.delta[:, :3]
        uv_a, Ja, _ = project_points(deformed["mu"], tg.next_camera)
        uv_b, Jb, _ = project_points(mu_next, tg.next_camera)
        flow2d = uv_b - uv_a
    else:
        flow2d = np.zeros((len(probs), 2))

    proj, rgb, sh_cache, opacity, order = _splats(deformed, cam, sh_degree, cfg.cutoff_sigma)
    feats = np.concatenate([rgb, proj.depth[:, None], deformed["brightness"][:, None], flow2d], 1)
    cat_w = {c: category_weights(mode, probs, labels, c) for c in CATEGORIES}
    layer_opac = np.stack([opacity] + [cat_w[c] * opacity for c in CATEGORIES], axis=1)
    layers, layer_alpha, ctx = _render(proj, order, layer_opac, feats, cam)
    comp_out, comp_alpha = layers[0], layer_alpha[0]
    cat = {c: (cat_w[c], layers[1 + int(c)], layer_alpha[1 + int(c)]) for c in CATEGORIES}

    comps = {}
    gt = tg.gt
    comps["l1"], d_comp_img = _l1(comp_out[..., 0:3], gt)
    d_comp = np.zeros_like(comp_out)
    d_comp[..., 0:3] = cfg.weights.l1 * d_comp_img
    if use_flow:
        comps["flow"], d_flow = flow_loss(comp_out[..., 5:7], tg.flow_target, tg.flow_valid, grad=True)
        d_comp[..., 5:7] = cfg.weights.flow * d_flow
    else:
        comps["flow"] = 0.0

    d_cat = {}
    images = {}
    for c in CATEGORIES:
        w, out, alpha = cat[c]
        name = c.name.lower()
        raw = out[..., 0:3]
        if c == Category.BG and cfg.use_brightness:
            act, slope = brightness_activation(out[..., 4], grad=True)
            image = raw * act[..., None]
        else:
            image = raw
        images[c] = image
        m = tg.masks[c]
        comps[f"rgb_{name}"], d_img = masked_rgb_loss(image, gt, m, grad=True)
        d_img = cfg.weights.rgb * d_img
        s_val, d_s = ssim_loss(image * m[..., None], gt * m[..., None], grad=True)
        comps[f"ssim_{name}"] = s_val
        d_img = d_img + cfg.weights.ssim * d_s * m[..., None]
        comps[f"alpha_{name}"], d_alpha = masked_alpha_loss(alpha, m, grad=True)
        d_alpha = cfg.weights.alpha * d_alpha
        if cfg.use_occlusion_mask:
            d_img = d_img * tg.occ_keep[c][..., None]
            d_alpha = d_alpha * tg.occ_keep[c]
        d_out = np.zeros_like(out)
        if c == Category.BG and cfg.use_brightness:
            d_out[..., 0:3] = d_img * act[..., None]
            d_out[..., 4] = np.sum(d_img * raw, axis=-1) * slope
        else:
            d_out[..., 0:3] = d_img
        d_cat[c] = (d_out, d_alpha)

    ent, d_ent = entropy_terms(probs, grad=True)
    for c in CATEGORIES:
        comps[f"entropy_{c.name.lower()}"] = float(ent[int(c)])
    report = total_loss(comps, cfg.weights)
    if not np.isfinite(report.total):
        raise NumericalError("non-finite loss")
    renders = {"composite": _as_output(comp_out, comp_alpha)}
    for c in CATEGORIES:
        _, out, alpha = cat[c]
        renders[c] = RenderOutput(images[c], alpha, out[..., 3], out[..., 4], out[..., 5:7])
    if not need_grad:
        return StepResult(report, {}, renders, labels, probs)

    # -- adjoint ------------------------------------------------------------
    n = len(probs)
    d_rgb = np.zeros((n, 3))
    d_bright = np.zeros(n)
    d_opacity = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_probs = cfg.weights.entropy * d_ent

    d_layers = np.zeros_like(layers)
    d_layer_alpha = np.zeros_like(layer_alpha)
    d_layers[0] = d_comp
    for c in CATEGORIES:
        d_layers[1 + int(c)], d_layer_alpha[1 + int(c)] = d_cat[c]
    df, dop, dm, dc = rasterize_layers_backward(ctx, d_layers, d_layer_alpha)
    d_rgb += df[:, 0:3]
    d_bright += df[:, 4]
    d_flow2d = df[:, 5:7]
    d_opacity += dop[:, 0]
    d_mean2d += dm
    d_conic += dc
    for c in CATEGORIES:
        d_opacity += dop[:, 1 + int(c)] * cat_w[c]
        d_probs[:, int(c)] += dop[:, 1 + int(c)] * opacity

    g_def = {}
    g_mu, g_rot, g_ls = project_backward(proj, d_mean2d, d_conic)
    g_sh, g_mu_view = sh_to_rgb_backward(d_rgb, sh_cache)
    g_def["mu"] = g_mu + g_mu_view
    g_def["rot"] = g_rot
    g_def["log_scale"] = g_ls
    g_def["opacity_logit"] = d_opacity * opacity * (1.0 - opacity)
    g_def["sh"] = g_sh
    g_def["brightness"] = d_bright
    if use_flow:
        g_def["mu"] = g_def["mu"] - np.einsum("nij,ni->nj", Ja, d_flow2d)
        g_mu_next = np.einsum("nij,ni->nj", Jb, d_flow2d)

    grads = {k: g_def[k].copy() for k in GEOMETRY_FIELDS}
    net_grads, d_mu_enc, d_logits = field.backward(res, apply_delta_backward(g_def), d_probs)
    grads["mu"] += d_mu_enc
    grads["cat_logits"] = d_logits
    if use_flow:
        d_delta_n = np.zeros_like(res_n.delta)
        d_delta_n[:, 0:3] = g_mu_next
        g_n, d_mu_n, d_logits_n = field.backward(res_n, d_delta_n)
        grads["mu"] += g_mu_next + d_mu_n
        grads["cat_logits"] += d_logits_n
        for k, v in g_n.items():
            net_grads[k] = net_grads[k] + v
    grads.update(net_grads)
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            bad = np.argwhere(~np.isfinite(v))
            raise NumericalError(f"non-finite gradient in {k}", index=int(bad[0, 0]))
    return StepResult(report, grads, renders, labels, probs)


def _l1(img, gt):
    diff = img - gt
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size
