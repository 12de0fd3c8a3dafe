"""Rendering trained (or ground-truth) models and scoring them on held-out frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .core import Category, GaussianScene, PinholeCamera
from .deformation import DeformationField
from .errors import UsageError
from .metrics import IoUAccumulator, label_accuracy, psnr, ssim
from .pipeline import background_image, background_mask, render_all
from .projection import CUTOFF_SIGMA
from .synth import Dataset, GroundTruth, SceneScript, build_ground_truth, gt_scene_at

logger = logging.getLogger(__name__)

MODES = ("composite", "bg", "obj", "hand", "brightness", "flow")
_MODE_CATEGORY = {"bg": Category.BG, "obj": Category.OBJ, "hand": Category.HAND}


class TrainedModel:
    """A checkpoint made renderable: float64 scene plus a deformation field."""

    def __init__(self, ckpt: Checkpoint):
        from .trainer import TrainConfig, make_field

        cfg = TrainConfig.from_dict(ckpt.meta["config"])
        self.cutoff = cfg.cutoff_sigma
        self.use_brightness = cfg.use_brightness
        self.scene = ckpt.scene.astype(np.float64)
        self.field: DeformationField = make_field(cfg, np.asarray(ckpt.meta["bounds"]))
        self.field.load_params({k: ckpt.tensors[k].astype(np.float64) for k in self.field.params()})
        self.step = int(ckpt.meta.get("step", 0))
        self.mode = "hard" if ckpt.meta.get("step", 0) > cfg.warmup_iters + cfg.soft_iters else "soft"
        self.cfg = cfg

    def renders(self, cam: PinholeCamera, t: float, next_cam=None, t_next=None) -> dict:
        return render_all(self.scene, self.field, cam, t, self.mode, next_cam, t_next, cutoff=self.cutoff)

    def probs_at(self, t: float) -> np.ndarray:
        return self.field.forward(self.scene.mu, self.scene.cat_logits, t, self.mode).probs


class GroundTruthModel:
    """The generator's dense Gaussian set posed analytically at each time."""

    use_brightness = False

    def __init__(self, script: SceneScript):
        self.script = script
        self.gt: GroundTruth = build_ground_truth(script)

    def renders(self, cam: PinholeCamera, t: float, next_cam=None, t_next=None) -> dict:
        scene = gt_scene_at(self.script, self.gt, t)
        out = render_all(scene, None, cam, t, "hard", cutoff=CUTOFF_SIGMA)
        if next_cam is not None and t_next is not None:
            moved = gt_scene_at(self.script, self.gt, t_next)
            disp = next_cam.project(moved.mu) - next_cam.project(scene.mu)
            out["composite"].flow_map = _splat_feature(scene, cam, disp)
        return out

    def probs_at(self, t: float) -> np.ndarray:
        return np.eye(3)[self.gt.label]


def _splat_feature(scene: GaussianScene, cam: PinholeCamera, feat: np.ndarray) -> np.ndarray:
    from .pipeline import _render, _splats

    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in scene.arrays().items()}
    proj, _, _, opacity, order = _splats(arrays, cam, scene.sh_degree, CUTOFF_SIGMA)
    out, _, _ = _render(proj, order, opacity, feat, cam)
    return out


def render_mode(model, mode: str, cam: PinholeCamera, t: float, next_cam=None, t_next=None) -> np.ndarray:
    """One export image: H x W x 3 for colour modes, H x W for brightness, H x W x 2 for flow."""
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose one of {', '.join(MODES)}")
    out = model.renders(cam, t, next_cam if mode == "flow" else None, t_next if mode == "flow" else None)
    if mode == "composite":
        return out["composite"].image
    if mode == "flow":
        return out["composite"].flow_map
    bg = out[Category.BG]
    if mode == "brightness":
        return bg.brightness_raw
    if mode == "bg":
        return background_image(bg, model.use_brightness)
    return out[_MODE_CATEGORY[mode]].image


@dataclass
class EvalReport:
    metrics: dict

    def table(self) -> str:
        rows = [f"{'metric':<28}{'value':>12}"]
        for k, v in self.metrics.items():
            if isinstance(v, float):
                rows.append(f"{k:<28}{v:>12.4f}")
            elif v is not None and not isinstance(v, (list, dict)):
                rows.append(f"{k:<28}{v!s:>12}")
        return "\n".join(rows)


def evaluate_model(model, dataset: Dataset, frame_ids, dilation_radius: int = 5,
                   static_times=(0.0, 0.7)) -> EvalReport:
    """Held-out image quality per mode, Gaussian label accuracy and mask IoU."""
    frame_ids = list(frame_ids)
    scores = {m: ([], []) for m in ("composite", "bg", "obj", "hand")}
    ious = {Category.OBJ: IoUAccumulator(), Category.HAND: IoUAccumulator()}
    for k in frame_ids:
        f = dataset.frames[k]
        out = model.renders(f.camera, f.t)
        gt = f.rgb
        masks = {Category.BG: background_mask(f.mask_hand, f.mask_obj, dilation_radius),
                 Category.OBJ: f.mask_obj, Category.HAND: f.mask_hand}
        images = {"composite": out["composite"].image,
                  "bg": background_image(out[Category.BG], model.use_brightness),
                  "obj": out[Category.OBJ].image, "hand": out[Category.HAND].image}
        for mode, img in images.items():
            if mode == "composite":
                a, b = img, gt
            else:
                m = masks[_MODE_CATEGORY[mode]][..., None]
                a, b = img * m, gt * m
            scores[mode][0].append(psnr(np.clip(a, 0, 1), b))
            scores[mode][1].append(ssim(np.clip(a, 0, 1), b))
        for c, acc in ious.items():
            acc.add(out[c].alpha_map >= 0.5, masks[c])
    metrics: dict = {"frames": len(frame_ids)}
    for mode, (p, s) in scores.items():
        metrics[f"psnr_{mode}"] = float(np.mean(p)) if p else None
        metrics[f"ssim_{mode}"] = float(np.mean(s)) if s else None
    metrics["iou_obj"] = ious[Category.OBJ].value()
    metrics["iou_hand"] = ious[Category.HAND].value()
    metrics["label_accuracy"] = None
    if dataset.labels is not None and isinstance(model, TrainedModel) and len(dataset.labels) == len(model.scene):
        times = [dataset.frames[k].t for k in frame_ids] or [0.0]
        probs = np.mean([model.probs_at(t) for t in times], axis=0)
        metrics["label_accuracy"] = label_accuracy(np.argmax(probs, axis=1), dataset.labels)
    cam = dataset.frames[0].camera
    a = render_mode(model, "bg", cam, static_times[0])
    b = render_mode(model, "bg", cam, static_times[1])
    metrics["bg_static_max_diff"] = float(np.max(np.abs(a - b)))
    return EvalReport(metrics)

