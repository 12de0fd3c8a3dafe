"""Three-phase optimisation: probability warm-up, soft gating, hard gating.

Master parameters are float32 (what checkpoints store); every step lifts them
to float64, evaluates the pipeline and applies one Adam update. Frame order is
a pure function of ``(seed, epoch)``, so a run resumed from a checkpoint
replays exactly the steps an uninterrupted run would take.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .core import FrameRecord, GaussianScene
from .deformation import DeformationField
from .errors import InvalidInput, NumericalError
from .grad import Adam, exponential_lr, scaled_dilation_radius
from .io import write_json
from .losses import LossReport, LossWeights
from .pipeline import PipelineConfig, evaluate, prepare_targets, render_all, set_flow_target
from .projection import CUTOFF_SIGMA

logger = logging.getLogger(__name__)

STAGES = ("warmup", "soft", "hard")
MLP_PREFIXES = ("dec_obj", "dec_hand", "head")

DEFAULT_LRS = {
    "mu": 1.6e-4,
    "mu_final": 1.6e-6,
    "opacity_logit": 5e-2,
    "log_scale": 5e-3,
    "rot": 1e-3,
    "sh": 2.5e-3,
    "brightness": 5e-3,
    "cat_logits": 1e-2,
    "mlp": 1e-3,
    "planes": 1e-2,
}


@dataclass
class TrainConfig:
    warmup_iters: int = 200
    soft_iters: int = 2000
    hard_iters: int = 2000
    resolution: int = 128
    weights: LossWeights = field(default_factory=LossWeights)
    lrs: dict = field(default_factory=lambda: dict(DEFAULT_LRS))
    seed: int = 0
    checkpoint_every: int = 1000
    dilation_radius: int = 5          # at 128 px, scaled with resolution
    holdout_every: int = 8
    prior: tuple = (0.8, 0.1, 0.1)
    sh_degree: int = 1
    encoder_resolutions: tuple = (32, 64)
    encoder_channels: int = 16
    decoder_width: int = 64
    head_width: int = 32
    bounds_padding: float = 0.1
    cutoff_sigma: float = CUTOFF_SIGMA
    use_brightness: bool = True
    use_flow: bool = True
    use_occlusion_mask: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        lrs = dict(DEFAULT_LRS)
        lrs.update(self.lrs or {})
        self.lrs = lrs
        self.prior = tuple(float(p) for p in self.prior)
        self.encoder_resolutions = tuple(int(r) for r in self.encoder_resolutions)
        self.validate()

    def validate(self) -> None:
        for name in ("warmup_iters", "soft_iters", "hard_iters"):
            if int(getattr(self, name)) < 0:
                raise InvalidInput(f"{name} must be >= 0")
        if self.checkpoint_every < 0 or self.holdout_every < 0:
            raise InvalidInput("checkpoint_every and holdout_every must be >= 0")
        if not 0 <= self.sh_degree <= 3:
            raise InvalidInput("sh_degree must be in 0..3")
        unknown = set(self.lrs) - set(DEFAULT_LRS)
        if unknown:
            raise InvalidInput(f"unknown learning-rate keys {sorted(unknown)}")

    @property
    def total_iters(self) -> int:
        return self.warmup_iters + self.soft_iters + self.hard_iters

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prior"] = list(self.prior)
        d["encoder_resolutions"] = list(self.encoder_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInput(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def pipeline_config(self, height: int, width: int) -> PipelineConfig:
        return PipelineConfig(
            weights=self.weights,
            dilation_radius=scaled_dilation_radius(self.dilation_radius, height, width),
            cutoff_sigma=self.cutoff_sigma,
            use_brightness=self.use_brightness,
            use_flow=self.use_flow,
            use_occlusion_mask=self.use_occlusion_mask,
        )


def stage_of(step: int, cfg: TrainConfig) -> str:
    if step < 0:
        raise InvalidInput("step must be >= 0")
    if step < cfg.warmup_iters:
        return "warmup"
    if step < cfg.warmup_iters + cfg.soft_iters:
        return "soft"
    return "hard"


def split_indices(n_frames: int, holdout_every: int) -> tuple[list[int], list[int]]:
    """Train/held-out split: the frame in the middle of every block of ``holdout_every`` is held out."""
    if holdout_every <= 1:
        return list(range(n_frames)), []
    mid = holdout_every // 2
    held = [k for k in range(n_frames) if k % holdout_every == mid]
    train = [k for k in range(n_frames) if k % holdout_every != mid]
    return train, held


def scene_bounds(mu: np.ndarray, padding: float) -> np.ndarray:
    lo, hi = mu.min(axis=0), mu.max(axis=0)
    pad = padding * np.maximum(hi - lo, 1e-3)
    return np.stack([lo - pad, hi + pad])


def scene_extent(mu: np.ndarray) -> float:
    return float(0.5 * np.linalg.norm(mu.max(axis=0) - mu.min(axis=0)))


def make_field(cfg: TrainConfig, bounds) -> DeformationField:
    return DeformationField(bounds, cfg.encoder_resolutions, cfg.encoder_channels,
                            decoder_width=cfg.decoder_width, head_width=cfg.head_width,
                            seed=cfg.seed)


def build_optimizer(cfg: TrainConfig, extent: float) -> Adam:
    lr = cfg.lrs
    decay_steps = cfg.soft_iters + cfg.hard_iters
    mu_sched = exponential_lr(lr["mu"] * extent, lr["mu_final"] * extent, decay_steps)
    warm = cfg.warmup_iters
    lrs = {
        "mu": lambda step: mu_sched(step - warm),
        "rot": lr["rot"], "log_scale": lr["log_scale"], "opacity_logit": lr["opacity_logit"],
        "sh": lr["sh"], "brightness": lr["brightness"], "cat_logits": lr["cat_logits"],
    }
    for prefix in MLP_PREFIXES:
        lrs[prefix] = lr["mlp"]
    lrs["enc"] = lr["planes"]
    return Adam(lrs)


def trainable_names(stage: str, names) -> list[str]:
    """Warm-up touches only the category logits and the probability head."""
    if stage == "warmup":
        return [n for n in names if n == "cat_logits" or n.startswith("head.")]
    return list(names)


class Trainer:
    """Stateful driver; ``run`` advances to a target step and can be resumed."""

    def __init__(self, frames: list[FrameRecord], scene: GaussianScene, cfg: TrainConfig,
                 out_dir=None, *, _restore: Checkpoint | None = None):
        if not frames:
            raise InvalidInput("training needs at least one frame")
        self.frames = frames
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.sh_degree = scene.sh_degree
        self.time_range = tuple(scene.time_range)
        if _restore is None:
            mu = np.asarray(scene.mu, dtype=np.float64)
            self.bounds = scene_bounds(mu, cfg.bounds_padding)
            self.extent = scene_extent(mu)
            self.field = make_field(cfg, self.bounds)
            self.params = {k: np.array(v, dtype=np.float32) for k, v in scene.arrays().items()}
            self.params.update({k: np.array(v, dtype=np.float32) for k, v in self.field.params().items()})
            self.step = 0
            self.optimizer = build_optimizer(cfg, self.extent)
        else:
            meta = _restore.meta
            self.bounds = np.asarray(meta["bounds"], dtype=np.float64)
            self.extent = float(meta["extent"])
            self.field = make_field(cfg, self.bounds)
            self.params = {k: v.copy() for k, v in _restore.scene.astype(np.float32).arrays().items()}
            for k in self.field.params():
                if k not in _restore.tensors:
                    raise InvalidInput(f"checkpoint lacks network tensor {k}")
                self.params[k] = _restore.tensors[k].copy()
            self.step = int(meta["step"])
            self.optimizer = build_optimizer(cfg, self.extent)
            adam = {k: v.copy() for k, v in _restore.tensors.items() if k.startswith("adam.")}
            self.optimizer.load_state(adam, meta.get("adam_steps", {}))
        self._sync_field()

        h, w = frames[0].rgb.shape[:2]
        self.pcfg = cfg.pipeline_config(h, w)
        self.train_idx, self.heldout_idx = split_indices(len(frames), cfg.holdout_every)
        if not self.train_idx:
            raise InvalidInput("no training frames left after the held-out split")
        self._targets: dict[int, object] = {}
        self._last_good = ckpt_io.dumps(self.checkpoint())
        self._log_fh = None
        self.history: list[LossReport] = []

    # -- construction helpers ---------------------------------------------
    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, frames, cfg: TrainConfig | None = None, out_dir=None):
        cfg = cfg or TrainConfig.from_dict(ckpt.meta["config"])
        return cls(frames, ckpt.scene, cfg, out_dir, _restore=ckpt)

    def _sync_field(self) -> dict:
        p64 = {k: v.astype(np.float64) for k, v in self.params.items()}
        self.field.load_params({k: p64[k] for k in self.field.params()})
        return p64

    def scene(self) -> GaussianScene:
        return GaussianScene(**{k: self.params[k].copy() for k in GaussianScene.FIELDS},
                             sh_degree=self.sh_degree, time_range=self.time_range)

    def checkpoint(self) -> Checkpoint:
        tensors = {k: v.copy() for k, v in self.params.items() if k not in GaussianScene.FIELDS}
        tensors.update({k: v.copy() for k, v in self.optimizer.state_tensors().items()})
        meta = {
            "step": self.step,
            "adam_steps": dict(self.optimizer.t),
            "bounds": self.bounds.tolist(),
            "extent": self.extent,
            "time_range": list(self.time_range),
            "config": self.cfg.to_dict(),
        }
        return Checkpoint(self.scene(), tensors, meta)

    # -- data -----------------------------------------------------------------
    def frame_for_step(self, step: int) -> int:
        n = len(self.train_idx)
        epoch, pos = divmod(step, n)
        perm = np.random.default_rng([self.cfg.seed, epoch]).permutation(n)
        return self.train_idx[int(perm[pos])]

    def targets(self, k: int):
        tg = self._targets.get(k)
        if tg is None:
            nxt = self.frames[k + 1] if k + 1 < len(self.frames) else None
            tg = prepare_targets(self.frames[k], nxt, self.pcfg)
            self._targets[k] = tg
        if tg.next_camera is not None and self.frames[k].depth is None:
            # no depth on disk: refresh the camera-flow target from the current render
            frame = self.frames[k]
            p64 = {n: self.params[n].astype(np.float64) for n in GaussianScene.FIELDS}
            r = render_all(p64, None, frame.camera, frame.t, "hard",
                           cutoff=self.cfg.cutoff_sigma, sh_degree=self.sh_degree)
            comp = r["composite"]
            depth = comp.depth_map / np.maximum(comp.alpha_map, 1e-8)
            set_flow_target(tg, depth, comp.alpha_map)
        return tg

    # -- optimisation -------------------------------------------------------
    def boundaries(self) -> set[int]:
        c = self.cfg
        return {c.warmup_iters, c.warmup_iters + c.soft_iters, c.total_iters} - {0}

    def train_step(self) -> LossReport:
        stage = stage_of(self.step, self.cfg)
        k = self.frame_for_step(self.step)
        tg = self.targets(k)
        p64 = self._sync_field()
        res = evaluate(p64, self.field, tg, stage, self.sh_degree, self.pcfg)
        names = trainable_names(stage, sorted(res.grads))
        self.optimizer.step(self.params, res.grads, names, global_step=self.step)
        report = res.report
        report.stage, report.step = stage, self.step
        self.step += 1
        return report

    def run(self, until: int | None = None, callback=None) -> Checkpoint:
        until = self.cfg.total_iters if until is None else min(int(until), self.cfg.total_iters)
        self._open_log()
        try:
            while self.step < until:
                try:
                    report = self.train_step()
                except NumericalError as exc:
                    self._abort(exc)
                    raise
                self.history.append(report)
                self._write_log(report)
                if callback is not None:
                    callback(self, report)
                if self.step % 100 == 0:
                    logger.info("step %d [%s] loss %.5f", report.step, report.stage, report.total)
                if self._checkpoint_due():
                    self._save_checkpoint()
        finally:
            self._close_log()
        return self.checkpoint()

    def _checkpoint_due(self) -> bool:
        every = self.cfg.checkpoint_every
        return (every > 0 and self.step % every == 0) or self.step in self.boundaries()

    def _save_checkpoint(self) -> None:
        ck = self.checkpoint()
        self._last_good = ckpt_io.dumps(ck)
        if self.out_dir is not None:
            ckpt_io.save(self.out_dir / f"ckpt_{self.step:06d}.dpgs", ck)
            if self.step == self.cfg.total_iters:
                ckpt_io.save(self.out_dir / "final.dpgs", ck)

    def _abort(self, exc: NumericalError) -> None:
        failed_step = self.step
        good = ckpt_io.loads(self._last_good)
        restored = Trainer.from_checkpoint(good, self.frames, self.cfg)
        self.params, self.optimizer, self.step = restored.params, restored.optimizer, restored.step
        self._sync_field()
        logger.error("numerical failure at step %d: %s; restored step %d", failed_step, exc, self.step)
        if self.out_dir is not None:
            write_json(self.out_dir / "diagnostic.json", {
                "failed_step": failed_step,
                "stage": stage_of(failed_step, self.cfg),
                "frame": self.frame_for_step(failed_step),
                "error": str(exc),
                "gaussian_index": getattr(exc, "index", None),
                "restored_step": self.step,
            })
            ckpt_io.save(self.out_dir / "last_good.dpgs", good)

    # -- CSV log ----------------------------------------------------------------
    def _open_log(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "train_log.csv"
        fresh = not path.exists() or path.stat().st_size == 0
        self._log_fh = open(path, "a", newline="")
        self._log = csv.writer(self._log_fh)
        if fresh:
            self._log.writerow(LossReport.csv_header())

    def _write_log(self, report: LossReport) -> None:
        if self._log_fh is not None:
            self._log.writerow(report.csv_row())

    def _close_log(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None


def train(frames: list[FrameRecord], scene: GaussianScene, cfg: TrainConfig | None = None,
          out_dir=None, callback=None) -> Checkpoint:
    """Run all three phases from scratch and return the final checkpoint."""
    cfg = cfg or TrainConfig()
    return Trainer(frames, scene, cfg, out_dir).run(callback=callback)
