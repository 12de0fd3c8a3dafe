"""``dpgs`` command line: synth, train, render and eval.

Exit codes: 0 success, 1 usage error, 2 format or I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .core import init_from_pointcloud
from .errors import DPGSError, FormatError, InvalidInput, IoError, NumericalError, UsageError
from .evaluation import MODES, GroundTruthModel, TrainedModel, evaluate_model, render_mode
from .io import read_json, write_flow, write_json, write_pfm, write_png
from .synth import SceneScript, generate, load_dataset
from .trainer import TrainConfig, Trainer, split_indices

logger = logging.getLogger("dpgs.cli")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_config(path) -> dict:
    if path is None:
        return {}
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return cfg


def cmd_synth(args) -> dict:
    try:
        script = SceneScript.from_dict(_read_config(args.config))
    except (InvalidInput, TypeError) as exc:
        raise FormatError(f"invalid scene script: {exc}") from exc
    summary = generate(script, args.seed, args.out)
    print(json.dumps(summary))
    return summary


def _train_config(args) -> TrainConfig:
    try:
        cfg = TrainConfig.from_dict(_read_config(args.config))
    except (InvalidInput, TypeError) as exc:
        raise FormatError(f"invalid training config: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args) -> dict:
    data = load_dataset(args.dataset)
    out = Path(args.out)
    if args.checkpoint:
        trainer = Trainer.from_checkpoint(ckpt_io.load(args.checkpoint), data.frames, out_dir=out)
    else:
        cfg = _train_config(args)
        trainer = Trainer(data.frames, init_from_pointcloud(data.points, data.colors), cfg, out_dir=out)
    final = trainer.run()
    info = {"step": final.meta["step"], "out": str(out), "gaussians": len(final.scene)}
    print(json.dumps(info))
    return info


def _load_model(args, data):
    if args.checkpoint:
        return TrainedModel(ckpt_io.load(args.checkpoint))
    if data.script is None:
        raise UsageError("without --checkpoint the dataset must contain script.json")
    return GroundTruthModel(data.script)


def cmd_render(args) -> Path:
    data = load_dataset(args.dataset)
    model = _load_model(args, data)
    k = args.frame
    if not 0 <= k < len(data.frames):
        raise UsageError(f"--frame must lie in 0..{len(data.frames) - 1}")
    f = data.frames[k]
    t = f.t if args.time is None else args.time
    nxt = data.frames[k + 1] if k + 1 < len(data.frames) else None
    if args.mode == "flow" and nxt is None:
        raise UsageError("flow needs a following frame")
    img = render_mode(model, args.mode, f.camera, t,
                      nxt.camera if nxt is not None else None, nxt.t if nxt is not None else None)
    out = Path(args.out)
    if args.mode == "flow":
        write_flow(out, img)
    elif args.mode == "brightness":
        write_pfm(out, img)
    else:
        write_png(out, np.clip(img, 0.0, 1.0))
    print(str(out))
    return out


def cmd_eval(args) -> dict:
    data = load_dataset(args.dataset)
    model = _load_model(args, data)
    holdout = model.cfg.holdout_every if isinstance(model, TrainedModel) else TrainConfig().holdout_every
    _, held = split_indices(len(data.frames), holdout)
    if args.frame is not None:
        held = [args.frame]
    report = evaluate_model(model, data, held)
    if args.out:
        write_json(args.out, report.metrics)
    print(json.dumps(report.metrics, sort_keys=True))
    print(report.table())
    return report.metrics


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpgs", description="Probabilistic Gaussian decomposition of dynamic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="scene script JSON (defaults apply to missing keys)")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("dataset")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--out", required=True, help="run directory (log and checkpoints)")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one view of a model")
    r.add_argument("dataset")
    r.add_argument("--checkpoint", help="trained checkpoint (default: ground truth from script.json)")
    r.add_argument("--mode", default="composite", choices=MODES)
    r.add_argument("--frame", type=int, default=0, help="camera and time of this frame")
    r.add_argument("--time", type=float, help="override the frame time")
    r.add_argument("--out", required=True, help="PNG (colour modes), PFM (brightness) or DPFL (flow)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score a model on the held-out frames")
    e.add_argument("dataset")
    e.add_argument("--checkpoint", help="trained checkpoint (default: ground truth from script.json)")
    e.add_argument("--frame", type=int, help="score this frame only")
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("choose a command: synth, train, render or eval")
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, IoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DPGSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
