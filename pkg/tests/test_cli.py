import json

import numpy as np
import pytest

from dpgs import cli
from dpgs.errors import NumericalError
from dpgs.evaluation import MODES
from dpgs.io import read_flow, read_pfm, read_png

TRAIN_CFG = dict(warmup_iters=2, soft_iters=2, hard_iters=2, encoder_resolutions=[4, 6], encoder_channels=4,
                 decoder_width=8, head_width=8, checkpoint_every=0)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "scene.json"
    cfg.write_text(json.dumps({"width": 24, "height": 24, "n_frames": 6, "drop_fraction": 0.9}))
    assert cli.main(["synth", "--config", str(cfg), "--out", str(root / "ds"), "--seed", "1"]) == 0
    return root / "ds"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    cfg = run / "train.json"
    cfg.write_text(json.dumps(TRAIN_CFG))
    assert cli.main(["train", str(dataset), "--config", str(cfg), "--out", str(run)]) == 0
    return run / "final.dpgs"


def test_synth_writes_layout(dataset):
    for sub in ("frames/00000.png", "masks_hand/00005.png", "masks_obj/00002.png", "flow/00003.dpfl",
                "cameras.json", "init.ply", "labels.txt"):
        assert (dataset / sub).exists(), sub


def test_no_command_is_usage_error(capsys):
    assert cli.main([]) == 1


def test_unknown_mode_lists_modes(dataset, tmp_path, capsys):
    assert cli.main(["render", str(dataset), "--mode", "xray", "--out", str(tmp_path / "a.png")]) == 1
    err = capsys.readouterr().err
    assert all(m in err for m in MODES)


def test_missing_checkpoint_exit_code(dataset, tmp_path):
    assert cli.main(["eval", str(dataset), "--checkpoint", str(tmp_path / "none.dpgs")]) == 2


def test_missing_dataset_exit_code(tmp_path):
    assert cli.main(["eval", str(tmp_path / "nothing")]) == 2


def test_bad_config_exit_code(dataset, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"not_a_key": 1}))
    assert cli.main(["train", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2


def test_numerical_failure_exit_code(dataset, tmp_path, monkeypatch):
    def boom(self, *a, **k):
        raise NumericalError("diverged")
    monkeypatch.setattr(cli.Trainer, "run", boom)
    assert cli.main(["train", str(dataset), "--out", str(tmp_path / "r")]) == 3


def test_eval_ground_truth_model(dataset, tmp_path, capsys):
    out = tmp_path / "report.json"
    assert cli.main(["eval", str(dataset), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["frames"] == 1
    assert report["psnr_composite"] >= 50.0
    assert "psnr_composite" in capsys.readouterr().out


@pytest.mark.parametrize("mode", MODES)
def test_render_ground_truth_modes(dataset, tmp_path, mode):
    suffix = {"flow": "dpfl", "brightness": "pfm"}.get(mode, "png")
    out = tmp_path / f"img.{suffix}"
    assert cli.main(["render", str(dataset), "--mode", mode, "--frame", "1", "--out", str(out)]) == 0
    if mode == "flow":
        assert read_flow(out).shape == (24, 24, 2)
    elif mode == "brightness":
        assert read_pfm(out).shape == (24, 24)
    else:
        assert read_png(out).shape == (24, 24, 3)


def test_render_frame_out_of_range(dataset, tmp_path):
    assert cli.main(["render", str(dataset), "--frame", "99", "--out", str(tmp_path / "a.png")]) == 1


def test_train_then_eval_and_render(dataset, trained, tmp_path, capsys):
    assert trained.exists()
    assert (trained.parent / "train_log.csv").exists()
    assert cli.main(["eval", str(dataset), "--checkpoint", str(trained)]) == 0
    report = json.loads(capsys.readouterr().out.splitlines()[0])
    assert 0.0 <= report["label_accuracy"] <= 1.0
    assert 0.0 <= report["iou_obj"] <= 1.0 and 0.0 <= report["iou_hand"] <= 1.0
    assert report["bg_static_max_diff"] <= 1e-6
    out = tmp_path / "bg.png"
    assert cli.main(["render", str(dataset), "--checkpoint", str(trained), "--mode", "bg",
                     "--time", "0.3", "--out", str(out)]) == 0
    assert np.isfinite(read_png(out)).all()


def test_resume_through_cli(dataset, trained, tmp_path):
    assert cli.main(["train", str(dataset), "--checkpoint", str(trained), "--out", str(tmp_path)]) == 0
