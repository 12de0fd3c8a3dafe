import logging
import shutil

import numpy as np
import pytest

from dpgs.core import Category
from dpgs.errors import FormatError, InvalidInput
from dpgs.io import read_flow, read_mask, read_png, write_mask
from dpgs.losses import camera_flow, dynamic_flow_target
from dpgs.synth import HAND_PARTS, OBJECT_PART, SceneScript, build_ground_truth, generate, load_dataset, ray_cast

from scenes import CARD_DEPTH, camera_only_script, card_script, static_script


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth") / "ds"
    script = SceneScript(width=32, height=32, n_frames=4)
    summary = generate(script, 3, root)
    return root, script, summary


def _fm(frame, nxt):
    fc, valid = camera_flow(frame.depth, frame.camera, nxt.camera)
    return dynamic_flow_target(frame.flow_gt, fc), valid


def test_static_scene_flow_files_exactly_zero(tmp_path):
    generate(static_script(), 0, tmp_path)
    for k in range(3):
        assert not read_flow(tmp_path / "flow" / f"{k:05d}.dpfl").any()


def test_static_pixels_under_static_camera_have_zero_flow():
    s = card_script()[0]
    part, _, flow = ray_cast(s, 0.0, 1 / 3)
    assert not flow[part != OBJECT_PART].any()
    assert flow[part == OBJECT_PART].any()


def test_camera_only_motion_cancels(tmp_path):
    generate(camera_only_script(), 1, tmp_path)
    ds = load_dataset(tmp_path)
    for a, b in zip(ds.frames[:-1], ds.frames[1:]):
        fm, valid = _fm(a, b)
        assert valid.all()
        assert np.abs(fm).mean() < 1e-4
        assert np.abs(a.flow_gt).mean() > 0.1          # the camera really moves


def test_translating_card_matches_analytic_displacement(tmp_path):
    script, dx = card_script(px_per_frame=2.0)
    generate(script, 2, tmp_path)
    ds = load_dataset(tmp_path)
    fx = ds.frames[0].camera.fx
    for a, b in zip(ds.frames[:-1], ds.frames[1:]):
        fm, _ = _fm(a, b)
        inside = a.mask_obj > 0
        assert inside.sum() > 20
        analytic = np.stack([fx * dx / a.depth, np.zeros_like(a.depth)], -1)
        assert np.abs(fm - analytic)[inside].max() < 0.1
        assert np.abs(fm[inside] - [2.0, 0.0]).max() < 0.1
        assert not fm[~inside].any()
    assert fx * dx / CARD_DEPTH == pytest.approx(2.0)


def test_generate_load_round_trip_bitwise(small_dataset):
    root, script, summary = small_dataset
    ds = load_dataset(root)
    assert len(ds.frames) == summary["frames"] == 4
    for k, fr in enumerate(ds.frames):
        assert np.array_equal(fr.rgb, read_png(root / "frames" / f"{k:05d}.png"))
        assert np.array_equal(fr.mask_hand, read_mask(root / "masks_hand" / f"{k:05d}.png"))
        assert np.array_equal(fr.flow_gt, read_flow(root / "flow" / f"{k:05d}.dpfl"))
        ref = script.camera(fr.t)
        assert np.array_equal(fr.camera.R, ref.R) and np.array_equal(fr.camera.t, ref.t)
    assert ds.script == script and ds.seed == 3
    assert len(ds.points) == summary["init_points"]


def test_generation_is_deterministic(small_dataset, tmp_path):
    root, script, _ = small_dataset
    generate(script, 3, tmp_path)
    for sub in ("frames/00001.png", "flow/00002.dpfl", "init.ply", "labels.txt", "cameras.json"):
        assert (root / sub).read_bytes() == (tmp_path / sub).read_bytes()


def test_labels_partition_points(small_dataset):
    ds = load_dataset(small_dataset[0])
    assert len(ds.labels) == len(ds.points)
    counts = np.bincount(ds.labels, minlength=3)
    assert counts.sum() == len(ds.points) and (counts > 0).all()


def test_masks_match_ray_cast(small_dataset):
    root, script, _ = small_dataset
    ds = load_dataset(root)
    part, _, _ = ray_cast(script, ds.frames[1].t, None)
    assert np.array_equal(ds.frames[1].mask_hand > 0, np.isin(part, HAND_PARTS))
    assert np.array_equal(ds.frames[1].mask_obj > 0, part == OBJECT_PART)


def test_deleted_flow_file_names_frame(small_dataset, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(small_dataset[0], root)
    (root / "flow" / "00002.dpfl").unlink()
    with pytest.raises(FormatError, match="frame 2"):
        load_dataset(root)


def test_overlapping_masks_resolve_to_hand(small_dataset, tmp_path, caplog):
    root = tmp_path / "ds"
    shutil.copytree(small_dataset[0], root)
    hand = read_mask(root / "masks_hand" / "00001.png")
    obj = read_mask(root / "masks_obj" / "00001.png")
    obj[:3, :3] = 1.0
    hand[:3, :3] = 1.0
    write_mask(root / "masks_obj" / "00001.png", obj)
    write_mask(root / "masks_hand" / "00001.png", hand)
    with caplog.at_level(logging.WARNING, logger="dpgs.synth"):
        ds = load_dataset(root)
    fr = ds.frames[1]
    assert (fr.mask_hand[:3, :3] == 1).all() and not fr.mask_obj[:3, :3].any()
    assert not ((fr.mask_hand > 0) & (fr.mask_obj > 0)).any()
    assert any("frame 1" in r.getMessage() for r in caplog.records)


def test_missing_dataset_and_bad_script():
    with pytest.raises(FormatError):
        load_dataset("/nonexistent/dataset")
    with pytest.raises(InvalidInput):
        SceneScript(n_frames=0)
    with pytest.raises(InvalidInput):
        SceneScript.from_dict({"frames": 3})


def test_ground_truth_contains_all_categories():
    gt = build_ground_truth(SceneScript(width=32, height=32, n_frames=2))
    assert set(np.unique(gt.label)) == {int(Category.BG), int(Category.OBJ), int(Category.HAND)}


def test_moving_init_points_are_seen_in_the_first_frame(tmp_path):
    # a moving point's initial position is its t=0 position, so it must be observed there;
    # this box starts outside the view and slides in, so it contributes no initial points
    script = SceneScript(width=48, height=48, n_frames=6, drop_fraction=0.0,
                         object_keys=[[0.0, -1.45, 0.35, 0.08, 0.0], [1.0, 0.0, 0.35, 0.08, 0.0]])
    assert not (ray_cast(script, 0.0, None)[0] == OBJECT_PART).any()
    assert (ray_cast(script, 1.0, None)[0] == OBJECT_PART).any()
    generate(script, 1, tmp_path / "ds")
    ds = load_dataset(tmp_path / "ds")
    counts = np.bincount(ds.labels, minlength=3)
    assert counts[Category.OBJ] == 0
    assert counts[Category.HAND] > 0 and counts[Category.BG] > 0
