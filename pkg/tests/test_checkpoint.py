import struct

import numpy as np
import pytest

from dpgs.checkpoint import MAGIC, VERSION, Checkpoint, dumps, load, loads, record_width, save
from dpgs.errors import FormatError, IoError

from scenes import random_scene


def _ckpt(seed=0, sh_degree=2):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 7, sh_degree=sh_degree).astype(np.float32)
    tensors = {"dec_obj.W0": rng.normal(size=(4, 5)).astype(np.float32),
               "adam.m.mu": rng.normal(size=(7, 3)).astype(np.float32),
               "scalar": np.array(1.5, dtype=np.float32)}
    return Checkpoint(scene, tensors, {"step": 12, "config": {"seed": 3}})


def test_round_trip_bitwise(tmp_path):
    ck = _ckpt()
    save(tmp_path / "a.dpgs", ck)
    back = load(tmp_path / "a.dpgs")
    for name in ck.scene.FIELDS:
        assert np.array_equal(getattr(back.scene, name), getattr(ck.scene, name)), name
    assert back.scene.sh_degree == 2
    assert set(back.tensors) == set(ck.tensors)
    for k, v in ck.tensors.items():
        assert np.array_equal(back.tensors[k], v) and back.tensors[k].shape == v.shape
    assert back.meta["step"] == 12 and back.meta["config"] == {"seed": 3}
    assert dumps(back) == dumps(ck)


def test_header_layout():
    data = dumps(_ckpt(sh_degree=1))
    assert data[:4] == MAGIC
    assert struct.unpack("<III", data[4:16]) == (VERSION, 7, 1)
    assert record_width(1) == 3 + 4 + 3 + 1 + 12 + 1 + 3


def test_truncation_rejected():
    data = dumps(_ckpt())
    for cut in (3, 10, 40, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            loads(data[:cut])


def test_bad_magic():
    data = dumps(_ckpt())
    with pytest.raises(FormatError, match="magic"):
        loads(b"XXXX" + data[4:])


def test_version_mismatch_names_both_versions():
    data = bytearray(dumps(_ckpt()))
    data[4:8] = struct.pack("<I", VERSION + 6)
    with pytest.raises(FormatError) as err:
        loads(bytes(data))
    assert str(VERSION + 6) in str(err.value) and str(VERSION) in str(err.value)


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError, match="trailing"):
        loads(dumps(_ckpt()) + b"\0")


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        load(tmp_path / "nope.dpgs")
