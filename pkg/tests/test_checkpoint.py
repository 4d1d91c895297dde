import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ropo.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint

tensors = st.dictionaries(
    st.text(min_size=1, max_size=12),
    arrays(np.float64, st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple)),
    max_size=5,
)


def test_round_trip_bit_exact(tmp_path, rng):
    ckpt = Checkpoint(
        {"a": rng.standard_normal((3, 4)), "b.c": np.arange(5.0), "s": np.array(2.5), "t": rng.standard_normal((2, 2, 2))},
        {"step": 7, "config": {"d": 4}},
    )
    save_checkpoint(ckpt, tmp_path / "x.ckpt")
    back = load_checkpoint(tmp_path / "x.ckpt")
    assert back.metadata == ckpt.metadata
    assert set(back.tensors) == set(ckpt.tensors)
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == np.asarray(v, order="C").tobytes()


@settings(max_examples=40, deadline=None)
@given(tensors=tensors)
def test_round_trip_property(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("ck") / "p.ckpt"
    save_checkpoint(Checkpoint(tensors), path)
    back = load_checkpoint(path).tensors
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], v)


def test_header_layout(tmp_path):
    path = save_checkpoint(Checkpoint({}), tmp_path / "e.ckpt")
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8]) == (1,)
    assert raw[8:10] == b"\xff\xfe"


def test_rank_four_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(Checkpoint({"x": np.zeros((1, 1, 1, 1))}), tmp_path / "r.ckpt")


@pytest.mark.parametrize(
    "mutate,message",
    [
        (lambda b: b"XXXX" + b[4:], "not a ROPO"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:8] + b"\xfe\xff" + b[10:], "endianness"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\x00", "trailing"),
    ],
)
def test_malformed_files_rejected(tmp_path, mutate, message):
    path = save_checkpoint(Checkpoint({"w": np.ones((2, 2))}, {"step": 1}), tmp_path / "m.ckpt")
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(path)


def test_save_replaces_atomically(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(Checkpoint({"w": np.ones(2)}), path)
    save_checkpoint(Checkpoint({"w": np.zeros(2)}), path)
    np.testing.assert_array_equal(load_checkpoint(path).tensors["w"], np.zeros(2))
    assert not (tmp_path / "a.ckpt.tmp").exists()
