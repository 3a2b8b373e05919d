import struct
import zlib

import numpy as np
import pytest

from dam.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint


@pytest.fixture
def ckpt():
    r = np.random.default_rng(0)
    return Checkpoint(
        config={"train": {"seed": 3}, "name": "x"},
        tensors={"a.weight": r.standard_normal((2, 3, 3)).astype(np.float32), "b": np.float32(1.5).reshape(())},
        velocity={"a.weight": np.zeros((2, 3, 3), np.float32)},
        rng_seed=3, rng_counter=17, episodes=17,
    )


def _equal(a: Checkpoint, b: Checkpoint):
    assert a.config == b.config
    assert (a.rng_seed, a.rng_counter, a.episodes) == (b.rng_seed, b.rng_counter, b.episodes)
    for ta, tb in ((a.tensors, b.tensors), (a.velocity, b.velocity)):
        assert list(ta) == list(tb)
        for k in ta:
            assert ta[k].shape == tb[k].shape and np.array_equal(ta[k], tb[k])


def test_round_trip(ckpt, tmp_path):
    p = tmp_path / "m.damc"
    digest = save_checkpoint(ckpt, str(p))
    back = load_checkpoint(str(p))
    _equal(ckpt, back)
    assert back.digest() == digest


def test_save_load_save_is_byte_identical(ckpt, tmp_path):
    save_checkpoint(ckpt, str(tmp_path / "a"))
    save_checkpoint(load_checkpoint(str(tmp_path / "a")), str(tmp_path / "b"))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_layout_is_little_endian(ckpt):
    blob = ckpt.to_bytes()
    assert blob[:4] == MAGIC
    assert struct.unpack("<I", blob[4:8])[0] == 1
    n = struct.unpack("<I", blob[8:12])[0]
    assert blob[12:12 + n].decode() == '{"name":"x","train":{"seed":3}}'
    first = ckpt.tensors["a.weight"]
    assert first.astype("<f4").tobytes() in blob
    assert first.astype(">f4").tobytes() not in blob


def test_big_endian_input_arrays_are_stored_little_endian(ckpt):
    swapped = Checkpoint(ckpt.config, {k: v.astype(">f4") for k, v in ckpt.tensors.items()},
                         ckpt.velocity, ckpt.rng_seed, ckpt.rng_counter, ckpt.episodes)
    assert swapped.to_bytes() == ckpt.to_bytes()


@pytest.mark.parametrize("offset", [5, 20, 60, -10])
def test_flipped_byte_is_rejected(ckpt, offset):
    blob = bytearray(ckpt.to_bytes())
    blob[offset] ^= 0x40
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(blob))


def test_bad_magic(ckpt):
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"NOPE" + ckpt.to_bytes()[4:])


def test_future_version(ckpt):
    blob = bytearray(ckpt.to_bytes())
    blob[4:8] = struct.pack("<I", 9)
    blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
    with pytest.raises(CheckpointError, match="version 9"):
        Checkpoint.from_bytes(bytes(blob))


@pytest.mark.parametrize("keep", [0, 3, 10, 40])
def test_truncation(ckpt, keep):
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(ckpt.to_bytes()[:keep])


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "absent.damc"))
