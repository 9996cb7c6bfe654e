"""Binary tensor container."""

import struct

import numpy as np
import pytest

from mulcon.checkpoint import CheckpointFormatError, decode_tensors, encode_tensors, load_tensors, save_tensors


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "enc.conv0.w": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "U": rng.normal(size=(8, 16)).astype(np.float32),
        "cls.0.b": np.array([0.25], dtype=np.float32),
        "scalar": np.array(3.5, dtype=np.float32),
        "größe": np.arange(6, dtype=np.float32).reshape(2, 3),
    }


class TestLayout:
    def test_hand_built_bytes(self):
        arr = np.array([[1.0, -2.0]], dtype=np.float32)
        expected = b"MLCN" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w" + bytes([2])
        expected += struct.pack("<II", 1, 2) + struct.pack("<2f", 1.0, -2.0)
        assert encode_tensors({"w": arr}) == expected

    def test_empty_container(self):
        assert decode_tensors(encode_tensors({})) == {}


class TestRoundTrip:
    def test_values_and_order(self):
        tensors = sample_tensors()
        back = decode_tensors(encode_tensors(tensors))
        assert list(back) == list(tensors)
        for k, v in tensors.items():
            assert back[k].shape == v.shape
            assert back[k].tobytes() == v.tobytes()

    def test_save_load_save_identical(self, tmp_path):
        save_tensors(tmp_path / "a.ckpt", sample_tensors())
        save_tensors(tmp_path / "b.ckpt", load_tensors(tmp_path / "a.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_float64_stored_as_float32(self):
        back = decode_tensors(encode_tensors({"x": np.array([0.1], dtype=np.float64)}))
        assert back["x"].dtype == np.float32 and back["x"][0] == np.float32(0.1)


class TestCorruption:
    def test_bad_magic(self):
        buf = bytearray(encode_tensors(sample_tensors()))
        buf[:4] = b"NOPE"
        with pytest.raises(CheckpointFormatError, match="magic"):
            decode_tensors(bytes(buf))

    def test_bad_version(self):
        buf = bytearray(encode_tensors(sample_tensors()))
        buf[4:8] = struct.pack("<I", 99)
        with pytest.raises(CheckpointFormatError, match="version"):
            decode_tensors(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 10, 13, 40, -1])
    def test_truncated(self, cut):
        buf = encode_tensors(sample_tensors())
        with pytest.raises(CheckpointFormatError):
            decode_tensors(buf[:cut])

    def test_trailing_garbage(self):
        with pytest.raises(CheckpointFormatError, match="trailing"):
            decode_tensors(encode_tensors(sample_tensors()) + b"\x00")

    def test_error_is_value_error(self):
        assert issubclass(CheckpointFormatError, ValueError)
