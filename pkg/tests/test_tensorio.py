import numpy as np
import pytest

from spkr import tensorio


def test_roundtrip_shapes(tmp_path, rng):
    tensors = {
        "vec": rng.standard_normal(7).astype(np.float32),
        "mat": rng.standard_normal((3, 5)).astype(np.float32),
        "cube": rng.standard_normal((2, 3, 4)).astype(np.float32),
    }
    path = tmp_path / "t.wstn"
    tensorio.write_tensors(path, tensors)
    back = tensorio.read_tensors(path)
    assert list(back) == list(tensors)
    for name in tensors:
        assert np.array_equal(back[name], tensors[name])


def test_float64_input_downcast(tmp_path):
    path = tmp_path / "t.wstn"
    tensorio.write_tensors(path, {"x": np.array([1.0, 2.5, -3.25])})
    back = tensorio.read_tensors(path)
    assert back["x"].dtype == np.float32
    assert np.array_equal(back["x"], np.array([1.0, 2.5, -3.25], np.float32))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.wstn"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(tensorio.TensorFormatError, match="magic"):
        tensorio.read_tensors(path)


def test_truncated(tmp_path, rng):
    path = tmp_path / "t.wstn"
    tensorio.write_tensors(path, {"x": rng.standard_normal((5, 5))})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(tensorio.TensorFormatError, match="truncated"):
        tensorio.read_tensors(path)


def test_empty_container(tmp_path):
    path = tmp_path / "empty.wstn"
    tensorio.write_tensors(path, {})
    assert tensorio.read_tensors(path) == {}
