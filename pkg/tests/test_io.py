import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from glassdepth.geometry import DepthMap
from glassdepth.io import (
    FormatError,
    file_digest,
    load_checkpoint,
    read_depth_png,
    read_float_array,
    save_checkpoint,
    tree_digest,
    write_depth_png,
    write_float_array,
)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_float_container_round_trip(a):
    import tempfile, os
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "a.dpf")
        write_float_array(p, a)
        assert np.array_equal(read_float_array(p), a)


def test_float_container_layout(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_float_array(tmp_path / "a.dpf", a)
    raw = (tmp_path / "a.dpf").read_bytes()
    assert raw[:4] == b"DPF1" and struct.unpack("<3I", raw[4:16]) == (2, 3, 1)
    assert np.frombuffer(raw[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    (tmp_path / "b.dpf").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_float_array(tmp_path / "b.dpf")
    (tmp_path / "c.dpf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_float_array(tmp_path / "c.dpf")


def test_depth_png_millimetres(tmp_path):
    vals = np.array([[0.5, 1.2344], [0.0, 65.535]])
    valid = np.array([[True, True], [False, True]])
    write_depth_png(tmp_path / "d.png", DepthMap(vals, valid))
    back = read_depth_png(tmp_path / "d.png")
    assert np.array_equal(back.validity, valid)
    np.testing.assert_allclose(back.values[valid], [0.5, 1.234, 65.535], atol=1e-12)
    with pytest.raises(FormatError):
        write_depth_png(tmp_path / "e.png", DepthMap.complete(np.full((2, 2), 70.0)))


def test_checkpoint_round_trip_and_determinism(tmp_path, rng):
    tensors = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}
    h1 = save_checkpoint(tmp_path / "a.ckpt", "codec", tensors, {"k": "1"}, {"note": 2})
    h2 = save_checkpoint(tmp_path / "b.ckpt", "codec", tensors, {"k": "1"}, {"note": 2})
    assert h1 == h2 == file_digest(tmp_path / "a.ckpt")
    back, cfg, extra = load_checkpoint(tmp_path / "a.ckpt", "codec")
    assert list(back) == ["w", "b"] and cfg == {"k": "1"} and extra == {"note": 2}
    np.testing.assert_array_equal(back["w"], tensors["w"].astype(np.float32))
    with pytest.raises(FormatError, match="expected a denoiser"):
        load_checkpoint(tmp_path / "a.ckpt", "denoiser")
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")


def test_tree_digest_sees_names_and_content(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x").write_text("1")
    d0 = tree_digest(tmp_path / "a")
    (tmp_path / "a" / "x").write_text("2")
    d1 = tree_digest(tmp_path / "a")
    (tmp_path / "a" / "x").rename(tmp_path / "a" / "y")
    assert len({d0, d1, tree_digest(tmp_path / "a")}) == 3
