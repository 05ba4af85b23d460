import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from epiflow.errors import ConfigError, InputError
from epiflow.fileio import (format_keyvalue, parse_keyvalue, read_correspondences, read_flo, read_image,
                            read_intrinsics, read_mask, read_trajectory, sha256, write_correspondences,
                            write_flo, write_image, write_intrinsics, write_mask, write_trajectory)
from epiflow.geometry import CameraIntrinsics, FlowField


def test_flo_layout(tmp_path):
    uv = np.array([[[1.5, -2.0], [0.25, 3.0], [7.0, 8.0]]])
    write_flo(tmp_path / "a.flo", uv)
    raw = (tmp_path / "a.flo").read_bytes()
    assert struct.unpack("<f", raw[:4])[0] == 202021.25
    assert struct.unpack("<ii", raw[4:12]) == (3, 1)
    assert struct.unpack("<6f", raw[12:]) == (1.5, -2.0, 0.25, 3.0, 7.0, 8.0)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6).map(
    lambda s: (s[0], s[1], 2)), elements=st.floats(-1e4, 1e4, width=32)))
def test_flo_round_trip(tmp_path_factory, uv):
    p = tmp_path_factory.mktemp("flo") / "f.flo"
    write_flo(p, uv.astype(float))
    back = read_flo(p)
    assert np.array_equal(back.uv, uv.astype(float)) and back.valid_mask.all()


def test_flo_invalid_pixels(tmp_path):
    valid = np.array([[True, False], [True, True]])
    write_flo(tmp_path / "v.flo", FlowField(np.ones((2, 2, 2)), valid))
    back = read_flo(tmp_path / "v.flo")
    assert np.array_equal(back.valid_mask, valid) and back.uv[0, 1].tolist() == [0.0, 0.0]


@pytest.mark.parametrize("payload", [b"", b"PIEH" + b"\0" * 8,
                                     struct.pack("<fii", 202021.25, 2, 2) + b"\0" * 8,
                                     struct.pack("<fii", 202021.25, -1, 2)])
def test_flo_rejects_bad_files(tmp_path, payload):
    (tmp_path / "bad.flo").write_bytes(payload)
    with pytest.raises(InputError):
        read_flo(tmp_path / "bad.flo")


def test_correspondences_round_trip(tmp_path, rng):
    p1, p2 = rng.normal(size=(7, 2)) * 100, rng.normal(size=(7, 2)) * 100
    labels = rng.integers(0, 2, 7)
    write_correspondences(tmp_path / "c.txt", p1, p2, labels)
    a, b, lab = read_correspondences(tmp_path / "c.txt")
    assert np.array_equal(a, p1) and np.array_equal(b, p2) and np.array_equal(lab, labels)
    write_correspondences(tmp_path / "d.txt", p1, p2)
    assert read_correspondences(tmp_path / "d.txt")[2] is None


def test_correspondences_comments_and_errors(tmp_path):
    (tmp_path / "c.txt").write_text("# header\n1 2 3 4  # trailing\n\n5 6 7 8\n")
    a, b, _ = read_correspondences(tmp_path / "c.txt")
    assert a.tolist() == [[1, 2], [5, 6]] and b.tolist() == [[3, 4], [7, 8]]
    for bad in ("1 2 3\n", "1 2 3 x\n", "1 2 3 4\n1 2 3 4 1\n"):
        (tmp_path / "bad.txt").write_text(bad)
        with pytest.raises(InputError):
            read_correspondences(tmp_path / "bad.txt")


def test_keyvalue():
    assert parse_keyvalue("a = 1\n# c\n b=x y # z\n") == {"a": "1", "b": "x y"}
    with pytest.raises(ConfigError):
        parse_keyvalue("novalue\n")
    with pytest.raises(ConfigError):
        parse_keyvalue(" = 3\n")
    text = format_keyvalue({"b": 0.1, "a": (1.0, 2.0), "c": True})
    assert text == "a = 1.0 2.0\nb = 0.1\nc = true\n"
    # numpy scalars print like their builtin counterparts
    assert format_keyvalue({"x": np.float64(0.5), "n": np.int64(3), "f": np.bool_(False)}) == "f = false\nn = 3\nx = 0.5\n"


def test_intrinsics_round_trip(tmp_path):
    K1 = CameraIntrinsics(700.5, 701.25, 320.0, 240.0, 0.5)
    K2 = CameraIntrinsics(690.0, 691.0, 300.0, 250.0)
    write_intrinsics(tmp_path / "k.txt", K1, K2)
    a, b = read_intrinsics(tmp_path / "k.txt")
    assert np.array_equal(a.matrix, K1.matrix) and np.array_equal(b.matrix, K2.matrix)


def test_intrinsics_shared_and_override(tmp_path):
    (tmp_path / "k.txt").write_text("fx = 100\nfy = 100\ncx = 5\ncy = 6\ncam2.fx = 200\n")
    a, b = read_intrinsics(tmp_path / "k.txt")
    assert a.fx == 100 and b.fx == 200 and b.cx == 5
    (tmp_path / "bad.txt").write_text("fx = 100\n")
    with pytest.raises(ConfigError):
        read_intrinsics(tmp_path / "bad.txt")
    (tmp_path / "bad.txt").write_text("fx = 1\nfy = 1\ncx = 0\ncy = 0\nfocal = 3\n")
    with pytest.raises(ConfigError):
        read_intrinsics(tmp_path / "bad.txt")


def test_trajectory_round_trip(tmp_path, rng):
    P = rng.normal(size=(4, 3, 4))
    write_trajectory(tmp_path / "t.txt", P)
    assert np.array_equal(read_trajectory(tmp_path / "t.txt"), P)
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(InputError):
        read_trajectory(tmp_path / "bad.txt")
    (tmp_path / "empty.txt").write_text("# nothing\n")
    with pytest.raises(InputError):
        read_trajectory(tmp_path / "empty.txt")


@pytest.mark.parametrize("ext", ["png", "ppm"])
def test_image_round_trip(tmp_path, rng, ext):
    img = rng.integers(0, 256, size=(5, 6, 3)) / 255.0
    write_image(tmp_path / f"i.{ext}", img)
    assert np.allclose(read_image(tmp_path / f"i.{ext}"), img, atol=1e-12)


def test_mask_round_trip(tmp_path, rng):
    m = rng.random((5, 7)) > 0.5
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)


def test_image_garbage(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not an image")
    with pytest.raises(InputError):
        read_image(tmp_path / "x.png")


def test_sha256(tmp_path):
    (tmp_path / "x").write_bytes(b"abc")
    assert sha256(tmp_path / "x") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
