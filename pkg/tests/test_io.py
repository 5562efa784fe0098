import numpy as np
import pytest

from sanet.imageio import (LoadError, atomic_write, colorize, decode_netpbm, encode_pgm, encode_ppm, list_samples,
                           load_sample, read_pgm, read_ppm, write_pgm, write_ppm)
from sanet.tensor import SeededRng


def test_ppm_pgm_round_trip(tmp_path):
    rng = SeededRng(0)
    rgb = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    gray = rng.integers(0, 256, size=(5, 7)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    write_pgm(tmp_path / "a.pgm", gray)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), gray)


def test_two_by_two_p6_fixture():
    buf = b"P6\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30])
    img = decode_netpbm(buf, b"P6")
    assert img.shape == (2, 2, 3)
    assert img[0, 0].tolist() == [255, 0, 0] and img[1, 1].tolist() == [10, 20, 30]
    assert encode_ppm(img) == buf


def test_header_comments_are_skipped():
    buf = b"P5\n# made by hand\n3 1 # width height\n255\n" + bytes([1, 2, 3])
    assert decode_netpbm(buf, b"P5").tolist() == [[1, 2, 3]]


@pytest.mark.parametrize("buf", [
    b"P6\n2 2\n255\n" + bytes(11),  # truncated payload
    b"P5\n2 2\n255\n" + bytes(4),  # wrong magic for a PPM
    b"P6\n2 2\n65535\n" + bytes(24),  # unsupported depth
    b"P6\n2",  # truncated header
    b"P6\n0 2\n255\n",  # empty extents
])
def test_malformed_files_raise(buf):
    with pytest.raises(LoadError):
        decode_netpbm(buf, b"P6")


def test_label_validation(tmp_path):
    write_ppm(tmp_path / "image_0000.ppm", np.zeros((2, 2, 3), np.uint8))
    write_pgm(tmp_path / "label_0000.pgm", np.array([[0, 1], [255, 2]], np.uint8))
    img, lab = tmp_path / "image_0000.ppm", tmp_path / "label_0000.pgm"
    sample = load_sample(img, lab, num_classes=3)
    assert sample.image.shape == (3, 2, 2) and sample.labels[1, 0] == 255
    with pytest.raises(LoadError):
        load_sample(img, lab, num_classes=2)
    with pytest.raises(LoadError):
        load_sample(img, lab, num_classes=3, ignore_index=None)
    assert list_samples(tmp_path) == [(img, lab)]


def test_extent_mismatch_and_missing_label(tmp_path):
    write_ppm(tmp_path / "image_0000.ppm", np.zeros((2, 3, 3), np.uint8))
    write_pgm(tmp_path / "other.pgm", np.zeros((3, 2), np.uint8))
    with pytest.raises(LoadError):
        load_sample(tmp_path / "image_0000.ppm", tmp_path / "other.pgm")
    with pytest.raises(LoadError):
        list_samples(tmp_path)
    with pytest.raises(LoadError):
        list_samples(tmp_path / "empty")


def test_encoders_validate_dtype_and_layout():
    with pytest.raises(ValueError):
        encode_ppm(np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        encode_pgm(np.zeros((2, 2), np.float64))


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    atomic_write(tmp_path / "x.txt", "one")
    atomic_write(tmp_path / "x.txt", b"two")
    assert (tmp_path / "x.txt").read_bytes() == b"two"
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]


def test_colorize_marks_ignore_white():
    out = colorize(np.array([[0, 1], [255, 2]], np.uint8))
    assert out.shape == (2, 2, 3) and out.dtype == np.uint8
    assert out[1, 0].tolist() == [255, 255, 255]
    assert out[0, 0].tolist() != out[0, 1].tolist()
