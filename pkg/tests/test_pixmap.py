import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trustseg.pixmap import PixmapError, read_pgm, read_pnm, read_ppm, write_pgm, write_ppm


def test_one_pixel_round_trip(tmp_path):
    img = np.array([[[1, 2, 3]]], dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    lab = np.array([[254]], dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", lab)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), lab)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_round_trip_bit_identical(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_ppm(p, img)
    assert read_ppm(p).tobytes() == img.tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_round_trip_bit_identical(tmp_path_factory, lab):
    p = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm(p, lab)
    assert read_pgm(p).tobytes() == lab.tobytes()


def test_float_image_is_rounded(tmp_path):
    img = np.full((2, 2, 3), 128 / 255)
    write_ppm(tmp_path / "f.ppm", img)
    assert np.all(read_ppm(tmp_path / "f.ppm") == 128)


def test_header_comments_are_skipped():
    data = b"P5\n# a comment\n2 1\n# another\n255\n\x07\x08"
    assert np.array_equal(read_pnm(io.BytesIO(data)), [[7, 8]])


@pytest.mark.parametrize(
    "data",
    [
        b"P3\n1 1\n255\n\x00\x00\x00",
        b"XX\n1 1\n255\n\x00",
        b"P5\n1 x\n255\n\x00",
        b"P5\n2 2\n255\n\x00",
        b"P5\n1 1\n65535\n\x00\x00",
        b"P6\n0 1\n255\n",
        b"P5\n1",
    ],
)
def test_malformed_inputs(data):
    with pytest.raises(PixmapError):
        read_pnm(io.BytesIO(data))


def test_writer_rejects_bad_arrays(tmp_path):
    with pytest.raises(PixmapError):
        write_ppm(tmp_path / "a.ppm", np.zeros((2, 2)))
    with pytest.raises(PixmapError):
        write_pgm(tmp_path / "a.pgm", np.full((2, 2), 300))


def test_kind_mismatch(tmp_path):
    write_pgm(tmp_path / "g.pgm", np.zeros((2, 2), np.uint8))
    with pytest.raises(PixmapError):
        read_ppm(tmp_path / "g.pgm")
