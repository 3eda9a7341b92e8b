import numpy as np
import pytest

from sharpdepth.errors import DataError
from sharpdepth.rasterio import read_image, read_pfm, read_pnm, to_chw, write_pfm, write_pnm


def test_pfm_gray_layout(tmp_path):
    img = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    body = np.frombuffer(raw[len(b"Pf\n3 2\n-1.0\n"):], "<f4")
    # rows are stored bottom to top
    np.testing.assert_array_equal(body, [3, 4, 5, 0, 1, 2])
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)


def test_pfm_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    for name, img in (("g.pfm", rng.random((5, 7))), ("c.pfm", rng.random((4, 6, 3)))):
        write_pfm(tmp_path / name, img)
        back = read_pfm(tmp_path / name)
        write_pfm(tmp_path / ("2" + name), back)
        assert (tmp_path / name).read_bytes() == (tmp_path / ("2" + name)).read_bytes()


def test_big_endian_pfm_is_read(tmp_path):
    img = np.array([[1.5, -2.0]], dtype=np.float32)
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + img.astype(">f4").tobytes())
    np.testing.assert_array_equal(read_pfm(tmp_path / "b.pfm"), img)


def test_channel_first_rgb_is_accepted(tmp_path):
    chw = np.random.default_rng(1).random((3, 4, 5)).astype(np.float32)
    write_pfm(tmp_path / "c.pfm", chw)
    np.testing.assert_array_equal(to_chw(read_pfm(tmp_path / "c.pfm")), chw)


def test_pnm_round_trip(tmp_path):
    rgb = np.random.default_rng(2).integers(0, 256, (4, 5, 3), dtype=np.uint8)
    write_pnm(tmp_path / "a.ppm", rgb)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    write_pnm(tmp_path / "g.pgm", np.array([[0.0, 0.5, 1.0]]))
    np.testing.assert_array_equal(read_pnm(tmp_path / "g.pgm"), [[0, 128, 255]])
    np.testing.assert_allclose(read_image(tmp_path / "g.pgm"), [[0, 128 / 255, 1]])


def test_pnm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\x09")
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.pgm"), [[7, 9]])


def test_malformed_files(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P7\n1 1\n-1.0\n")
    with pytest.raises(DataError):
        read_pfm(tmp_path / "x.pfm")
    (tmp_path / "t.pfm").write_bytes(b"Pf\n4 4\n-1.0\n" + b"\0" * 8)
    with pytest.raises(DataError):
        read_pfm(tmp_path / "t.pfm")
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\0")
    with pytest.raises(DataError):
        read_pnm(tmp_path / "t.pgm")
    with pytest.raises(DataError):
        read_image(tmp_path / "x.png")
