import numpy as np
import pytest
from PIL import Image

from loopsplat.imageio import quantize, read_image, read_pfm, read_ppm, write_pfm, write_ppm


def test_ppm_round_trip_is_quantized(tmp_path):
    img = np.random.default_rng(0).uniform(-0.2, 1.2, (5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    np.testing.assert_array_equal(quantize(back), quantize(img))
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_quantize_rounds_to_nearest():
    np.testing.assert_array_equal(quantize(np.array([0.0, 0.5, 1.0, 2.0, -1.0, 0.502])),
                                  [0, 128, 255, 255, 0, 128])


def test_ppm_header_comments(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0]))
    np.testing.assert_array_equal(read_ppm(p)[0], [[1, 0, 0], [0, 1, 0]])


def test_ppm_rejects_other_formats(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError, match="binary PPM"):
        read_ppm(p)
    p.write_bytes(b"P6\n2 2\n255\n\x00")
    with pytest.raises(ValueError, match="truncated"):
        read_ppm(p)


def test_pfm_round_trip_exact_in_float32(tmp_path):
    d = np.random.default_rng(1).uniform(0, 10, (6, 4))
    d[0, 0] = 0.0
    write_pfm(tmp_path / "d.pfm", d)
    back = read_pfm(tmp_path / "d.pfm")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, d.astype(np.float32))


def test_pfm_layout(tmp_path):
    d = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_pfm(tmp_path / "d.pfm", d)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    # bottom row first, little endian
    np.testing.assert_array_equal(np.frombuffer(raw[-16:], "<f4"), [3, 4, 1, 2])


def test_pfm_color_and_big_endian(tmp_path):
    c = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    write_pfm(tmp_path / "c.pfm", c)
    np.testing.assert_array_equal(read_pfm(tmp_path / "c.pfm"), c)
    p = tmp_path / "b.pfm"
    p.write_bytes(b"Pf\n1 1\n1.0\n" + np.array([2.5], ">f4").tobytes())
    assert read_pfm(p)[0, 0] == 2.5


def test_read_image_via_pillow(tmp_path):
    arr = np.zeros((3, 4, 3), np.uint8)
    arr[1, 2] = (10, 20, 30)
    Image.fromarray(arr).save(tmp_path / "i.png")
    got = read_image(tmp_path / "i.png")
    np.testing.assert_allclose(got[1, 2], np.array([10, 20, 30]) / 255)
