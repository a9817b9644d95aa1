import struct

import numpy as np
import pytest
from PIL import Image

from misr.errors import ConfigurationError, ImageIOError
from misr.grid import ImageGrid
from misr.imageio import (
    read_color,
    read_image,
    read_manifest,
    rgb_to_ycbcr,
    write_image,
    write_manifest,
    ycbcr_to_rgb,
)


def test_raw_roundtrip(tmp_path, rng):
    a = rng.random((5, 7)).astype(np.float32).astype(np.float64)
    write_image(tmp_path / "a.raw", a)
    np.testing.assert_array_equal(read_image(tmp_path / "a.raw").to_array(), a)


def test_raw_header_layout(tmp_path):
    write_image(tmp_path / "a.raw", ImageGrid.from_array(np.array([[0.5, 1.0, 0.25]])))
    data = (tmp_path / "a.raw").read_bytes()
    assert len(data) == 16 + 3 * 4
    assert struct.unpack("<4sIII", data[:16]) == (b"MSRF", 3, 1, 0)
    np.testing.assert_array_equal(np.frombuffer(data[16:], "<f4"), [0.5, 1.0, 0.25])


@pytest.mark.parametrize("payload", [b"XXXX" + bytes(12), b"MSRF", struct.pack("<4sIII", b"MSRF", 2, 2, 0) + bytes(4)])
def test_raw_corrupt(tmp_path, payload):
    (tmp_path / "bad.raw").write_bytes(payload)
    with pytest.raises(ImageIOError):
        read_image(tmp_path / "bad.raw")


@pytest.mark.parametrize("depth,step", [(8, 255), (16, 65535)])
def test_png_quantization(tmp_path, rng, depth, step):
    a = rng.random((6, 9))
    write_image(tmp_path / "a.png", a, bit_depth=depth)
    back = read_image(tmp_path / "a.png").to_array()
    assert np.abs(back - a).max() <= 0.5 / step + 1e-12
    np.testing.assert_array_equal(back, np.round(a * step) / step)


def test_png_clips_out_of_range(tmp_path):
    write_image(tmp_path / "a.png", np.array([[-0.2, 1.3]]))
    np.testing.assert_array_equal(read_image(tmp_path / "a.png").to_array(), [[0.0, 1.0]])


def test_rgb_becomes_luma(tmp_path):
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[1, 1] = (0, 0, 255)
    Image.fromarray(rgb).save(tmp_path / "c.png")
    luma = read_image(tmp_path / "c.png").to_array()
    np.testing.assert_allclose(luma, [[0.299, 0.0], [0.0, 0.114]], atol=1e-12)
    assert read_color(tmp_path / "c.png").shape == (2, 2, 3)


def test_ycbcr_inverse(rng):
    rgb = rng.random((4, 4, 3))
    np.testing.assert_allclose(ycbcr_to_rgb(rgb_to_ycbcr(rgb)), rgb, atol=1e-5)


def test_unknown_format(tmp_path):
    with pytest.raises(ConfigurationError):
        write_image(tmp_path / "a.tif", np.zeros((2, 2)))


def test_missing_file(tmp_path):
    with pytest.raises(ImageIOError):
        read_image(tmp_path / "none.png")


def test_no_partial_file_left(tmp_path):
    with pytest.raises(ConfigurationError):
        write_image(tmp_path / "a.png", np.zeros((2, 2)), bit_depth=12)
    assert list(tmp_path.iterdir()) == []


def test_manifest_roundtrip(tmp_path):
    write_manifest(tmp_path / "m.txt", {"scale": 2, "blur_std": repr(0.5), "trace": ""})
    assert (tmp_path / "m.txt").read_text() == "scale=2\nblur_std=0.5\ntrace=\n"
    assert read_manifest(tmp_path / "m.txt") == {"scale": "2", "blur_std": "0.5", "trace": ""}


def test_manifest_malformed(tmp_path):
    (tmp_path / "m.txt").write_text("scale=2\nnonsense\n")
    with pytest.raises(ImageIOError):
        read_manifest(tmp_path / "m.txt")
    with pytest.raises(ConfigurationError):
        write_manifest(tmp_path / "n.txt", {"a=b": 1})
