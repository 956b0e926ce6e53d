"""Byte/image conversion, normalization, and PNG roundtrips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from semnop import images
from semnop.errors import InvalidArgumentError, UnsupportedFormatError


def test_bytes_to_image_identity_mapping():
    img = images.bytes_to_image(b"\x90\x90", width=2)
    assert (img.height, img.width) == (1, 2)
    assert img.pixels.tolist() == [[144, 144]]


def test_bytes_to_image_width_64_heights():
    for n in (216 * 64, 432 * 64):
        img = images.bytes_to_image(bytes(n), width=64)
        assert img.width == 64
        assert img.height == -(-n // 64)


def test_bytes_to_image_padding():
    img = images.bytes_to_image(bytes([7, 8, 9]), width=2)
    assert img.pixels.reshape(-1).tolist() == [7, 8, 9, 0]
    assert img.payload_len == 3


@pytest.mark.parametrize("data,width", [(b"", 2), (b"ab", 0)])
def test_bytes_to_image_invalid_args(data, width):
    with pytest.raises(InvalidArgumentError):
        images.bytes_to_image(data, width)


def test_image_to_bytes_inverse():
    assert images.image_to_bytes(images.bytes_to_image(b"\x90\x90", 2)) == b"\x90\x90"


def test_image_to_bytes_drops_padding():
    img = images.bytes_to_image(bytes([7, 8, 9]), width=2)
    assert images.image_to_bytes(img) == bytes([7, 8, 9])


def test_roundtrip_many_random_cases():
    # 10^4 random byte strings across many widths
    rng = np.random.default_rng(42)
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        width = int(rng.integers(1, 12))
        data = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
        img = images.bytes_to_image(data, width)
        assert images.image_to_bytes(img) == data
        assert img.pixels.size - img.payload_len < img.width


@given(st.binary(min_size=1, max_size=300), st.integers(1, 100))
@settings(max_examples=200, deadline=None)
def test_roundtrip_property(data, width):
    img = images.bytes_to_image(data, width)
    assert images.image_to_bytes(img) == data
    assert images.bytes_to_image(images.image_to_bytes(img), width) == img


def test_normalize_endpoints():
    img = images.bytes_to_image(bytes([0, 255, 127]), width=3)
    n = images.normalize(img, np.float64)
    assert n.values[0, 0] == -1.0
    assert n.values[0, 1] == 1.0
    assert n.values[0, 2] == pytest.approx(-0.00392156, abs=1e-7)


def test_normalization_bijective_on_bytes():
    img = images.bytes_to_image(bytes(range(256)), width=16)
    back = images.denormalize(images.normalize(img))
    assert back == img
    # distinct pixel values stay distinct
    n = images.normalize(img, np.float64)
    assert len(np.unique(n.values)) == 256


def test_denormalize_clamps():
    n = images.NormalizedImage(np.array([[-2.0, 2.0]]), payload_len=2)
    out = images.denormalize(n)
    assert out.pixels.tolist() == [[0, 255]]


def test_png_roundtrip(tmp_path):
    img = images.bytes_to_image(bytes(range(250)), width=16)
    path = tmp_path / "a.png"
    images.write_png(img, path)
    back = images.read_png(path)
    assert back == img  # sidecar preserves payload_len


def test_png_16bit_rejected(tmp_path):
    path = tmp_path / "deep.png"
    Image.fromarray(np.zeros((4, 4), dtype=np.uint16), mode="I;16").save(path)
    with pytest.raises(UnsupportedFormatError):
        images.read_png(path)


def test_png_rgb_rejected(tmp_path):
    path = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB").save(path)
    with pytest.raises(UnsupportedFormatError):
        images.read_png(path)


def test_png_216x64_shape(tmp_path):
    img = images.bytes_to_image(bytes(216 * 64), width=64)
    path = tmp_path / "malimg_style.png"
    images.write_png(img, path)
    back = images.read_png(path)
    assert (back.height, back.width) == (216, 64)


def test_read_missing_file(tmp_path):
    with pytest.raises(OSError):
        images.read_png(tmp_path / "nope.png")
