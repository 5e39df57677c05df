"""
Image I/O and Patch Grid Tests
==============================
PPM decoding against an independent byte-level reader, decode error
offsets, patch grid layout, center cropping, grayscale weights and mask
overlay rendering.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from image_io import (
    Image,
    center_crop,
    encode_ppm,
    load_image,
    load_ppm,
    patchify,
    render_mask_overlay,
    save_image,
    to_grayscale,
    unpatchify,
)
from pgs_utils import ConfigurationError, ImageDecodeError, ShapeError, expect_error, run_test_suite
from selector import MaskPlan


def oracle_read_ppm(raw: bytes):
    """Byte-at-a-time P6 reader: returns nested lists of (r, g, b) tuples."""
    tokens = []
    i = 2
    while len(tokens) < 3:
        c = raw[i:i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            i = raw.index(b"\n", i) + 1
        else:
            j = i
            while not raw[j:j + 1].isspace() and raw[j:j + 1] != b"#":
                j += 1
            tokens.append(int(raw[i:j]))
            i = j
    i += 1
    width, height, _ = tokens
    return [
        [tuple(raw[i + 3 * (y * width + x): i + 3 * (y * width + x) + 3]) for x in range(width)]
        for y in range(height)
    ]


def random_image(rng: np.random.Generator, height: int, width: int) -> Image:
    return Image(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def test_ppm_matches_oracle_with_comments():
    rng = np.random.default_rng(11)
    for _ in range(25):
        h, w = (int(v) for v in rng.integers(1, 20, size=2))
        img = random_image(rng, h, w)
        raw = b"P6\n# written by hand\n" + f"{w}\n# width above\n{h} 255\n".encode() + img.data.tobytes()
        decoded = load_ppm(raw)
        assert decoded.data.shape == (h, w, 3)
        assert decoded.data.tolist() == [[list(px) for px in row] for row in oracle_read_ppm(raw)]


def test_encode_then_decode_is_bit_exact():
    img = random_image(np.random.default_rng(3), 7, 9)
    assert np.array_equal(load_ppm(encode_ppm(img)).data, img.data)


def test_decode_errors_name_offsets():
    err = expect_error(ImageDecodeError, load_ppm, b"P3\n1 1\n255\n\x00\x00\x00")
    assert err.offset == 0

    truncated = b"P6\n2 2\n255\n" + bytes(5)
    err = expect_error(ImageDecodeError, load_ppm, truncated)
    assert err.offset == len(truncated), err.offset
    assert "truncated" in str(err)

    err = expect_error(ImageDecodeError, load_ppm, b"P6\n1 1\n65535\n" + bytes(6))
    assert "maxval" in str(err)

    expect_error(ImageDecodeError, load_ppm, b"P6\n1 x\n255\n\x00\x00\x00")


def test_patchify_layout_is_row_major():
    img = random_image(np.random.default_rng(5), 224, 224)
    grid = patchify(img, 16)
    assert (grid.grid_h, grid.grid_w, grid.n_patches) == (14, 14, 196)
    assert grid.patches.shape == (196, 16 * 16 * 3)
    for index in (0, 13, 14, 100, 195):
        row, col = divmod(index, 14)
        block = img.data[row * 16:(row + 1) * 16, col * 16:(col + 1) * 16]
        assert np.array_equal(grid.patches[index], block.reshape(-1))


def test_center_crop_for_non_divisible_images():
    img = random_image(np.random.default_rng(6), 230, 225)
    cropped = center_crop(img, 16)
    assert (cropped.height, cropped.width) == (224, 224)
    assert np.array_equal(cropped.data, img.data[3:227, 0:224])
    grid = patchify(img, 16)
    assert np.array_equal(unpatchify(grid).data, cropped.data)


def test_patch_size_validation():
    img = random_image(np.random.default_rng(7), 8, 8)
    expect_error(ConfigurationError, patchify, img, 0)
    expect_error(ConfigurationError, patchify, img, 9)
    assert patchify(img, 8).n_patches == 1


def test_grayscale_uses_bt601_weights():
    data = np.zeros((1, 3, 3), dtype=np.uint8)
    data[0, 0] = (255, 0, 0)
    data[0, 1] = (0, 255, 0)
    data[0, 2] = (0, 0, 255)
    gray = to_grayscale(Image(data)).data[0]
    assert np.allclose(gray, [0.299 * 255, 0.587 * 255, 0.114 * 255], atol=1e-9)


def _plan(masked, grid_h=2, grid_w=2, patch_size=4):
    n = grid_h * grid_w
    return MaskPlan(masked=tuple(masked), ratio=len(masked) / n, scores=np.zeros(n),
                    retained_by_edge=(), grid_h=grid_h, grid_w=grid_w, patch_size=patch_size)


def test_overlay_dims_only_masked_patches():
    img = random_image(np.random.default_rng(8), 8, 8)
    out = render_mask_overlay(img, _plan([0, 3]), dim=0.35).data
    expected = np.floor(img.data[0:4, 0:4].astype(np.float64) * 0.35 + 0.5).astype(np.uint8)
    assert np.array_equal(out[0:4, 0:4], expected)
    assert np.array_equal(out[0:4, 4:8], img.data[0:4, 4:8])
    assert np.array_equal(out[4:8, 0:4], img.data[4:8, 0:4])

    black = render_mask_overlay(img, _plan([1]), dim=0.0).data
    assert not black[0:4, 4:8].any()
    untouched = render_mask_overlay(img, _plan([1]), dim=1.0).data
    assert np.array_equal(untouched, img.data)


def test_overlay_ignores_order_of_masked_indices():
    img = random_image(np.random.default_rng(11), 16, 16)
    masked = [0, 5, 6, 9, 15]
    reference = render_mask_overlay(img, _plan(masked, 4, 4), dim=0.35).data
    rng = np.random.default_rng(13)
    for _ in range(5):
        shuffled = [int(i) for i in rng.permutation(masked)]
        assert np.array_equal(render_mask_overlay(img, _plan(shuffled, 4, 4), dim=0.35).data,
                              reference)


def test_overlay_rejects_bad_arguments():
    img = random_image(np.random.default_rng(9), 8, 8)
    expect_error(ConfigurationError, render_mask_overlay, img, _plan([0]), 1.5)
    expect_error(ShapeError, render_mask_overlay, img, _plan([0], grid_h=3, grid_w=3), 0.35)


def test_overlay_respects_crop_offset():
    img = random_image(np.random.default_rng(10), 10, 8)
    out = render_mask_overlay(img, _plan([0]), dim=0.0).data
    # 10 rows crop to 8 starting at row 1
    assert np.array_equal(out[0], img.data[0])
    assert not out[1:5, 0:4].any()


def test_png_and_ppm_files_round_trip():
    img = random_image(np.random.default_rng(12), 6, 5)
    with tempfile.TemporaryDirectory() as tmp:
        for name in ("a.png", "a.ppm"):
            path = Path(tmp) / name
            save_image(path, img)
            assert np.array_equal(load_image(path).data, img.data)


def run_all_tests():
    return run_test_suite("IMAGE I/O TESTS", [
        ("PPM decode matches oracle", test_ppm_matches_oracle_with_comments),
        ("PPM encode/decode bit exact", test_encode_then_decode_is_bit_exact),
        ("Decode errors carry offsets", test_decode_errors_name_offsets),
        ("Patchify row-major layout", test_patchify_layout_is_row_major),
        ("Center crop", test_center_crop_for_non_divisible_images),
        ("Patch size validation", test_patch_size_validation),
        ("Grayscale weights", test_grayscale_uses_bt601_weights),
        ("Overlay dims masked patches", test_overlay_dims_only_masked_patches),
        ("Overlay index order", test_overlay_ignores_order_of_masked_indices),
        ("Overlay argument checks", test_overlay_rejects_bad_arguments),
        ("Overlay crop offset", test_overlay_respects_crop_offset),
        ("PNG/PPM file round trip", test_png_and_ppm_files_round_trip),
    ])


if __name__ == "__main__":
    sys.exit(run_all_tests())
