"""
Image I/O and Patch Grid
========================
Raster decoding (PPM P6 bit-exact, PNG through Pillow), grayscale conversion,
patch grid construction and mask overlay rendering.

Images are held as (height, width, 3) uint8 numpy arrays wrapped in small
immutable dataclasses; every function here is pure.
"""

import io
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Tuple, Union

import numpy as np

from pgs_utils import ConfigurationError, ImageDecodeError, ShapeError

if TYPE_CHECKING:
    from selector import MaskPlan


# --- Format Constants ---
PPM_MAGIC = b"P6"
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
SUPPORTED_MAXVAL = 255

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_WHITESPACE = b" \t\n\r\x0b\x0c"


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class Image:
    """8-bit RGB raster, data shaped (height, width, 3)."""
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeError(f"image data must be (H, W, 3), got {self.data.shape}")
        if self.data.dtype != np.uint8:
            raise ShapeError(f"image data must be uint8, got {self.data.dtype}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class GrayImage:
    """Real-valued luminance plane in [0, 255], shaped (height, width)."""
    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    """
    Row-major grid of square patches.

    `patches` has shape (grid_h * grid_w, patch_size * patch_size * 3);
    each row is one patch flattened in (row, column, channel) order.
    """
    grid_h: int
    grid_w: int
    patch_size: int
    patches: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


# ============================================================================
# DECODING / ENCODING
# ============================================================================

def _read_header_token(raw: bytes, pos: int) -> Tuple[bytes, int]:
    """Skip whitespace and '#' comments, then read one header token."""
    n = len(raw)
    while pos < n:
        if raw[pos] in _WHITESPACE:
            pos += 1
        elif raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and raw[pos] not in _WHITESPACE and raw[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageDecodeError("unexpected end of PPM header", start)
    return raw[start:pos], pos


def load_ppm(raw: bytes) -> Image:
    """
    Decode a binary PPM (P6, maxval 255) without any color transform.

    Args:
        raw: Complete file contents

    Returns:
        Decoded Image

    Raises:
        ImageDecodeError: Bad magic, malformed header, unsupported maxval or
            truncated payload; the message names the byte offset.
    """
    if raw[:2] != PPM_MAGIC:
        raise ImageDecodeError(f"bad magic {raw[:2]!r}, expected {PPM_MAGIC!r}", 0)

    pos = 2
    values = []
    for field in ("width", "height", "maxval"):
        token_start = pos
        token, pos = _read_header_token(raw, pos)
        if not re.fullmatch(rb"[0-9]+", token):
            raise ImageDecodeError(f"malformed {field} {token!r}", token_start)
        values.append(int(token))
    width, height, maxval = values

    if width == 0 or height == 0:
        raise ImageDecodeError(f"zero image dimension {width}x{height}", 2)
    if maxval != SUPPORTED_MAXVAL:
        raise ImageDecodeError(f"unsupported maxval {maxval}", pos)
    if pos >= len(raw) or raw[pos] not in _WHITESPACE:
        raise ImageDecodeError("missing whitespace after maxval", pos)
    pos += 1

    expected = width * height * 3
    available = len(raw) - pos
    if available < expected:
        raise ImageDecodeError(
            f"truncated payload: expected {expected} bytes, found {available}",
            len(raw),
        )

    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=pos)
    return Image(data.reshape(height, width, 3).copy())


def encode_ppm(img: Image) -> bytes:
    """Encode an Image as binary PPM (P6, maxval 255)."""
    header = f"P6\n{img.width} {img.height}\n{SUPPORTED_MAXVAL}\n".encode("ascii")
    return header + np.ascontiguousarray(img.data).tobytes()


def load_png(raw: bytes) -> Image:
    """Decode PNG through Pillow; alpha and palette images are flattened to RGB."""
    from PIL import Image as PILImage

    try:
        with PILImage.open(io.BytesIO(raw)) as pil:
            rgb = pil.convert("RGB")
            return Image(np.asarray(rgb, dtype=np.uint8).copy())
    except OSError as e:
        raise ImageDecodeError(f"PNG decode failed: {e}", 0) from e


def encode_png(img: Image) -> bytes:
    from PIL import Image as PILImage

    buffer = io.BytesIO()
    PILImage.fromarray(img.data, mode="RGB").save(buffer, format="PNG")
    return buffer.getvalue()


def load_image(path: Union[str, Path]) -> Image:
    """Load PPM or PNG, chosen by file signature."""
    raw = Path(path).read_bytes()
    if raw.startswith(PNG_SIGNATURE):
        return load_png(raw)
    return load_ppm(raw)


def save_image(path: Union[str, Path], img: Image) -> None:
    """Save as PNG when the suffix is .png, PPM otherwise."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_png(img) if path.suffix.lower() == ".png" else encode_ppm(img)
    path.write_bytes(payload)


# ============================================================================
# PIXEL OPERATIONS
# ============================================================================

def to_grayscale(img: Image) -> GrayImage:
    return GrayImage(img.data.astype(np.float64) @ LUMA_WEIGHTS)


def _crop_offsets(height: int, width: int, patch_size: int) -> Tuple[int, int, int, int]:
    """(top, left, cropped_h, cropped_w) of the centered patch-aligned region."""
    if patch_size <= 0:
        raise ConfigurationError(f"patch_size must be positive, got {patch_size}")
    if patch_size > height or patch_size > width:
        raise ConfigurationError(
            f"patch_size {patch_size} larger than image {width}x{height}"
        )
    cropped_h = (height // patch_size) * patch_size
    cropped_w = (width // patch_size) * patch_size
    return (height - cropped_h) // 2, (width - cropped_w) // 2, cropped_h, cropped_w


def center_crop(img: Image, patch_size: int) -> Image:
    """Crop to the largest centered region whose sides are multiples of patch_size."""
    top, left, h, w = _crop_offsets(img.height, img.width, patch_size)
    if (h, w) == (img.height, img.width):
        return img
    return Image(img.data[top:top + h, left:left + w].copy())


def patchify(img: Image, patch_size: int) -> PatchGrid:
    """
    Split an image into a row-major grid of flattened patches.

    Non-divisible images are center-cropped first. Pixel values are copied
    unchanged.

    Raises:
        ConfigurationError: patch_size is 0 or larger than the image
    """
    cropped = center_crop(img, patch_size)
    grid_h = cropped.height // patch_size
    grid_w = cropped.width // patch_size
    blocks = cropped.data.reshape(grid_h, patch_size, grid_w, patch_size, 3)
    patches = blocks.transpose(0, 2, 1, 3, 4).reshape(grid_h * grid_w, -1)
    return PatchGrid(grid_h, grid_w, patch_size, np.ascontiguousarray(patches))


def unpatchify(grid: PatchGrid) -> Image:
    """Reassemble the (cropped) image from its patch grid."""
    p = grid.patch_size
    blocks = grid.patches.reshape(grid.grid_h, grid.grid_w, p, p, 3)
    data = blocks.transpose(0, 2, 1, 3, 4).reshape(grid.grid_h * p, grid.grid_w * p, 3)
    return Image(np.ascontiguousarray(data))


def render_mask_overlay(img: Image, plan: "MaskPlan", dim: float = 0.35) -> Image:
    """
    Darken masked patches for visual inspection.

    Masked pixels are multiplied by `dim` and rounded half-up; pixels outside
    masked patches (including any center-crop margin) are untouched.

    Raises:
        ConfigurationError: dim outside [0, 1]
        ShapeError: plan grid does not match the image's patch grid
    """
    if not 0.0 <= dim <= 1.0:
        raise ConfigurationError(f"dim must be in [0, 1], got {dim}")
    top, left, h, w = _crop_offsets(img.height, img.width, plan.patch_size)
    p = plan.patch_size
    if (h // p, w // p) != (plan.grid_h, plan.grid_w):
        raise ShapeError(
            f"plan grid {plan.grid_h}x{plan.grid_w} does not match image grid {h // p}x{w // p}"
        )

    out = img.data.copy()
    for index in plan.masked:
        row, col = divmod(int(index), plan.grid_w)
        y, x = top + row * p, left + col * p
        block = out[y:y + p, x:x + p].astype(np.float64)
        out[y:y + p, x:x + p] = np.floor(block * dim + 0.5).astype(np.uint8)
    return Image(out)
