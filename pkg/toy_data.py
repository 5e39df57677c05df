"""
Synthetic Image-Caption Pairs
=============================
Deterministic generator of paired data for the toy contrastive harness.

Each image is uniform noise around mid-gray with one rectangular region,
aligned to the patch grid, filled with a tiled glyph (square, disc, cross or
triangle) in one of eight colors. The caption is two token ids: the color
and the glyph shape. Because every region patch is identical, the class is
recoverable from mean-pooled patch pixels, which is all the toy image
encoder sees.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from image_io import Image, PatchGrid, patchify
from pgs_utils import ConfigurationError


COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 200, 210),
    "orange": (240, 140, 30),
    "white": (235, 235, 235),
}
SHAPES = ("square", "disc", "cross", "triangle")

COLOR_NAMES = tuple(COLORS)
VOCAB = COLOR_NAMES + SHAPES
VOCAB_SIZE = len(VOCAB)

GLYPH_INK_BACKGROUND = (20, 20, 20)
NOISE_CENTER = 128
NOISE_AMPLITUDE = 24

# Held-out pairs draw from a seed stream disjoint from training batches
_EVAL_STREAM = 1_000_003


@dataclass(frozen=True)
class PairBatch:
    images: List[PatchGrid]
    tokens: List[List[int]]
    labels: Tuple[int, ...]


def glyph(shape: str, size: int) -> np.ndarray:
    """Boolean (size, size) stamp of a shape, tiled once per patch."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "square":
        inset = max(1, size // 8)
        return (yy >= inset) & (yy < size - inset) & (xx >= inset) & (xx < size - inset)
    if shape == "disc":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0 - 0.5) ** 2
    if shape == "cross":
        arm = max(1, size // 4)
        lo, hi = int(c - arm / 2 + 0.5), int(c + arm / 2 + 0.5)
        return ((yy >= lo) & (yy <= hi)) | ((xx >= lo) & (xx <= hi))
    if shape == "triangle":
        return xx <= yy
    raise ConfigurationError(f"unknown shape {shape!r}")


class SyntheticPairs:
    """
    Seeded generator of (image, caption) pairs.

    Args:
        seed: Base seed; batch `step` uses its own derived stream
        image_size: Square image side in pixels
        patch_size: Patch side; must divide image_size
    """

    def __init__(self, seed: int = 0, image_size: int = 112, patch_size: int = 8):
        if image_size % patch_size:
            raise ConfigurationError(
                f"image_size {image_size} must be a multiple of patch_size {patch_size}"
            )
        self.seed = seed
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self._tiles = {
            (color, shape): self._tile(color, shape)
            for color in COLOR_NAMES for shape in SHAPES
        }

    @property
    def n_classes(self) -> int:
        return len(COLOR_NAMES) * len(SHAPES)

    def _tile(self, color: str, shape: str) -> np.ndarray:
        stamp = glyph(shape, self.patch_size)
        tile = np.empty((self.patch_size, self.patch_size, 3), dtype=np.uint8)
        tile[:] = GLYPH_INK_BACKGROUND
        tile[stamp] = COLORS[color]
        return tile

    def caption(self, label: int) -> List[int]:
        color_id, shape_id = divmod(label, len(SHAPES))
        return [color_id, len(COLOR_NAMES) + shape_id]

    def render(self, label: int, rng: np.random.Generator) -> Image:
        """Draw one image of the given class."""
        color_id, shape_id = divmod(label, len(SHAPES))
        size, p = self.image_size, self.patch_size
        noise = rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1, size=(size, size, 3))
        data = (NOISE_CENTER + noise).astype(np.uint8)

        lo = max(1, self.grid // 3)
        hi = max(lo, self.grid // 2 + 1)
        rows, cols = rng.integers(lo, hi + 1, size=2)
        top = int(rng.integers(0, self.grid - rows + 1))
        left = int(rng.integers(0, self.grid - cols + 1))
        tile = self._tiles[(COLOR_NAMES[color_id], SHAPES[shape_id])]
        region = np.tile(tile, (int(rows), int(cols), 1))
        data[top * p:(top + rows) * p, left * p:(left + cols) * p] = region
        return Image(data)

    def _draw(self, rng: np.random.Generator, count: int) -> PairBatch:
        labels = rng.integers(0, self.n_classes, size=count)
        images = [patchify(self.render(int(label), rng), self.patch_size) for label in labels]
        tokens = [self.caption(int(label)) for label in labels]
        return PairBatch(images, tokens, tuple(int(label) for label in labels))

    def batch(self, step: int, batch_size: int) -> PairBatch:
        """Training batch for a given step; identical for identical (seed, step)."""
        return self._draw(np.random.default_rng([self.seed, step]), batch_size)

    def held_out(self, count: int = 64) -> PairBatch:
        return self._draw(np.random.default_rng([self.seed, _EVAL_STREAM]), count)
