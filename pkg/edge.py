"""
Edge Detection
==============
Whole-image edge maps and their per-patch aggregation:
- Sobel gradient magnitude (default detector)
- Canny binary edges (ablation alternative)
- Mean-per-patch edge scores, max-normalized per image
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from image_io import GrayImage
from pgs_utils import ConfigurationError, ShapeError


SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

CANNY_SIGMA = 1.0
CANNY_KERNEL_SIZE = 5

# 8-connectivity for hysteresis tracking
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class EdgeMap:
    """Non-negative per-pixel edge strength, shaped (height, width)."""
    magnitude: np.ndarray

    @property
    def height(self) -> int:
        return self.magnitude.shape[0]

    @property
    def width(self) -> int:
        return self.magnitude.shape[1]


@dataclass(frozen=True)
class EdgeScores:
    """Per-patch edge score in [0, 1], row-major over the patch grid."""
    scores: np.ndarray


def _sobel_gradients(plane: np.ndarray):
    # correlate (not convolve) so Gx is positive for dark-to-bright left-to-right
    gx = ndimage.correlate(plane, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(plane, SOBEL_Y, mode="nearest")
    return gx, gy


def sobel_magnitude(g: GrayImage) -> EdgeMap:
    """
    Sobel gradient magnitude sqrt(Gx² + Gy²) with edge-replicate borders.

    Raises:
        ConfigurationError: image smaller than the 3x3 kernel
    """
    if g.height < 3 or g.width < 3:
        raise ConfigurationError(f"image {g.width}x{g.height} smaller than 3x3 Sobel kernel")
    gx, gy = _sobel_gradients(g.data.astype(np.float64))
    return EdgeMap(np.hypot(gx, gy))


def gaussian_kernel(size: int = CANNY_KERNEL_SIZE, sigma: float = CANNY_SIGMA) -> np.ndarray:
    """Normalized square Gaussian kernel."""
    half = size // 2
    axis = np.arange(-half, half + 1, dtype=np.float64)
    one_d = np.exp(-(axis ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(one_d, one_d)
    return kernel / kernel.sum()


def _non_maximum_suppression(magnitude: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """
    Keep pixels that are maxima along their gradient direction.

    A pixel survives when it is strictly greater than the neighbor behind it
    and at least equal to the neighbor ahead, so plateaus of two equal pixels
    thin to one.
    """
    h, w = magnitude.shape
    padded = np.pad(magnitude, 1, mode="constant")
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0

    # (dy, dx) of the neighbor ahead along the gradient, rows grow downwards
    directions = (
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (1, 1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, -1)),
    )
    keep = np.zeros((h, w), dtype=bool)
    for selector, (dy, dx) in directions:
        ahead = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        behind = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= selector & (magnitude > behind) & (magnitude >= ahead)
    return np.where(keep & (magnitude > 0), magnitude, 0.0)


def canny(g: GrayImage, low: float, high: float, sigma: float = CANNY_SIGMA) -> EdgeMap:
    """
    Canny edge detector producing a binary (0/1) EdgeMap.

    Steps: 5x5 Gaussian smoothing, Sobel gradients, non-maximum suppression,
    double-threshold hysteresis with 8-connectivity. Weak pixels are those
    with suppressed magnitude >= low; components without any pixel >= high
    are dropped.

    Raises:
        ConfigurationError: low < 0, low > high, or image smaller than 3x3
    """
    if low < 0 or low > high:
        raise ConfigurationError(f"Canny thresholds need 0 <= low <= high, got low={low} high={high}")
    if g.height < 3 or g.width < 3:
        raise ConfigurationError(f"image {g.width}x{g.height} smaller than 3x3 Sobel kernel")

    smoothed = ndimage.correlate(
        g.data.astype(np.float64), gaussian_kernel(sigma=sigma), mode="nearest"
    )
    gx, gy = _sobel_gradients(smoothed)
    suppressed = _non_maximum_suppression(np.hypot(gx, gy), gx, gy)

    weak = (suppressed >= low) & (suppressed > 0)
    strong = suppressed >= high
    labels, n_components = ndimage.label(weak, structure=_EIGHT_CONNECTED)
    if n_components == 0 or not strong.any():
        return EdgeMap(np.zeros_like(suppressed))

    anchored = np.zeros(n_components + 1, dtype=bool)
    anchored[np.unique(labels[strong & weak])] = True
    anchored[0] = False
    return EdgeMap(anchored[labels].astype(np.float64))


def patch_edge_scores(em: EdgeMap, grid_h: int, grid_w: int, patch_size: int) -> EdgeScores:
    """
    Mean edge magnitude per patch, divided by the image's largest patch mean.

    Returns all zeros when the edge map carries no energy.

    Raises:
        ShapeError: edge map dims differ from grid_h*patch_size x grid_w*patch_size
    """
    expected = (grid_h * patch_size, grid_w * patch_size)
    if em.magnitude.shape != expected:
        raise ShapeError(f"edge map {em.magnitude.shape} does not match patch grid {expected}")

    blocks = em.magnitude.reshape(grid_h, patch_size, grid_w, patch_size)
    means = blocks.mean(axis=(1, 3)).reshape(-1)
    peak = means.max()
    if peak <= 0:
        return EdgeScores(np.zeros_like(means))
    return EdgeScores(means / peak)
