"""
Patch Similarity
================
Builds the blended patch-similarity matrix

    S = alpha * S_x + (1 - alpha) * S_I

from feature-based (S_x) and image-based (S_I) cosine affinities, with
alpha ramped over training epochs.
"""

from dataclasses import dataclass

import numpy as np

from image_io import PatchGrid
from pgs_utils import ConfigurationError, ShapeError


# --- Default Blend Schedule ---
DEFAULT_ALPHA_MIN = 0.0
DEFAULT_ALPHA_MAX = 0.8
DEFAULT_TOTAL_EPOCHS = 32

# Rows with a norm below this are treated as zero rows
ZERO_ROW_NORM = 1e-12


@dataclass(frozen=True)
class BlendSchedule:
    """Linear alpha ramp from alpha_min (epoch 0) to alpha_max (epoch >= ramp_epochs)."""
    alpha_min: float = DEFAULT_ALPHA_MIN
    alpha_max: float = DEFAULT_ALPHA_MAX
    ramp_epochs: int = DEFAULT_TOTAL_EPOCHS // 2

    def __post_init__(self):
        for name in ("alpha_min", "alpha_max"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {value}")
        if self.alpha_min > self.alpha_max:
            raise ConfigurationError(
                f"alpha_min {self.alpha_min} exceeds alpha_max {self.alpha_max}"
            )
        if self.ramp_epochs < 0:
            raise ConfigurationError(f"ramp_epochs must be >= 0, got {self.ramp_epochs}")

    @classmethod
    def for_total_epochs(cls, total_epochs: int, alpha_min: float = DEFAULT_ALPHA_MIN,
                         alpha_max: float = DEFAULT_ALPHA_MAX) -> "BlendSchedule":
        """Default ramp: reach alpha_max halfway through training."""
        return cls(alpha_min, alpha_max, total_epochs // 2)

    @classmethod
    def constant(cls, alpha: float) -> "BlendSchedule":
        """Fixed alpha for every epoch."""
        return cls(alpha, alpha, 0)


def normalize_rows(X: np.ndarray) -> np.ndarray:
    """Scale each nonzero row to unit L2 norm; zero rows stay zero."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    safe = np.where(norms > ZERO_ROW_NORM, norms, 1.0)
    return np.where(norms > ZERO_ROW_NORM, X / safe, 0.0)


def cosine_similarity(X: np.ndarray) -> np.ndarray:
    """
    S = X Xᵀ for a row-normalized X.

    The result is symmetrized and clipped to [-1, 1] to absorb rounding.
    """
    S = X @ X.T
    S = 0.5 * (S + S.T)
    return np.clip(S, -1.0, 1.0)


def blend(S_x: np.ndarray, S_I: np.ndarray, alpha: float) -> np.ndarray:
    """
    Elementwise convex combination alpha * S_x + (1 - alpha) * S_I.

    Raises:
        ShapeError: the matrices differ in shape
        ConfigurationError: alpha outside [0, 1]
    """
    if S_x.shape != S_I.shape:
        raise ShapeError(f"cannot blend {S_x.shape} with {S_I.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return S_x.copy()
    if alpha == 0.0:
        return S_I.copy()
    return alpha * S_x + (1.0 - alpha) * S_I


def alpha_schedule(epoch: int, sched: BlendSchedule) -> float:
    """
    Mixing weight for a training epoch.

    alpha = alpha_min + (alpha_max - alpha_min) * min(1, epoch / ramp_epochs),
    clamped to [alpha_min, alpha_max]. A zero-length ramp yields alpha_max.
    """
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    if sched.ramp_epochs == 0:
        return sched.alpha_max
    progress = min(1.0, epoch / sched.ramp_epochs)
    alpha = sched.alpha_min + (sched.alpha_max - sched.alpha_min) * progress
    return float(min(max(alpha, sched.alpha_min), sched.alpha_max))


# ============================================================================
# EMBEDDING SOURCES
# ============================================================================

def image_embeddings(grid: PatchGrid) -> np.ndarray:
    """Flattened patch pixels, mean-centered per patch (the S_I source)."""
    pixels = grid.patches.astype(np.float64)
    return pixels - pixels.mean(axis=1, keepdims=True)


def random_projection_features(grid: PatchGrid, dim: int, seed: int) -> np.ndarray:
    """
    Seeded fixed linear projection of patch pixels (the S_x source when no
    trained patch embedding is available).
    """
    if dim <= 0:
        raise ConfigurationError(f"feature dim must be positive, got {dim}")
    pixel_dim = grid.patches.shape[1]
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal((pixel_dim, dim)) / np.sqrt(pixel_dim)
    return (grid.patches.astype(np.float64) / 255.0 - 0.5) @ projection


def image_similarity(grid: PatchGrid) -> np.ndarray:
    """S_I: cosine similarity of mean-centered patch pixels."""
    return cosine_similarity(normalize_rows(image_embeddings(grid)))


def feature_similarity(features: np.ndarray) -> np.ndarray:
    """S_x: cosine similarity of patch features."""
    return cosine_similarity(normalize_rows(features))
