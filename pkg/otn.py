"""
Optimal Transport Normalization
===============================
Sinkhorn-Knopp balancing of a patch-similarity matrix into a doubly
stochastic matrix, and the refinement S' = S + Sinkhorn(S).

Two positivity kernels are available:
- "shift" (default): S is used as-is when strictly positive, otherwise it is
  shifted to S - min(S) + shift_delta
- "entropic": exp((S - row max) / epsilon), each row stabilized by its own
  maximum; a column that underflows to all zeros is rejected
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from pgs_utils import ConfigurationError, NumericInputError, ShapeError


KERNELS = ("shift", "entropic")


@dataclass(frozen=True)
class SinkhornConfig:
    max_iters: int = 50
    tol: float = 1e-6
    shift_delta: float = 1e-6
    kernel: str = "shift"
    epsilon: float = 0.05

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigurationError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol <= 0:
            raise ConfigurationError(f"tol must be > 0, got {self.tol}")
        if self.shift_delta <= 0:
            raise ConfigurationError(f"shift_delta must be > 0, got {self.shift_delta}")
        if self.kernel not in KERNELS:
            raise ConfigurationError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.epsilon <= 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class SinkhornResult:
    """
    Doubly stochastic matrix plus convergence diagnostics.

    `deviation` is the largest |row sum - 1| or |column sum - 1| after the
    final iteration; `trace` holds that value after every iteration.
    """
    matrix: np.ndarray
    deviation: float
    iterations: int
    tol: float
    trace: List[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.deviation < self.tol


def positive_kernel(S: np.ndarray, cfg: SinkhornConfig) -> np.ndarray:
    """
    Nonnegative matrix that Sinkhorn balances in place of S.

    Raises:
        NumericInputError: an entropic kernel column underflows to all zeros
    """
    if cfg.kernel == "entropic":
        # row scaling is absorbed by the first row normalization
        K = np.exp((S - S.max(axis=1, keepdims=True)) / cfg.epsilon)
        dead = np.flatnonzero(K.sum(axis=0) == 0.0)
        if dead.size:
            raise NumericInputError(
                f"entropic kernel column {int(dead[0])} underflows to zero at epsilon {cfg.epsilon}"
            )
        return K
    if S.min() > 0:
        return S.astype(np.float64, copy=True)
    return S - S.min() + cfg.shift_delta


def max_deviation(P: np.ndarray) -> float:
    rows = np.abs(P.sum(axis=1) - 1.0).max()
    cols = np.abs(P.sum(axis=0) - 1.0).max()
    return float(max(rows, cols))


def sinkhorn(S: np.ndarray, cfg: SinkhornConfig = SinkhornConfig()) -> SinkhornResult:
    """
    Alternately normalize rows then columns until every sum is within tol of 1.

    Each iteration is one complete row pass followed by one column pass, so
    the returned matrix always ends on a finished row+column cycle.

    Args:
        S: Square similarity matrix
        cfg: Iteration limits and positivity kernel

    Returns:
        SinkhornResult with the balanced matrix and deviation trace

    Raises:
        ShapeError: S is not square
        NumericInputError: S contains NaN or Inf, or an entropic kernel column underflows
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"Sinkhorn needs a square matrix, got shape {S.shape}")
    if S.size == 0:
        raise ShapeError("Sinkhorn needs a non-empty matrix")
    if not np.isfinite(S).all():
        raise NumericInputError("similarity matrix contains NaN or Inf entries")

    K = positive_kernel(S, cfg)
    n = K.shape[0]
    col_scale = np.ones(n)
    trace: List[float] = []
    P = K

    for _ in range(cfg.max_iters):
        row_scale = 1.0 / (K @ col_scale)
        col_scale = 1.0 / (K.T @ row_scale)
        P = row_scale[:, None] * K * col_scale[None, :]
        trace.append(max_deviation(P))
        if trace[-1] < cfg.tol:
            break

    return SinkhornResult(P, trace[-1], len(trace), cfg.tol, trace)


def refine(S: np.ndarray, cfg: SinkhornConfig = SinkhornConfig()) -> np.ndarray:
    """S' = S + Sinkhorn(S), without renormalizing the sum."""
    return np.asarray(S, dtype=np.float64) + sinkhorn(S, cfg).matrix
