"""
Patch Generation-to-Selection Mask Selector
===========================================
The end-to-end mask decision for one image:

1. Seed a small random candidate set (initial_ratio of the patches)
2. Score every other patch by its refined similarity S' to the candidates,
   preferring 8-adjacent candidates on the patch grid
3. Exempt patches with high edge scores from masking (edge retention),
   yielding to the lower masking bound when necessary
4. Rank by score and keep a count between lower_count and upper_count

A FLIP-style uniform random mask is provided as the reference baseline.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from edge import canny, patch_edge_scores, sobel_magnitude
from image_io import PatchGrid, to_grayscale, unpatchify
from otn import SinkhornConfig, refine
from pgs_utils import ConfigurationError, ShapeError, StageTimer, maybe_stage
from similarity import (
    BlendSchedule,
    alpha_schedule,
    blend,
    feature_similarity,
    image_similarity,
)


NEIGHBORHOODS = ("adjacent", "global")
EDGE_DETECTORS = ("sobel", "canny")

# Guards floor(ratio * n) against products like 0.3 * 10 = 2.9999999999999996
_FLOOR_SLACK = 1e-9

K_RULE = (
    "k = clamp(#{p : score_p >= median(finite scores)}, lower_count, upper_count); "
    "order by score desc, ties by ascending patch index"
)


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class MaskingConfig:
    """
    Masking ratios, retention threshold and ablation switches.

    The defaults are the dynamic [0.3, 0.5] variant with both edge
    detection and optimal transport normalization enabled.
    """
    initial_ratio: float = 0.05
    lower_ratio: float = 0.3
    upper_ratio: float = 0.5
    edge_quantile: float = 0.7
    neighborhood: str = "adjacent"
    seed: int = 0
    use_edge_detection: bool = True
    use_otn: bool = True
    edge_detector: str = "sobel"
    canny_low: float = 50.0
    canny_high: float = 150.0

    def __post_init__(self):
        if not 0.0 < self.initial_ratio <= self.lower_ratio <= self.upper_ratio < 1.0:
            raise ConfigurationError(
                "ratios must satisfy 0 < initial_ratio <= lower_ratio <= upper_ratio < 1, got "
                f"initial={self.initial_ratio} lower={self.lower_ratio} upper={self.upper_ratio}"
            )
        if not 0.0 <= self.edge_quantile <= 1.0:
            raise ConfigurationError(f"edge_quantile must be in [0, 1], got {self.edge_quantile}")
        if self.neighborhood not in NEIGHBORHOODS:
            raise ConfigurationError(
                f"neighborhood must be one of {NEIGHBORHOODS}, got {self.neighborhood!r}"
            )
        if self.edge_detector not in EDGE_DETECTORS:
            raise ConfigurationError(
                f"edge_detector must be one of {EDGE_DETECTORS}, got {self.edge_detector!r}"
            )
        if self.canny_low < 0 or self.canny_low > self.canny_high:
            raise ConfigurationError(
                f"Canny thresholds need 0 <= low <= high, got {self.canny_low}, {self.canny_high}"
            )

    @classmethod
    def fixed(cls, **overrides) -> "MaskingConfig":
        """Fixed 0.5 variant (lower = upper = 0.5)."""
        return cls(**{"lower_ratio": 0.5, "upper_ratio": 0.5, **overrides})

    @classmethod
    def dynamic(cls, **overrides) -> "MaskingConfig":
        """Dynamic variant adjusting within [0.3, 0.5]."""
        return cls(**{"lower_ratio": 0.3, "upper_ratio": 0.5, **overrides})

    def lower_count(self, n_patches: int) -> int:
        return int(math.floor(self.lower_ratio * n_patches + _FLOOR_SLACK))

    def upper_count(self, n_patches: int) -> int:
        return int(math.floor(self.upper_ratio * n_patches + _FLOOR_SLACK))


VARIANTS = {
    "pgs0.5": MaskingConfig.fixed,
    "pgs0.3": MaskingConfig.dynamic,
}


@dataclass(frozen=True)
class CandidateSet:
    indices: Tuple[int, ...]


@dataclass(frozen=True)
class EdgeRetention:
    """Scores after the edge rule, with the patches it exempted or released."""
    scores: np.ndarray
    retained: Tuple[int, ...]
    released: Tuple[int, ...]
    threshold: Optional[float]

    @property
    def constraint_warning(self) -> bool:
        return len(self.released) > 0


@dataclass
class MaskPlan:
    """
    Final masking decision for one image.

    `released_by_bound` lists high-edge patches that the lower bound forced
    back into the maskable pool; `constraint_warning` is set whenever that
    happened.
    """
    masked: Tuple[int, ...]
    ratio: float
    scores: np.ndarray
    retained_by_edge: Tuple[int, ...]
    grid_h: int
    grid_w: int
    patch_size: int
    candidates: Tuple[int, ...] = ()
    released_by_bound: Tuple[int, ...] = ()
    constraint_warning: bool = False
    mask_threshold: Optional[float] = None
    strategy: str = "pgs"

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def keep_mask(self) -> np.ndarray:
        """Boolean vector, True for patches that survive masking."""
        keep = np.ones(self.n_patches, dtype=bool)
        keep[list(self.masked)] = False
        return keep

    def to_record(self, image_id: str, config_echo: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """JSON-ready record; non-finite sentinel scores are written as null."""
        return {
            "image_id": image_id,
            "strategy": self.strategy,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "patch_size": self.patch_size,
            "masked": [int(i) for i in self.masked],
            "ratio": self.ratio,
            "retained_by_edge": [int(i) for i in self.retained_by_edge],
            "released_by_bound": [int(i) for i in self.released_by_bound],
            "constraint_warning": self.constraint_warning,
            "candidates": [int(i) for i in self.candidates],
            "mask_threshold": self.mask_threshold,
            "k_rule": K_RULE if self.strategy == "pgs" else "k = upper_count, uniform random",
            "scores": [float(s) if np.isfinite(s) else None for s in self.scores],
            "config_echo": config_echo or {},
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "MaskPlan":
        """Rebuild a plan from to_record() output; null scores become -inf for
        edge-retained patches, +inf for the other candidates and -inf otherwise."""
        try:
            candidates = set(record.get("candidates", ())) - set(record.get("retained_by_edge", ()))
            scores = np.array(
                [(np.inf if i in candidates else -np.inf) if s is None else s
                 for i, s in enumerate(record["scores"])],
                dtype=np.float64,
            )
            return cls(
                masked=tuple(record["masked"]),
                ratio=float(record["ratio"]),
                scores=scores,
                retained_by_edge=tuple(record.get("retained_by_edge", ())),
                grid_h=int(record["grid_h"]),
                grid_w=int(record["grid_w"]),
                patch_size=int(record["patch_size"]),
                candidates=tuple(record.get("candidates", ())),
                released_by_bound=tuple(record.get("released_by_bound", ())),
                constraint_warning=bool(record.get("constraint_warning", False)),
                mask_threshold=record.get("mask_threshold"),
                strategy=record.get("strategy", "pgs"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed mask record: missing or invalid {exc}") from None


# ============================================================================
# PIPELINE STAGES
# ============================================================================

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def candidate_count(n_patches: int, cfg: MaskingConfig) -> int:
    return min(n_patches, max(1, _round_half_up(cfg.initial_ratio * n_patches)))


def init_candidates(n_patches: int, cfg: MaskingConfig, rng: np.random.Generator) -> CandidateSet:
    """
    Uniform sample without replacement of round(initial_ratio * n) patches (min 1).

    The sample is a prefix of one seeded permutation, so a larger
    initial_ratio with the same seed always contains the smaller set.
    """
    if n_patches < 1:
        raise ConfigurationError(f"n_patches must be >= 1, got {n_patches}")
    order = rng.permutation(n_patches)
    k = candidate_count(n_patches, cfg)
    return CandidateSet(tuple(sorted(int(i) for i in order[:k])))


def grid_adjacency(grid_h: int, grid_w: int) -> np.ndarray:
    """(n, n) boolean 8-neighborhood adjacency on a row-major patch grid."""
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    dr = np.abs(rows[:, None] - rows[None, :])
    dc = np.abs(cols[:, None] - cols[None, :])
    return (dr <= 1) & (dc <= 1) & ~((dr == 0) & (dc == 0))


def expansion_scores(S_prime: np.ndarray, cand: CandidateSet, cfg: MaskingConfig,
                     grid_h: int, grid_w: int) -> np.ndarray:
    """
    Score each non-candidate patch by its mean S' to the candidates.

    In "adjacent" mode only 8-adjacent candidates are averaged; patches with
    no adjacent candidate fall back to the mean over all candidates.
    Candidates score +inf.

    Raises:
        ShapeError: S_prime is not (n, n) for n = grid_h * grid_w, or a
            candidate index is out of range
    """
    n = grid_h * grid_w
    if S_prime.shape != (n, n):
        raise ShapeError(f"S' has shape {S_prime.shape}, expected ({n}, {n})")
    idx = np.asarray(cand.indices, dtype=int)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise ShapeError(f"candidate indices {cand.indices} out of range for {n} patches")

    to_candidates = S_prime[:, idx]
    scores = to_candidates.mean(axis=1)

    if cfg.neighborhood == "adjacent":
        near = grid_adjacency(grid_h, grid_w)[:, idx]
        near_count = near.sum(axis=1)
        near_sum = np.where(near, to_candidates, 0.0).sum(axis=1)
        has_near = near_count > 0
        scores = np.where(has_near, near_sum / np.maximum(near_count, 1), scores)

    scores = scores.astype(np.float64)
    scores[idx] = np.inf
    return scores


def apply_edge_retention(scores: np.ndarray, edge_scores: np.ndarray,
                         cfg: MaskingConfig, lower_count: int) -> EdgeRetention:
    """
    Exempt high-edge patches from masking.

    A patch is retained when its edge score is at least the edge_quantile
    quantile of the nonzero edge scores; its score becomes -inf. If fewer
    than lower_count patches would remain maskable, retained patches are
    released in order of lowest edge score (ties by index) until the lower
    bound is reachable again.
    """
    if scores.shape != edge_scores.shape:
        raise ShapeError(f"scores {scores.shape} and edge scores {edge_scores.shape} differ")

    adjusted = scores.astype(np.float64, copy=True)
    nonzero = edge_scores[edge_scores > 0]
    if nonzero.size == 0:
        return EdgeRetention(adjusted, (), (), None)

    threshold = float(np.quantile(nonzero, cfg.edge_quantile))
    retained = np.flatnonzero((edge_scores >= threshold) & (edge_scores > 0))

    shortfall = lower_count - (scores.size - retained.size)
    released = np.array([], dtype=int)
    if shortfall > 0:
        by_weakest = retained[np.lexsort((retained, edge_scores[retained]))]
        released = np.sort(by_weakest[:shortfall])
        retained = np.setdiff1d(retained, released)

    adjusted[retained] = -np.inf
    return EdgeRetention(
        adjusted,
        tuple(int(i) for i in retained),
        tuple(int(i) for i in released),
        threshold,
    )


def select_mask(scores: np.ndarray, retained: Tuple[int, ...], cfg: MaskingConfig,
                grid_h: int, grid_w: int, patch_size: int,
                candidates: Tuple[int, ...] = (),
                released: Tuple[int, ...] = ()) -> MaskPlan:
    """
    Rank patches and take the top k within the masking bounds.

    Patches are ordered by score descending (candidates first through +inf,
    retained last through -inf) with ties broken by ascending index. The
    count is the number of patches scoring at least the median of the finite
    scores, clamped to [lower_count, upper_count]; for lower == upper the
    count is exactly that bound. Should the bounds still force a retained
    patch into the mask, it moves to `released_by_bound` and the constraint
    warning is raised.
    """
    n = grid_h * grid_w
    if scores.shape != (n,):
        raise ShapeError(f"scores have shape {scores.shape}, expected ({n},)")
    lower, upper = cfg.lower_count(n), cfg.upper_count(n)
    if lower > upper:
        raise ConfigurationError(f"lower_count {lower} exceeds upper_count {upper}")

    finite = scores[np.isfinite(scores)]
    threshold = float(np.median(finite)) if finite.size else None
    if threshold is None:
        above = int(np.sum(scores == np.inf))
    else:
        above = int(np.sum(scores >= threshold))
    k = min(max(above, lower), upper)

    order = np.lexsort((np.arange(n), -scores))
    masked = np.sort(order[:k])

    forced = np.intersect1d(masked, np.asarray(retained, dtype=int))
    kept_retained = tuple(int(i) for i in retained if i not in set(forced.tolist()))
    all_released = tuple(sorted(set(released) | set(int(i) for i in forced)))

    return MaskPlan(
        masked=tuple(int(i) for i in masked),
        ratio=k / n,
        scores=scores,
        retained_by_edge=kept_retained,
        grid_h=grid_h,
        grid_w=grid_w,
        patch_size=patch_size,
        candidates=tuple(candidates),
        released_by_bound=all_released,
        constraint_warning=len(all_released) > 0,
        mask_threshold=threshold,
    )


# ============================================================================
# FULL PIPELINE
# ============================================================================

def compute_edge_scores(patches: PatchGrid, cfg: MaskingConfig) -> np.ndarray:
    """Whole-image edge map of the reassembled grid, aggregated per patch."""
    gray = to_grayscale(unpatchify(patches))
    if cfg.edge_detector == "canny":
        em = canny(gray, cfg.canny_low, cfg.canny_high)
    else:
        em = sobel_magnitude(gray)
    return patch_edge_scores(em, patches.grid_h, patches.grid_w, patches.patch_size).scores


def generate_mask(patches: PatchGrid, features: np.ndarray, epoch: int,
                  cfg: MaskingConfig,
                  sinkhorn_cfg: SinkhornConfig = SinkhornConfig(),
                  sched: BlendSchedule = BlendSchedule(),
                  timer: Optional[StageTimer] = None) -> MaskPlan:
    """
    Run the full generation-to-selection pipeline on one image.

    Args:
        patches: Patch grid of the image
        features: (n_patches, d) patch features, the S_x source
        epoch: Training epoch, drives the alpha schedule
        cfg: Masking configuration, including the RNG seed
        sinkhorn_cfg: Sinkhorn iteration settings
        sched: Alpha blend schedule
        timer: Optional per-stage timer (edge, similarity, sinkhorn, selection)

    Returns:
        Deterministic MaskPlan for fixed inputs and seed
    """
    n = patches.n_patches
    if features.shape[0] != n:
        raise ShapeError(f"features have {features.shape[0]} rows, grid has {n} patches")

    with maybe_stage(timer, "edge"):
        edge_scores = compute_edge_scores(patches, cfg) if cfg.use_edge_detection else None

    with maybe_stage(timer, "similarity"):
        S = blend(feature_similarity(features), image_similarity(patches),
                  alpha_schedule(epoch, sched))

    with maybe_stage(timer, "sinkhorn"):
        S_prime = refine(S, sinkhorn_cfg) if cfg.use_otn else S

    with maybe_stage(timer, "selection"):
        rng = np.random.default_rng(cfg.seed)
        cand = init_candidates(n, cfg, rng)
        scores = expansion_scores(S_prime, cand, cfg, patches.grid_h, patches.grid_w)
        retained, released = (), ()
        if edge_scores is not None:
            retention = apply_edge_retention(scores, edge_scores, cfg, cfg.lower_count(n))
            scores, retained, released = retention.scores, retention.retained, retention.released
        plan = select_mask(scores, retained, cfg, patches.grid_h, patches.grid_w,
                           patches.patch_size, cand.indices, released)
    return plan


def random_mask(patches: PatchGrid, cfg: MaskingConfig,
                timer: Optional[StageTimer] = None) -> MaskPlan:
    """FLIP-style baseline: mask exactly upper_count patches uniformly at random."""
    n = patches.n_patches
    with maybe_stage(timer, "selection"):
        rng = np.random.default_rng(cfg.seed)
        k = cfg.upper_count(n)
        masked = np.sort(rng.permutation(n)[:k])
    return MaskPlan(
        masked=tuple(int(i) for i in masked),
        ratio=k / n,
        scores=np.zeros(n),
        retained_by_edge=(),
        grid_h=patches.grid_h,
        grid_w=patches.grid_w,
        patch_size=patches.patch_size,
        strategy="random",
    )
