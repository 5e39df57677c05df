"""
Toy Contrastive Alignment Harness
=================================
Desk-scale image-text contrastive training used to check that PGS masks
train end to end:
- Symmetric InfoNCE loss with analytic gradients
- Toy dual encoders (linear patch embedding, mean pooling over kept
  patches, linear heads) with hand-written backpropagation
- Plain SGD training loop with none / random / pgs masking
- Central finite-difference gradient checker
"""

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from image_io import PatchGrid
from otn import SinkhornConfig
from pgs_utils import (
    ConfigurationError,
    DegenerateInputError,
    EmptyBatchError,
    ShapeError,
    StageTimer,
    TrainingDivergedError,
    log_info,
    log_ok,
)
from selector import MaskingConfig, MaskPlan, generate_mask, random_mask
from similarity import BlendSchedule
from toy_data import VOCAB_SIZE, PairBatch, SyntheticPairs


MASKING_MODES = ("none", "random", "pgs")
MIN_TEMPERATURE = 0.01
_NORM_FLOOR = 1e-12


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    learnable_temperature: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class EmbeddingBatch:
    """Paired (B, d) image and text embeddings; rows are L2-normalized by forward()."""
    image_emb: np.ndarray
    text_emb: np.ndarray

    def __post_init__(self):
        if self.image_emb.shape != self.text_emb.shape or self.image_emb.ndim != 2:
            raise ShapeError(
                f"image {self.image_emb.shape} and text {self.text_emb.shape} embeddings must match"
            )

    @property
    def batch_size(self) -> int:
        return self.image_emb.shape[0]


@dataclass(frozen=True)
class InfoNCEResult:
    loss: float
    loss_image: float
    loss_text: float
    grad_image: np.ndarray
    grad_text: np.ndarray
    grad_log_temperature: float


# ============================================================================
# LOSS
# ============================================================================

def info_nce(batch: EmbeddingBatch, cfg: ContrastiveConfig) -> InfoNCEResult:
    """
    Symmetric InfoNCE over a batch of matched pairs.

    logits L = I Tᵀ / τ. The image-side loss is the mean of -log softmax over
    each row at the diagonal; the text-side loss does the same over columns.
    The returned loss averages the two.

    Raises:
        ConfigurationError: τ <= 0
        EmptyBatchError: B = 0
    """
    tau = cfg.temperature
    if not tau > 0:
        raise ConfigurationError(f"temperature must be > 0, got {tau}")
    B = batch.batch_size
    if B == 0:
        raise EmptyBatchError("InfoNCE needs at least one pair")

    logits = batch.image_emb @ batch.text_emb.T / tau
    log_p_row = logits - logsumexp(logits, axis=1, keepdims=True)
    log_p_col = logits - logsumexp(logits, axis=0, keepdims=True)
    loss_image = float(-np.mean(np.diag(log_p_row)))
    loss_text = float(-np.mean(np.diag(log_p_col)))

    eye = np.eye(B)
    grad_logits = ((np.exp(log_p_row) - eye) + (np.exp(log_p_col) - eye)) / (2.0 * B)
    return InfoNCEResult(
        loss=0.5 * (loss_image + loss_text),
        loss_image=loss_image,
        loss_text=loss_text,
        grad_image=grad_logits @ batch.text_emb / tau,
        grad_text=grad_logits.T @ batch.image_emb / tau,
        grad_log_temperature=float(-np.sum(grad_logits * logits)),
    )


# ============================================================================
# TOY ENCODERS
# ============================================================================

def patch_pixels(grid: PatchGrid) -> np.ndarray:
    """Patch pixels scaled to [-0.5, 0.5]."""
    return grid.patches.astype(np.float64) / 255.0 - 0.5


@dataclass
class ToyEncoders:
    """
    Parameters of the toy dual encoder.

    patch_embed   (pixel_dim, d)  shared with the mask pipeline's S_x source
    image_head    (d, d)
    token_embed   (vocab, d)
    text_head     (d, d)
    """
    patch_embed: np.ndarray
    image_head: np.ndarray
    token_embed: np.ndarray
    text_head: np.ndarray
    log_temperature: float = math.log(0.07)

    PARAMETERS = ("patch_embed", "image_head", "token_embed", "text_head")

    @classmethod
    def initialize(cls, pixel_dim: int, vocab_size: int, dim: int, seed: int,
                   temperature: float = 0.07) -> "ToyEncoders":
        rng = np.random.default_rng(seed)
        return cls(
            patch_embed=rng.standard_normal((pixel_dim, dim)) / np.sqrt(pixel_dim),
            image_head=rng.standard_normal((dim, dim)) / np.sqrt(dim),
            token_embed=rng.standard_normal((vocab_size, dim)) / np.sqrt(dim),
            text_head=rng.standard_normal((dim, dim)) / np.sqrt(dim),
            log_temperature=math.log(temperature),
        )

    @property
    def temperature(self) -> float:
        return math.exp(self.log_temperature)

    def patch_features(self, grid: PatchGrid) -> np.ndarray:
        """Per-patch embeddings before pooling."""
        return patch_pixels(grid) @ self.patch_embed

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, name)).all() for name in self.PARAMETERS)


@dataclass
class ForwardCache:
    batch: EmbeddingBatch
    pooled_pixels: np.ndarray
    pooled_embed: np.ndarray
    image_pre: np.ndarray
    text_mean: np.ndarray
    text_pre: np.ndarray
    tokens: List[List[int]]
    kept_counts: List[int]


def _normalize(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(rows, axis=1), _NORM_FLOOR)
    return rows / norms[:, None], norms


def forward_cached(enc: ToyEncoders, images: Sequence[PatchGrid],
                   plans: Sequence[Optional[MaskPlan]],
                   tokens: Sequence[Sequence[int]]) -> ForwardCache:
    """forward() that also returns the intermediates backward() needs."""
    if not (len(images) == len(plans) == len(tokens)):
        raise ShapeError(
            f"batch parts differ in length: {len(images)} images, {len(plans)} plans, {len(tokens)} captions"
        )

    pooled, kept_counts = [], []
    for grid, plan in zip(images, plans):
        pixels = patch_pixels(grid)
        if plan is not None:
            if (plan.grid_h, plan.grid_w) != (grid.grid_h, grid.grid_w):
                raise ShapeError("mask plan grid does not match its image")
            pixels = pixels[plan.keep_mask()]
        if pixels.shape[0] == 0:
            raise DegenerateInputError("every patch of an image is masked")
        # mean of linear patch embeddings == linear map of mean patch pixels
        pooled.append(pixels.mean(axis=0))
        kept_counts.append(pixels.shape[0])
    pooled_pixels = np.stack(pooled)
    pooled_embed = pooled_pixels @ enc.patch_embed
    image_pre = pooled_embed @ enc.image_head

    token_lists = [list(t) for t in tokens]
    if any(len(t) == 0 for t in token_lists):
        raise DegenerateInputError("empty caption")
    text_mean = np.stack([enc.token_embed[t].mean(axis=0) for t in token_lists])
    text_pre = text_mean @ enc.text_head

    image_emb, _ = _normalize(image_pre)
    text_emb, _ = _normalize(text_pre)
    return ForwardCache(
        batch=EmbeddingBatch(image_emb, text_emb),
        pooled_pixels=pooled_pixels,
        pooled_embed=pooled_embed,
        image_pre=image_pre,
        text_mean=text_mean,
        text_pre=text_pre,
        tokens=token_lists,
        kept_counts=kept_counts,
    )


def forward(enc: ToyEncoders, images: Sequence[PatchGrid],
            plans: Sequence[Optional[MaskPlan]],
            tokens: Sequence[Sequence[int]]) -> EmbeddingBatch:
    """
    Encode a batch of images and captions.

    Masked patches are dropped before mean pooling, not zeroed, so the pooled
    set of an image with k masked patches has exactly n - k members.

    Raises:
        DegenerateInputError: an image has every patch masked
    """
    return forward_cached(enc, images, plans, tokens).batch


def _normalize_backward(grad_out: np.ndarray, pre: np.ndarray) -> np.ndarray:
    """Gradient through x -> x / ||x|| for each row."""
    unit, norms = _normalize(pre)
    radial = np.sum(unit * grad_out, axis=1, keepdims=True)
    return (grad_out - unit * radial) / norms[:, None]


def backward(enc: ToyEncoders, cache: ForwardCache, grad_image: np.ndarray,
             grad_text: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients given gradients w.r.t. the normalized embeddings."""
    d_image_pre = _normalize_backward(grad_image, cache.image_pre)
    d_pooled_embed = d_image_pre @ enc.image_head.T

    d_text_pre = _normalize_backward(grad_text, cache.text_pre)
    d_text_mean = d_text_pre @ enc.text_head.T
    d_token_embed = np.zeros_like(enc.token_embed)
    for row, token_ids in enumerate(cache.tokens):
        np.add.at(d_token_embed, token_ids, d_text_mean[row] / len(token_ids))

    return {
        "patch_embed": cache.pooled_pixels.T @ d_pooled_embed,
        "image_head": cache.pooled_embed.T @ d_image_pre,
        "token_embed": d_token_embed,
        "text_head": cache.text_mean.T @ d_text_pre,
    }


# ============================================================================
# GRADIENT CHECK
# ============================================================================

def finite_diff_check(f: Callable[[np.ndarray], float], analytic_grad: np.ndarray,
                      point: np.ndarray, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """
    Largest component-wise relative error between an analytic gradient and
    central differences (f(x + eps) - f(x - eps)) / (2 eps).

    Relative error is |a - n| / max(|a|, |n|, floor); both gradients being
    zero gives zero error.
    """
    if eps <= 0:
        raise ConfigurationError(f"eps must be > 0, got {eps}")
    point = np.array(point, dtype=np.float64)
    numeric = np.zeros_like(point)
    flat, numeric_flat = point.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        f_plus = f(point)
        flat[i] = original - eps
        f_minus = f(point)
        flat[i] = original
        numeric_flat[i] = (f_plus - f_minus) / (2.0 * eps)

    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(numeric.shape)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass(frozen=True)
class ToyTrainConfig:
    steps: int = 200
    batch_size: int = 32
    epochs: int = 8
    learning_rate: float = 0.5
    embed_dim: int = 64
    image_size: int = 112
    patch_size: int = 8
    eval_pairs: int = 64
    seed: int = 0
    contrastive: ContrastiveConfig = ContrastiveConfig()
    masking: MaskingConfig = MaskingConfig()
    sinkhorn: SinkhornConfig = SinkhornConfig()
    schedule: Optional[BlendSchedule] = None

    def __post_init__(self):
        for name in ("steps", "batch_size", "epochs", "embed_dim", "eval_pairs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.steps / self.epochs)

    def blend_schedule(self) -> BlendSchedule:
        return self.schedule or BlendSchedule.for_total_epochs(self.epochs)


@dataclass
class TrainResult:
    masking: str
    losses: List[float] = field(default_factory=list)
    mask_ratios: List[float] = field(default_factory=list)
    recalls: List[float] = field(default_factory=list)
    masking_seconds: float = 0.0
    compute_seconds: float = 0.0
    temperatures: List[float] = field(default_factory=list)
    chance_recall: float = 0.0

    @property
    def final_recall(self) -> float:
        return self.recalls[-1] if self.recalls else 0.0

    @property
    def masking_fraction(self) -> float:
        total = self.masking_seconds + self.compute_seconds
        return self.masking_seconds / total if total > 0 else 0.0

    @property
    def relative_encoder_cost(self) -> float:
        """Mean fraction of patches the image encoder actually processes."""
        if not self.mask_ratios:
            return 1.0
        return 1.0 - float(np.mean(self.mask_ratios))

    def summary(self) -> Dict[str, Any]:
        return {
            "masking": self.masking,
            "steps": len(self.losses),
            "initial_loss": self.losses[0] if self.losses else float("nan"),
            "final_loss": self.losses[-1] if self.losses else float("nan"),
            "final_recall_at_1": self.final_recall,
            "chance_recall_at_1": self.chance_recall,
            "mean_mask_ratio": float(np.mean(self.mask_ratios)) if self.mask_ratios else 0.0,
            "relative_encoder_cost": self.relative_encoder_cost,
            "masking_seconds": self.masking_seconds,
            "compute_seconds": self.compute_seconds,
            "masking_fraction": self.masking_fraction,
        }


def make_masks(enc: ToyEncoders, images: Sequence[PatchGrid], masking: str, epoch: int,
               cfg: ToyTrainConfig, seed_base: int,
               timer: Optional[StageTimer] = None) -> List[Optional[MaskPlan]]:
    """One mask plan per image; image i is seeded with seed_base + i."""
    if masking == "none":
        return [None] * len(images)
    plans = []
    for i, grid in enumerate(images):
        mask_cfg = MaskingConfig(**{**asdict(cfg.masking), "seed": seed_base + i})
        if masking == "random":
            plans.append(random_mask(grid, mask_cfg, timer))
        else:
            plans.append(generate_mask(grid, enc.patch_features(grid), epoch, mask_cfg,
                                       cfg.sinkhorn, cfg.blend_schedule(), timer))
    return plans


def recall_at_1(enc: ToyEncoders, pairs: PairBatch) -> float:
    """
    Image-to-text recall@1 on unmasked images.

    A retrieval counts as a hit when the retrieved caption equals the query's
    own caption; duplicated captions are indistinguishable to any text encoder.
    """
    batch = forward(enc, pairs.images, [None] * len(pairs.images), pairs.tokens)
    retrieved = np.argmax(batch.image_emb @ batch.text_emb.T, axis=1)
    hits = [pairs.labels[int(j)] == pairs.labels[i] for i, j in enumerate(retrieved)]
    return float(np.mean(hits))


def chance_recall_at_1(labels: Sequence[int]) -> float:
    """
    Expected recall@1 of a uniformly random retrieval under the same
    caption-equality hit rule: mean over queries of |{j : label_j = label_i}| / N.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    same = labels[:, None] == labels[None, :]
    return float(same.sum(axis=1).mean() / labels.size)


def _divergence_dump(step: int, loss: float, enc: ToyEncoders) -> Dict[str, float]:
    dump = {"step": step, "loss": loss, "temperature": enc.temperature}
    for name in ToyEncoders.PARAMETERS:
        dump[f"{name}_norm"] = float(np.linalg.norm(getattr(enc, name)))
    return dump


def train_toy(cfg: ToyTrainConfig, dataset: Optional[SyntheticPairs] = None,
              masking: str = "pgs") -> TrainResult:
    """
    Train the toy dual encoder with plain SGD.

    Args:
        cfg: Run parameters
        dataset: Pair generator (built from cfg when omitted)
        masking: "none", "random" or "pgs"

    Returns:
        TrainResult with per-step losses and mask ratios, per-epoch held-out
        recall@1 and the wall-time split between masking and compute

    Raises:
        TrainingDivergedError: the loss became NaN or Inf
    """
    if masking not in MASKING_MODES:
        raise ConfigurationError(f"masking must be one of {MASKING_MODES}, got {masking!r}")
    dataset = dataset or SyntheticPairs(cfg.seed, cfg.image_size, cfg.patch_size)
    pixel_dim = dataset.patch_size * dataset.patch_size * 3
    enc = ToyEncoders.initialize(pixel_dim, VOCAB_SIZE, cfg.embed_dim, cfg.seed,
                                 cfg.contrastive.temperature)
    held_out = dataset.held_out(cfg.eval_pairs)
    result = TrainResult(masking=masking, chance_recall=chance_recall_at_1(held_out.labels))

    log_info(f"toy-train: masking={masking} steps={cfg.steps} batch={cfg.batch_size}")
    for step in range(cfg.steps):
        epoch = step // cfg.steps_per_epoch
        pairs = dataset.batch(step, cfg.batch_size)

        start = time.perf_counter()
        plans = make_masks(enc, pairs.images, masking, epoch, cfg,
                           cfg.seed + step * cfg.batch_size)
        result.masking_seconds += time.perf_counter() - start

        start = time.perf_counter()
        cache = forward_cached(enc, pairs.images, plans, pairs.tokens)
        loss_cfg = ContrastiveConfig(enc.temperature, cfg.contrastive.learnable_temperature)
        out = info_nce(cache.batch, loss_cfg)
        if not math.isfinite(out.loss):
            raise TrainingDivergedError(
                f"loss became {out.loss} at step {step}", _divergence_dump(step, out.loss, enc)
            )
        grads = backward(enc, cache, out.grad_image, out.grad_text)
        for name, grad in grads.items():
            setattr(enc, name, getattr(enc, name) - cfg.learning_rate * grad)
        if cfg.contrastive.learnable_temperature:
            enc.log_temperature = max(
                math.log(MIN_TEMPERATURE),
                enc.log_temperature - cfg.learning_rate * out.grad_log_temperature,
            )
        result.compute_seconds += time.perf_counter() - start

        result.losses.append(out.loss)
        result.temperatures.append(enc.temperature)
        if plans[0] is not None:
            result.mask_ratios.extend(plan.ratio for plan in plans)
        else:
            result.mask_ratios.extend([0.0] * len(plans))

        if (step + 1) % cfg.steps_per_epoch == 0 or step + 1 == cfg.steps:
            result.recalls.append(recall_at_1(enc, held_out))
            log_info(
                f"epoch {epoch}: loss={out.loss:.4f} recall@1={result.recalls[-1]:.3f}"
            )

    if not enc.is_finite():
        raise TrainingDivergedError("parameters became non-finite",
                                    _divergence_dump(cfg.steps, result.losses[-1], enc))
    log_ok(f"toy-train finished: final loss {result.losses[-1]:.4f}, "
           f"recall@1 {result.final_recall:.3f} (chance {result.chance_recall:.3f})")
    return result


def train_step_seconds(cfg: ToyTrainConfig, dataset: SyntheticPairs, masking: str = "pgs",
                       repeat: int = 3) -> Tuple[float, float]:
    """
    Median (masking_seconds, compute_seconds) of one training step, for the
    benchmark's masking-fraction report. Parameters are not updated.
    """
    pixel_dim = dataset.patch_size * dataset.patch_size * 3
    enc = ToyEncoders.initialize(pixel_dim, VOCAB_SIZE, cfg.embed_dim, cfg.seed,
                                 cfg.contrastive.temperature)
    pairs = dataset.batch(0, cfg.batch_size)
    mask_times, compute_times = [], []
    for _ in range(max(1, repeat)):
        start = time.perf_counter()
        plans = make_masks(enc, pairs.images, masking, 0, cfg, cfg.seed)
        mask_times.append(time.perf_counter() - start)
        start = time.perf_counter()
        cache = forward_cached(enc, pairs.images, plans, pairs.tokens)
        out = info_nce(cache.batch, cfg.contrastive)
        backward(enc, cache, out.grad_image, out.grad_text)
        compute_times.append(time.perf_counter() - start)
    return float(np.median(mask_times)), float(np.median(compute_times))
