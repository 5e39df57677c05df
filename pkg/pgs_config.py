"""
PGS Configuration
=================
Built-in defaults, `.env` loading, flat key=value config files and the
precedence merge that produces a RunConfig:

    CLI flags > --config file > PGS_SEED (seed only) > built-in defaults
"""

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values, load_dotenv

from contrastive import ContrastiveConfig
from otn import SinkhornConfig
from pgs_utils import ConfigurationError, format_config_echo
from selector import VARIANTS, MaskingConfig
from similarity import BlendSchedule

# Load from .env file
load_dotenv()


# --- Configuration Constants ---
SEED_ENV_VAR = "PGS_SEED"
DEFAULT_PATCH_SIZE = 16
DEFAULT_FEATURE_DIM = 64
OUTPUT_FORMATS = ("json", "overlay", "both")
MASKING_STRATEGIES = ("pgs", "random")


@dataclass(frozen=True)
class RunConfig:
    """
    Flattened settings for a CLI run.

    Every field can be set by a flag of the same name (kebab-case) or by a
    key in the --config file (snake_case or kebab-case).
    """
    inputs: List[str] = field(default_factory=list)
    output: str = "-"
    overlay_dir: str = "overlays"
    format: str = "json"
    threads: int = 1
    patch_size: int = DEFAULT_PATCH_SIZE
    feature_dim: int = DEFAULT_FEATURE_DIM
    epoch: int = 0
    alpha: Optional[float] = None
    dim: float = 0.35
    masking_strategy: str = "pgs"

    # MaskingConfig
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

    # SinkhornConfig
    sinkhorn_iters: int = 50
    sinkhorn_tol: float = 1e-6
    sinkhorn_delta: float = 1e-6
    sinkhorn_kernel: str = "shift"
    sinkhorn_epsilon: float = 0.05

    # BlendSchedule
    alpha_min: float = 0.0
    alpha_max: float = 0.8
    alpha_ramp_epochs: int = 16

    # ContrastiveConfig
    temperature: float = 0.07
    learnable_temperature: bool = False

    def __post_init__(self):
        if self.format not in OUTPUT_FORMATS:
            raise ConfigurationError(f"format must be one of {OUTPUT_FORMATS}, got {self.format!r}")
        if self.masking_strategy not in MASKING_STRATEGIES:
            raise ConfigurationError(
                f"masking_strategy must be one of {MASKING_STRATEGIES}, got {self.masking_strategy!r}"
            )
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")
        if self.patch_size < 1 or self.feature_dim < 1:
            raise ConfigurationError("patch_size and feature_dim must be positive")
        # nested types validate themselves
        self.masking_config()
        self.sinkhorn_config()
        self.blend_schedule()
        self.contrastive_config()

    def masking_config(self, seed: Optional[int] = None) -> MaskingConfig:
        return MaskingConfig(
            initial_ratio=self.initial_ratio,
            lower_ratio=self.lower_ratio,
            upper_ratio=self.upper_ratio,
            edge_quantile=self.edge_quantile,
            neighborhood=self.neighborhood,
            seed=self.seed if seed is None else seed,
            use_edge_detection=self.use_edge_detection,
            use_otn=self.use_otn,
            edge_detector=self.edge_detector,
            canny_low=self.canny_low,
            canny_high=self.canny_high,
        )

    def sinkhorn_config(self) -> SinkhornConfig:
        return SinkhornConfig(
            max_iters=self.sinkhorn_iters,
            tol=self.sinkhorn_tol,
            shift_delta=self.sinkhorn_delta,
            kernel=self.sinkhorn_kernel,
            epsilon=self.sinkhorn_epsilon,
        )

    def blend_schedule(self) -> BlendSchedule:
        if self.alpha is not None:
            return BlendSchedule.constant(self.alpha)
        return BlendSchedule(self.alpha_min, self.alpha_max, self.alpha_ramp_epochs)

    def contrastive_config(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.temperature, self.learnable_temperature)

    def echo(self) -> Dict[str, Any]:
        """Effective configuration, embedded in every output record."""
        return format_config_echo({
            "masking": self.masking_config(),
            "sinkhorn": self.sinkhorn_config(),
            "schedule": self.blend_schedule(),
            "run": {
                "patch_size": self.patch_size,
                "feature_dim": self.feature_dim,
                "epoch": self.epoch,
                "masking_strategy": self.masking_strategy,
            },
        })


RUN_FIELDS = {f.name: f for f in fields(RunConfig)}
_BOOLEAN_TRUE = ("1", "true", "yes", "on")
_BOOLEAN_FALSE = ("0", "false", "no", "off")


def _coerce(name: str, raw: Any) -> Any:
    """Convert a config-file string to the type of the RunConfig field."""
    if not isinstance(raw, str):
        return raw
    default = RunConfig.__dataclass_fields__[name].default
    text = raw.strip()
    try:
        if name == "inputs":
            return [part for part in text.split(",") if part]
        if name == "alpha":
            return None if text.lower() in ("", "none") else float(text)
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _BOOLEAN_TRUE:
                return True
            if lowered in _BOOLEAN_FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"config key {name!r}: cannot parse {raw!r}") from None
    return text


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_").lower()


def load_config_file(path: str) -> Dict[str, Any]:
    """
    Read a flat key=value config file.

    Raises:
        ConfigurationError: missing file or unknown key
    """
    if not Path(path).is_file():
        raise ConfigurationError(f"config file not found: {path}")
    values: Dict[str, Any] = {}
    for key, raw in dotenv_values(path).items():
        name = normalize_key(key)
        if name == "variant":
            values.update(variant_overrides(raw or ""))
            continue
        if name not in RUN_FIELDS:
            raise ConfigurationError(f"unknown config key {key!r} in {path}")
        values[name] = _coerce(name, raw if raw is not None else "")
    return values


def variant_overrides(variant: str) -> Dict[str, float]:
    """Lower/upper ratios of a named variant (pgs0.5 or pgs0.3)."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {tuple(VARIANTS)}, got {variant!r}")
    preset = VARIANTS[variant]()
    return {"lower_ratio": preset.lower_ratio, "upper_ratio": preset.upper_ratio}


def env_seed() -> Optional[int]:
    raw = os.getenv(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


def resolve_run_config(flag_values: Dict[str, Any], config_path: Optional[str] = None) -> RunConfig:
    """
    Merge configuration sources by precedence.

    Args:
        flag_values: Values given explicitly on the command line (None-valued
            entries are treated as absent)
        config_path: Optional flat config file

    Returns:
        Validated RunConfig
    """
    merged: Dict[str, Any] = {}
    seed_from_env = env_seed()
    if seed_from_env is not None:
        merged["seed"] = seed_from_env
    if config_path:
        merged.update(load_config_file(config_path))
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return replace(RunConfig(), **merged)
