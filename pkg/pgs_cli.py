"""
PGS Command Line
================
Batch driver, benchmark harness and debug surface.

Subcommands:
    mask            one JSON record per image (plus optional overlays)
    visualize       overlays from fresh or previously emitted mask records
    bench           per-stage timing against the random-mask baseline
    toy-train       toy contrastive training run with a chosen masking mode
    sinkhorn-debug  Sinkhorn normalization of a CSV or JSON matrix
    ablate          ED x OTN x detector x variant grid over the inputs

Exit codes: 0 success, 1 some inputs failed, 2 invalid configuration or
usage, 3 training diverged.
"""

import argparse
import csv
import glob
import itertools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from contrastive import MASKING_MODES, ToyTrainConfig, train_toy
from image_io import Image, load_image, patchify, render_mask_overlay, save_image
from otn import KERNELS, SinkhornConfig, sinkhorn
from pgs_bench import print_report, run_bench
from pgs_config import (
    MASKING_STRATEGIES,
    OUTPUT_FORMATS,
    RunConfig,
    resolve_run_config,
    variant_overrides,
)
from pgs_utils import (
    ConfigurationError,
    MatrixParseError,
    PGSError,
    StageTimer,
    TrainingDivergedError,
    image_seed,
    log_error,
    log_info,
    log_ok,
    log_warn,
    set_quiet,
    stable_path_hash,
)
from selector import EDGE_DETECTORS, NEIGHBORHOODS, VARIANTS, MaskPlan, generate_mask, random_mask
from similarity import BlendSchedule, random_projection_features
from toy_data import SyntheticPairs


EXIT_OK = 0
EXIT_INPUT_FAILURES = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

_GLOB_CHARS = "*?["

# (flag, dest, type, help); dest must be a RunConfig field
_RUN_FLAGS = [
    ("--lower-ratio", "lower_ratio", float, "lower masking ratio"),
    ("--upper-ratio", "upper_ratio", float, "upper masking ratio"),
    ("--initial-ratio", "initial_ratio", float, "candidate seeding ratio"),
    ("--edge-quantile", "edge_quantile", float, "edge retention quantile"),
    ("--canny-low", "canny_low", float, "Canny weak threshold"),
    ("--canny-high", "canny_high", float, "Canny strong threshold"),
    ("--alpha", "alpha", float, "fixed blend weight, overrides the schedule"),
    ("--alpha-min", "alpha_min", float, "schedule start alpha"),
    ("--alpha-max", "alpha_max", float, "schedule end alpha"),
    ("--alpha-ramp-epochs", "alpha_ramp_epochs", int, "schedule ramp length"),
    ("--epoch", "epoch", int, "epoch fed to the alpha schedule"),
    ("--sinkhorn-iters", "sinkhorn_iters", int, "Sinkhorn iteration cap"),
    ("--sinkhorn-tol", "sinkhorn_tol", float, "Sinkhorn tolerance"),
    ("--sinkhorn-epsilon", "sinkhorn_epsilon", float, "entropic kernel epsilon"),
    ("--seed", "seed", int, "global seed (fallback: PGS_SEED)"),
    ("--threads", "threads", int, "worker threads"),
    ("--patch-size", "patch_size", int, "patch side in pixels"),
    ("--feature-dim", "feature_dim", int, "random projection feature width"),
    ("--dim", "dim", float, "overlay dimming factor"),
    ("--temperature", "temperature", float, "InfoNCE temperature"),
    ("--output", "output", str, "output file, '-' for stdout"),
    ("--overlay-dir", "overlay_dir", str, "overlay directory"),
]

_CHOICE_FLAGS = [
    ("--edge-detector", "edge_detector", EDGE_DETECTORS),
    ("--neighborhood", "neighborhood", NEIGHBORHOODS),
    ("--sinkhorn-kernel", "sinkhorn_kernel", KERNELS),
    ("--format", "format", OUTPUT_FORMATS),
    ("--masking-strategy", "masking_strategy", MASKING_STRATEGIES),
]


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def _run_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("run configuration")
    group.add_argument("--config", help="flat key=value config file")
    group.add_argument("--variant", choices=tuple(VARIANTS), help="ratio preset")
    for flag, dest, kind, text in _RUN_FLAGS:
        group.add_argument(flag, dest=dest, type=kind, default=None, help=text)
    for flag, dest, choices in _CHOICE_FLAGS:
        group.add_argument(flag, dest=dest, choices=choices, default=None)
    group.add_argument("--no-edge", dest="use_edge_detection", action="store_const",
                       const=False, default=None, help="disable edge retention")
    group.add_argument("--no-otn", dest="use_otn", action="store_const",
                       const=False, default=None, help="disable Sinkhorn refinement")
    group.add_argument("--learnable-temperature", dest="learnable_temperature",
                       action="store_const", const=True, default=None)
    group.add_argument("--quiet", action="store_true", help="suppress status lines")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgs", description="Patch generation-to-selection masking")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _run_options()

    p = sub.add_parser("mask", parents=[common], help="compute masks for images")
    p.add_argument("inputs", nargs="*", help="image paths or glob patterns")

    p = sub.add_parser("visualize", parents=[common], help="render mask overlays")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--plans", help="JSONL from 'mask'; masks are recomputed when omitted")
    p.add_argument("--overlay-ext", choices=("ppm", "png"), default="ppm")

    p = sub.add_parser("bench", parents=[common], help="per-stage timing report")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--no-train-step", action="store_true",
                   help="skip the toy train step measurement")

    p = sub.add_parser("toy-train", parents=[common], help="toy contrastive training")
    p.add_argument("--masking", choices=MASKING_MODES, default="pgs")
    p.add_argument("--steps", type=int, default=ToyTrainConfig.steps)
    p.add_argument("--batch-size", type=int, default=ToyTrainConfig.batch_size)
    p.add_argument("--epochs", type=int, default=ToyTrainConfig.epochs)
    p.add_argument("--lr", type=float, default=ToyTrainConfig.learning_rate)
    p.add_argument("--embed-dim", type=int, default=ToyTrainConfig.embed_dim)
    p.add_argument("--image-size", type=int, default=ToyTrainConfig.image_size)
    p.add_argument("--curve-csv", help="per-step loss curve CSV")
    p.add_argument("--divergence-dump", default="toy_train_divergence.json")

    p = sub.add_parser("sinkhorn-debug", parents=[common], help="normalize a matrix file")
    p.add_argument("matrix", help="CSV or JSON square matrix")

    p = sub.add_parser("ablate", parents=[common], help="run the 2x2x2x2 ablation grid")
    p.add_argument("inputs", nargs="*")
    return parser


def flag_values(args: argparse.Namespace) -> Dict[str, Any]:
    """Explicit run flags; a --variant preset sits below explicit ratio flags."""
    values: Dict[str, Any] = {}
    if args.variant:
        values.update(variant_overrides(args.variant))
    dests = [d for _, d, _, _ in _RUN_FLAGS] + [d for _, d, _ in _CHOICE_FLAGS]
    dests += ["use_edge_detection", "use_otn", "learnable_temperature"]
    for dest in dests:
        value = getattr(args, dest, None)
        if value is not None:
            values[dest] = value
    return values


def expand_inputs(patterns: Iterable[str]) -> List[str]:
    """Glob-expand patterns; literal paths pass through so that missing files are reported."""
    paths = set()
    for pattern in patterns:
        if any(ch in pattern for ch in _GLOB_CHARS):
            paths.update(p for p in glob.glob(pattern, recursive=True) if Path(p).is_file())
        else:
            paths.add(pattern)
    return sorted(paths)


# ============================================================================
# MASKING
# ============================================================================

@dataclass
class MaskOutcome:
    path: str
    record: Optional[Dict[str, Any]] = None
    overlay: Optional[Image] = None
    error: Optional[str] = None


def mask_image(img: Image, image_id: str, cfg: RunConfig,
               timer: Optional[StageTimer] = None) -> MaskPlan:
    """Mask one decoded image, seeding it from the global seed and its id."""
    grid = patchify(img, cfg.patch_size)
    mask_cfg = cfg.masking_config(image_seed(cfg.seed, image_id))
    if cfg.masking_strategy == "random":
        return random_mask(grid, mask_cfg, timer)
    features = random_projection_features(grid, cfg.feature_dim, cfg.seed)
    return generate_mask(grid, features, cfg.epoch, mask_cfg, cfg.sinkhorn_config(),
                         cfg.blend_schedule(), timer)


def _mask_path(path: str, cfg: RunConfig, overlay: bool,
               extra: Optional[Dict[str, Any]] = None) -> MaskOutcome:
    try:
        img = load_image(path)
        plan = mask_image(img, path, cfg)
        record = plan.to_record(path, cfg.echo())
        if extra:
            record.update(extra)
        rendered = render_mask_overlay(img, plan, cfg.dim) if overlay else None
        return MaskOutcome(path, record, rendered)
    except (OSError, PGSError) as exc:
        return MaskOutcome(path, error=f"{type(exc).__name__}: {exc}")


def run_batch(paths: Sequence[str], work: Callable[[str], MaskOutcome], threads: int) -> List[MaskOutcome]:
    """Fan out over a worker pool; results come back in input order."""
    if threads <= 1 or len(paths) <= 1:
        return [work(path) for path in paths]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(work, paths))


def overlay_path(overlay_dir: str, image_path: str, ext: str = "ppm") -> Path:
    stem = Path(image_path).stem
    return Path(overlay_dir) / f"{stem}_{stable_path_hash(image_path):08x}_mask.{ext}"


def _open_output(output: str):
    if output == "-":
        return sys.stdout
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    return open(output, "w", encoding="utf-8")


def write_records(records: Iterable[Dict[str, Any]], output: str) -> None:
    stream = _open_output(output)
    try:
        for record in records:
            stream.write(json.dumps(record) + "\n")
        stream.flush()
    finally:
        if stream is not sys.stdout:
            stream.close()


def _report_failures(outcomes: Sequence[MaskOutcome]) -> int:
    failures = [o for o in outcomes if o.error]
    for outcome in failures:
        log_error(f"{outcome.path}: {outcome.error}")
    if failures:
        log_warn(f"{len(failures)} of {len(outcomes)} inputs failed")
        return EXIT_INPUT_FAILURES
    return EXIT_OK


def cmd_mask(cfg: RunConfig) -> int:
    paths = expand_inputs(cfg.inputs)
    if not paths:
        log_warn("no input images matched; nothing to do")
        return EXIT_OK
    want_json = cfg.format in ("json", "both")
    want_overlay = cfg.format in ("overlay", "both")

    outcomes = run_batch(paths, lambda p: _mask_path(p, cfg, want_overlay), cfg.threads)
    if want_json:
        write_records((o.record for o in outcomes if o.record is not None), cfg.output)
    if want_overlay:
        for outcome in outcomes:
            if outcome.overlay is not None:
                save_image(overlay_path(cfg.overlay_dir, outcome.path), outcome.overlay)
    ok = sum(1 for o in outcomes if o.error is None)
    log_ok(f"masked {ok}/{len(outcomes)} images")
    return _report_failures(outcomes)


def _load_plans(path: str) -> Dict[str, MaskPlan]:
    plans = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
            plans[record.get("image_id", "")] = MaskPlan.from_record(record)
    return plans


def cmd_visualize(cfg: RunConfig, plans_path: Optional[str], ext: str) -> int:
    plans = _load_plans(plans_path) if plans_path else {}
    paths = expand_inputs(cfg.inputs) or sorted(plans)
    if not paths:
        log_warn("no input images matched; nothing to do")
        return EXIT_OK

    def work(path: str) -> MaskOutcome:
        try:
            img = load_image(path)
            plan = plans.get(path) or mask_image(img, path, cfg)
            return MaskOutcome(path, overlay=render_mask_overlay(img, plan, cfg.dim))
        except (OSError, PGSError) as exc:
            return MaskOutcome(path, error=f"{type(exc).__name__}: {exc}")

    outcomes = run_batch(paths, work, cfg.threads)
    for outcome in outcomes:
        if outcome.overlay is not None:
            save_image(overlay_path(cfg.overlay_dir, outcome.path, ext), outcome.overlay)
    log_ok(f"wrote {sum(o.overlay is not None for o in outcomes)} overlays to {cfg.overlay_dir}")
    return _report_failures(outcomes)


def cmd_bench(cfg: RunConfig, repeat: int = 5, warmup: int = 1,
              include_train_step: bool = True) -> int:
    """Time the pipeline on the inputs (or synthetic reference images) and emit the report."""
    cfg = replace(cfg, inputs=expand_inputs(cfg.inputs))
    report = run_bench(cfg, repeat, warmup, include_train_step=include_train_step)
    print_report(report)
    write_records([report.to_dict()], cfg.output)
    return EXIT_OK


# ============================================================================
# ABLATION GRID
# ============================================================================

def ablation_grid() -> List[Dict[str, Any]]:
    """All 16 combinations of ED, OTN, edge detector and ratio variant."""
    return [
        {"edge": edge, "otn": otn, "edge_detector": detector, "variant": variant}
        for edge, otn, detector, variant in itertools.product(
            (True, False), (True, False), EDGE_DETECTORS, tuple(VARIANTS))
    ]


def ablation_config(base: RunConfig, combo: Dict[str, Any]) -> RunConfig:
    return replace(
        base,
        use_edge_detection=combo["edge"],
        use_otn=combo["otn"],
        edge_detector=combo["edge_detector"],
        masking_strategy="pgs",
        **variant_overrides(combo["variant"]),
    )


def cmd_ablate(cfg: RunConfig) -> int:
    paths = expand_inputs(cfg.inputs)
    if not paths:
        log_warn("no input images matched; nothing to do")
        return EXIT_OK
    outcomes: List[MaskOutcome] = []
    for combo in ablation_grid():
        combo_cfg = ablation_config(cfg, combo)
        outcomes.extend(run_batch(
            paths, lambda p: _mask_path(p, combo_cfg, False, {"ablation": combo}), cfg.threads
        ))
    write_records((o.record for o in outcomes if o.record is not None), cfg.output)
    log_ok(f"ablation grid: {len(ablation_grid())} combinations x {len(paths)} images")
    return _report_failures(outcomes)


# ============================================================================
# TOY TRAINING
# ============================================================================

def write_curve_csv(path: str, losses: Sequence[float], temperatures: Sequence[float],
                    mask_ratios: Sequence[float], batch_size: int) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "loss", "temperature", "mean_mask_ratio"])
        for step, (loss, tau) in enumerate(zip(losses, temperatures)):
            ratios = mask_ratios[step * batch_size:(step + 1) * batch_size]
            writer.writerow([step, f"{loss:.6f}", f"{tau:.6f}",
                             f"{float(np.mean(ratios)) if ratios else 0.0:.6f}"])


def toy_config(cfg: RunConfig, args: argparse.Namespace, explicit: Dict[str, Any]) -> ToyTrainConfig:
    schedule = cfg.blend_schedule()
    return ToyTrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        embed_dim=args.embed_dim,
        image_size=args.image_size,
        patch_size=explicit.get("patch_size", ToyTrainConfig.patch_size),
        seed=cfg.seed,
        contrastive=cfg.contrastive_config(),
        masking=cfg.masking_config(),
        sinkhorn=cfg.sinkhorn_config(),
        schedule=None if schedule == BlendSchedule() else schedule,
    )


def cmd_toy_train(cfg: RunConfig, args: argparse.Namespace, explicit: Dict[str, Any]) -> int:
    toy_cfg = toy_config(cfg, args, explicit)
    dataset = SyntheticPairs(toy_cfg.seed, toy_cfg.image_size, toy_cfg.patch_size)
    try:
        result = train_toy(toy_cfg, dataset, args.masking)
    except TrainingDivergedError as exc:
        Path(args.divergence_dump).write_text(json.dumps(exc.diagnostics, indent=2))
        log_error(f"{exc} (diagnostics written to {args.divergence_dump})")
        return EXIT_DIVERGED

    if args.curve_csv:
        write_curve_csv(args.curve_csv, result.losses, result.temperatures,
                        result.mask_ratios, toy_cfg.batch_size)
        log_info(f"loss curve written to {args.curve_csv}")
    payload = {**result.summary(), "losses": result.losses, "recalls": result.recalls}
    stream = _open_output(cfg.output)
    try:
        stream.write(json.dumps(payload) + "\n")
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK


# ============================================================================
# SINKHORN DEBUG
# ============================================================================

def _parse_cell(text: str, line: int, column: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise MatrixParseError(f"not a number: {text.strip()!r}", line, column) from None


def _parse_csv(text: str) -> List[List[float]]:
    rows = []
    for line_no, row in enumerate(csv.reader(text.splitlines()), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        rows.append([_parse_cell(cell, line_no, col) for col, cell in enumerate(row, start=1)])
        if len(rows[-1]) != len(rows[0]):
            raise MatrixParseError(
                f"row has {len(rows[-1])} columns, expected {len(rows[0])}", line_no, 1
            )
    return rows


def _parse_json(text: str) -> List[List[float]]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MatrixParseError(exc.msg, exc.lineno, exc.colno) from None
    if isinstance(data, dict):
        data = data.get("matrix")
    if not isinstance(data, list) or not all(isinstance(row, list) for row in data):
        raise MatrixParseError("expected a list of rows", 1, 1)
    rows = []
    for r, row in enumerate(data, start=1):
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in row):
            raise MatrixParseError(f"row {r} holds a non-numeric entry", r, 1)
        rows.append([float(v) for v in row])
        if len(row) != len(data[0]):
            raise MatrixParseError(f"row {r} has {len(row)} columns, expected {len(data[0])}", r, 1)
    return rows


def parse_matrix(text: str, suffix: str = "") -> np.ndarray:
    """
    Parse a square matrix from CSV or JSON text.

    JSON is chosen by a .json suffix or a leading '[' or '{'.

    Raises:
        MatrixParseError: malformed text (with line/column) or a non-square shape
    """
    stripped = text.lstrip()
    if suffix.lower() == ".json" or stripped.startswith(("[", "{")):
        rows = _parse_json(text)
    else:
        rows = _parse_csv(text)
    if not rows:
        raise MatrixParseError("empty matrix", 1, 1)
    n_rows, n_cols = len(rows), len(rows[0])
    if n_rows != n_cols:
        raise MatrixParseError(f"matrix is {n_rows}x{n_cols}, expected a square matrix", n_rows, n_cols)
    return np.array(rows, dtype=np.float64)


def sinkhorn_report(matrix: np.ndarray, sinkhorn_cfg: SinkhornConfig) -> Dict[str, Any]:
    result = sinkhorn(matrix, sinkhorn_cfg)
    return {
        "n": int(matrix.shape[0]),
        "kernel": sinkhorn_cfg.kernel,
        "iterations": result.iterations,
        "deviation": result.deviation,
        "converged": result.converged,
        "tol": result.tol,
        "trace": result.trace,
        "matrix": result.matrix.tolist(),
    }


def cmd_sinkhorn_debug(path: str, cfg: RunConfig) -> int:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        log_error(f"cannot read {path}: {exc}")
        return EXIT_INPUT_FAILURES
    try:
        report = sinkhorn_report(parse_matrix(text, Path(path).suffix), cfg.sinkhorn_config())
    except PGSError as exc:
        log_error(f"{path}: {exc}")
        return EXIT_INPUT_FAILURES
    write_records([report], cfg.output)
    status = log_ok if report["converged"] else log_warn
    status(f"sinkhorn: {report['iterations']} iterations, deviation {report['deviation']:.3e}")
    return EXIT_OK


# ============================================================================
# ENTRY POINT
# ============================================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.quiet:
        set_quiet(True)

    try:
        explicit = flag_values(args)
        if hasattr(args, "inputs") and args.inputs:
            explicit["inputs"] = list(args.inputs)
        cfg = resolve_run_config(explicit, args.config)
    except ConfigurationError as exc:
        log_error(f"invalid configuration: {exc}")
        return EXIT_USAGE

    try:
        if args.command == "mask":
            return cmd_mask(cfg)
        if args.command == "visualize":
            return cmd_visualize(cfg, args.plans, args.overlay_ext)
        if args.command == "bench":
            return cmd_bench(cfg, args.repeat, args.warmup, not args.no_train_step)
        if args.command == "toy-train":
            return cmd_toy_train(cfg, args, explicit)
        if args.command == "sinkhorn-debug":
            return cmd_sinkhorn_debug(args.matrix, cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
    except ConfigurationError as exc:
        log_error(f"invalid configuration: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        log_error(str(exc))
        return EXIT_INPUT_FAILURES
    except PGSError as exc:
        log_error(str(exc))
        return EXIT_INPUT_FAILURES
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
