"""
PGS Shared Utilities
====================
Shared helpers used by every stage of the patch-masking pipeline:
- Error taxonomy raised by the library modules
- Console status logging (colored, stderr only)
- Per-stage wall-clock timing for the benchmark harness
- Stable per-image seeding
- Config echo formatting for output records
"""

import os
import sys
import time
import hashlib
import statistics
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from colorama import Fore, Style, init as colorama_init

colorama_init()


# ============================================================================
# ERRORS
# ============================================================================

class PGSError(ValueError):
    """Base class for every error raised by the masking engine."""


class ConfigurationError(PGSError):
    """Invalid parameter or parameter combination."""


class ShapeError(PGSError):
    """Array or grid dimensions do not line up."""


class NumericInputError(PGSError):
    """NaN or Inf where finite values are required."""


class EmptyBatchError(PGSError):
    """A batch with zero rows was passed to the loss."""


class DegenerateInputError(PGSError):
    """Input that cannot be processed, e.g. an image with every patch masked."""


class ImageDecodeError(PGSError):
    """Malformed raster file; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MatrixParseError(PGSError):
    """Unparseable matrix file; `line` and `column` are 1-based."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        location = f" (line {line}, column {column})" if line else ""
        super().__init__(f"{message}{location}")
        self.line = line
        self.column = column


class TrainingDivergedError(PGSError):
    """Loss became non-finite; `diagnostics` holds the state at failure."""

    def __init__(self, message: str, diagnostics: Dict[str, Any]):
        super().__init__(message)
        self.diagnostics = diagnostics


# ============================================================================
# CONSOLE LOGGING
# ============================================================================

_QUIET = os.getenv("PGS_QUIET", "").strip().lower() in ("1", "true", "yes")


def set_quiet(quiet: bool) -> None:
    """Silence ok/info lines. Warnings and errors always print."""
    global _QUIET
    _QUIET = quiet


def _emit(line: str) -> None:
    print(line, file=sys.stderr)


def log_info(message: str) -> None:
    if not _QUIET:
        _emit(f"  {message}")


def log_ok(message: str) -> None:
    if not _QUIET:
        _emit(f"{Fore.GREEN}✓ {message}{Style.RESET_ALL}")


def log_warn(message: str) -> None:
    _emit(f"{Fore.YELLOW}⚠️  WARNING: {message}{Style.RESET_ALL}")


def log_error(message: str) -> None:
    _emit(f"{Fore.RED}🛑 ERROR: {message}{Style.RESET_ALL}")


def banner(title: str, width: int = 70) -> None:
    if _QUIET:
        return
    _emit(f"\n{'=' * width}")
    _emit(f"{Style.BRIGHT}{title}{Style.RESET_ALL}")
    _emit('=' * width)


# ============================================================================
# STAGE TIMING
# ============================================================================

class StageTimer:
    """
    Accumulates wall-clock time per named stage, in microseconds.

    Stages may be entered several times; durations add up. Timing is
    observational only and never feeds back into computed results.
    """

    def __init__(self):
        self.stages: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed_us = (time.perf_counter() - start) * 1e6
            self.stages[name] = self.stages.get(name, 0.0) + elapsed_us

    def total(self) -> float:
        return sum(self.stages.values())


@contextmanager
def maybe_stage(timer: Optional[StageTimer], name: str) -> Iterator[None]:
    """`timer.stage(name)` when a timer is given, a no-op otherwise."""
    if timer is None:
        yield
    else:
        with timer.stage(name):
            yield


def median_stage_times(timers: List[StageTimer]) -> Dict[str, float]:
    """
    Median of each stage over repeated runs.

    Args:
        timers: One StageTimer per repeat

    Returns:
        Stage name -> median microseconds (stages missing from a run count as 0)
    """
    names = sorted({name for t in timers for name in t.stages})
    return {
        name: statistics.median(t.stages.get(name, 0.0) for t in timers)
        for name in names
    }


def format_us(us: float) -> str:
    if us >= 10_000:
        return f"{us / 1000:.1f} ms"
    if us >= 10:
        return f"{us:.1f} us"
    return f"{us * 1000:.0f} ns"


# ============================================================================
# SEEDING
# ============================================================================

SEED_MODULUS = 2 ** 31


def stable_path_hash(path: str) -> int:
    """Platform-independent 31-bit hash of a path string."""
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % SEED_MODULUS


def image_seed(global_seed: int, path: str) -> int:
    """Per-image seed; adding files to a batch never reshuffles existing ones."""
    return (global_seed + stable_path_hash(path)) % SEED_MODULUS


# ============================================================================
# CONFIG ECHO
# ============================================================================

def format_config_echo(sections: Dict[str, Any]) -> Dict[str, Any]:
    """
    Flatten nested config objects into a JSON-friendly echo dict.

    Args:
        sections: Section name -> dataclass instance or plain dict

    Returns:
        Dict with one sub-dict per section, keys sorted for stable output
    """
    echo: Dict[str, Any] = {}
    for name, value in sections.items():
        fields = value if isinstance(value, dict) else vars(value)
        echo[name] = {key: fields[key] for key in sorted(fields)}
    return echo


# ============================================================================
# TEST RUNNER
# ============================================================================

def run_test_suite(title: str, tests: Sequence[Tuple[str, Callable[[], Any]]]) -> int:
    """
    Run named test functions, print a summary and return a process exit code.

    Assertion failures and unexpected exceptions are both counted as
    failures; the run always continues to the next test.
    """
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)

    passed = 0
    failed = 0
    for test_name, test_func in tests:
        try:
            test_func()
            print(f"✓ {test_name}")
            passed += 1
        except AssertionError as e:
            print(f"\n✗ TEST FAILED: {test_name}")
            print(f"  Error: {e}")
            failed += 1
        except Exception as e:
            print(f"\n✗ TEST ERROR: {test_name}")
            print(f"  Unexpected error: {type(e).__name__}: {e}")
            failed += 1

    print("\n" + "=" * 70)
    print("TEST SUMMARY")
    print("=" * 70)
    print(f"\nTotal Tests: {len(tests)}")
    print(f"Passed: {passed} ✓")
    print(f"Failed: {failed} ✗")
    if failed == 0:
        print("\n🎉 ALL TESTS PASSED")
        return 0
    print(f"\n❌ {failed} TEST(S) FAILED - Review errors above")
    return 1


def expect_error(exc_type: type, func: Callable[..., Any], *args: Any, **kwargs: Any) -> BaseException:
    """Call func and return the raised exception; fail the test if none or another type is raised."""
    try:
        func(*args, **kwargs)
    except exc_type as exc:
        return exc
    raise AssertionError(f"{getattr(func, '__name__', func)} did not raise {exc_type.__name__}")
