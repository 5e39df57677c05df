"""
Sinkhorn / OTN Tests
====================
Doubly stochastic output, agreement with a naive alternating-normalization
oracle, positivity kernels, convergence diagnostics and input validation.
"""

import sys

import numpy as np

from otn import SinkhornConfig, max_deviation, positive_kernel, refine, sinkhorn
from pgs_utils import ConfigurationError, NumericInputError, ShapeError, expect_error, run_test_suite


def oracle_alternating(K: np.ndarray, iterations: int) -> np.ndarray:
    """Normalize rows then columns, `iterations` times, on explicit matrices."""
    P = K.astype(np.float64).copy()
    for _ in range(iterations):
        P = P / P.sum(axis=1, keepdims=True)
        P = P / P.sum(axis=0, keepdims=True)
    return P


def test_random_positive_matrices_become_doubly_stochastic():
    rng = np.random.default_rng(41)
    for n in (4, 32, 196):
        for _ in range(5):
            S = rng.uniform(0.05, 1.0, size=(n, n))
            result = sinkhorn(S)
            assert result.iterations <= 50
            assert np.max(np.abs(result.matrix.sum(axis=1) - 1.0)) < 1e-6
            assert np.max(np.abs(result.matrix.sum(axis=0) - 1.0)) < 1e-6
            assert result.converged
            oracle = oracle_alternating(S, result.iterations)
            assert np.max(np.abs(result.matrix - oracle)) < 1e-9


def test_identity_passes_through():
    result = sinkhorn(np.eye(2))
    assert result.iterations == 1
    assert result.deviation < 1e-12
    assert np.allclose(result.matrix, np.eye(2), atol=1e-5)


def test_doubly_stochastic_positive_input_is_unchanged():
    S = np.array([[0.3, 0.7], [0.7, 0.3]])
    result = sinkhorn(S)
    assert result.iterations == 1
    assert np.allclose(result.matrix, S, atol=1e-12)


def test_strictly_positive_input_is_balanced_without_shift():
    S = np.array([[2.0, 1.0], [1.0, 2.0]])
    expected = np.array([[2.0, 1.0], [1.0, 2.0]]) / 3.0
    assert np.allclose(sinkhorn(S).matrix, expected, atol=1e-12)
    assert np.allclose(refine(S), S + expected, atol=1e-12)


def test_refine_of_zero_matrix_is_uniform():
    for n in (1, 3, 14):
        assert np.allclose(refine(np.zeros((n, n))), np.full((n, n), 1.0 / n), atol=1e-12)


def test_refine_of_scalar_adds_one():
    for c in (-2.0, 0.0, 3.5):
        assert np.allclose(refine(np.array([[c]])), [[c + 1.0]], atol=1e-12)


def test_shift_kernel_only_when_needed():
    cfg = SinkhornConfig()
    positive = np.array([[0.5, 0.2], [0.1, 0.9]])
    assert np.array_equal(positive_kernel(positive, cfg), positive)
    signed = np.array([[1.0, -0.5], [-0.5, 1.0]])
    K = positive_kernel(signed, cfg)
    assert K.min() > 0
    assert abs(K.min() - cfg.shift_delta) < 1e-15


def test_entropic_kernel():
    cfg = SinkhornConfig(kernel="entropic", epsilon=0.5)
    rng = np.random.default_rng(42)
    S = rng.uniform(-1, 1, size=(6, 6))
    K = positive_kernel(S, cfg)
    assert K.max() == 1.0 and K.min() > 0
    result = sinkhorn(S, cfg)
    assert result.converged
    assert max_deviation(result.matrix) < cfg.tol


def test_entropic_kernel_rows_far_below_global_max():
    cfg = SinkhornConfig(kernel="entropic", epsilon=0.01)
    S = np.array([[0.0, 0.0], [-1000.0, -1000.0]])
    result = sinkhorn(S, cfg)
    assert np.isfinite(result.matrix).all()
    assert np.allclose(result.matrix, 0.5)
    expect_error(NumericInputError, sinkhorn, np.array([[0.0, -1000.0], [0.0, -1000.0]]), cfg)


def test_deviation_trace_decreases():
    for seed in range(5):
        S = np.random.default_rng(100 + seed).uniform(0.1, 1.0, size=(5, 5))
        trace = sinkhorn(S).trace
        assert trace[-1] < 1e-6
        assert all(b <= a for a, b in zip(trace, trace[1:])), trace


def test_iteration_cap_reports_non_convergence():
    S = np.array([[1.0, 1e-3, 1e-3], [1e-3, 1e-3, 1.0], [1.0, 1.0, 1e-3]])
    result = sinkhorn(S, SinkhornConfig(max_iters=1, tol=1e-12))
    assert result.iterations == 1
    assert len(result.trace) == 1
    assert not result.converged


def test_refine_adds_balanced_matrix():
    rng = np.random.default_rng(43)
    S = rng.uniform(-1, 1, size=(5, 5))
    S = 0.5 * (S + S.T)
    assert np.allclose(refine(S), S + sinkhorn(S).matrix, atol=0)


def test_input_validation():
    expect_error(ShapeError, sinkhorn, np.ones((2, 3)))
    expect_error(ShapeError, sinkhorn, np.ones((0, 0)))
    bad = np.ones((3, 3))
    bad[1, 1] = np.nan
    expect_error(NumericInputError, sinkhorn, bad)
    expect_error(ConfigurationError, SinkhornConfig, max_iters=0)
    expect_error(ConfigurationError, SinkhornConfig, kernel="gaussian")
    expect_error(ConfigurationError, SinkhornConfig, tol=0.0)


def run_all_tests():
    return run_test_suite("SINKHORN / OTN TESTS", [
        ("Doubly stochastic output", test_random_positive_matrices_become_doubly_stochastic),
        ("Identity", test_identity_passes_through),
        ("Doubly stochastic input", test_doubly_stochastic_positive_input_is_unchanged),
        ("Positive input unshifted", test_strictly_positive_input_is_balanced_without_shift),
        ("Refine zero matrix", test_refine_of_zero_matrix_is_uniform),
        ("Refine scalar", test_refine_of_scalar_adds_one),
        ("Shift kernel", test_shift_kernel_only_when_needed),
        ("Entropic kernel", test_entropic_kernel),
        ("Entropic underflow", test_entropic_kernel_rows_far_below_global_max),
        ("Deviation trace", test_deviation_trace_decreases),
        ("Iteration cap", test_iteration_cap_reports_non_convergence),
        ("Refinement", test_refine_adds_balanced_matrix),
        ("Input validation", test_input_validation),
    ])


if __name__ == "__main__":
    sys.exit(run_all_tests())
