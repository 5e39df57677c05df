"""
End-to-End Acceptance Test for PGS Patch Masking
================================================

Runs the full-size property checks that are too slow for the unit suites.

Test Objectives:
----------------
1. Sinkhorn contract on 1,000 random positive matrices
2. Mask-count bounds over 10,000 randomized trials at n = 196
3. Sobel agreement with an independent shifted-window computation
4. Edge-retention soundness on shape-on-background images
5. InfoNCE identity value, gradients over 100 batches, invariances
6. Toy training signal (loss and recall@1) at B = 32 within 200 steps
7. Per-image masking latency and the MR / ED / OTN breakdown
8. Byte-identical batch output regardless of thread count
9. Well-formed, distinct outputs for all 16 ablation combinations

Success Criteria:
-----------------
- Every check passes with zero violations
- Timing checks report their measurement even when they pass
"""

import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from contrastive import ContrastiveConfig, EmbeddingBatch, ToyTrainConfig, finite_diff_check, info_nce, train_toy
from edge import sobel_magnitude
from image_io import GrayImage, Image, encode_ppm, patchify
from otn import sinkhorn
from pgs_bench import run_bench
from pgs_cli import ablation_grid, main as cli_main
from pgs_config import RunConfig
from pgs_utils import run_test_suite, set_quiet
from selector import MaskingConfig, compute_edge_scores, generate_mask


def shifted_window_sobel(plane: np.ndarray) -> np.ndarray:
    """Sobel magnitude from explicit shifted slices of an edge-padded plane."""
    p = np.pad(plane, 1, mode="edge")
    h, w = plane.shape

    def at(dy, dx):
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    gx = (at(-1, 1) + 2 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2 * at(0, -1) + at(1, -1))
    gy = (at(1, -1) + 2 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2 * at(-1, 0) + at(-1, 1))
    return np.sqrt(gx * gx + gy * gy)


def shape_image(rng: np.random.Generator, size: int) -> Image:
    data = rng.integers(0, 50, size=(size, size, 3)).astype(np.uint8)
    top, left = (int(v) for v in rng.integers(0, size // 2, size=2))
    h, w = (int(v) for v in rng.integers(size // 6, size // 2, size=2))
    data[top:top + h, left:left + w] = rng.integers(120, 256, size=3).astype(np.uint8)
    return Image(data)


def test_sinkhorn_contract():
    """
    Test 1: 1,000 random positive matrices balance within 1e-6 in at most 50
    iterations and match naive alternating normalization to 1e-9.
    """
    print("\n" + "=" * 70)
    print("TEST 1: SINKHORN CONTRACT")
    print("=" * 70)

    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for trial in range(1000):
        n = (4, 32, 196)[trial % 3]
        S = rng.uniform(0.01, 1.0, size=(n, n))
        result = sinkhorn(S)
        P = result.matrix
        assert result.iterations <= 50
        assert np.max(np.abs(P.sum(axis=1) - 1)) < 1e-6, trial
        assert np.max(np.abs(P.sum(axis=0) - 1)) < 1e-6, trial

        oracle = S.copy()
        for _ in range(result.iterations):
            oracle = oracle / oracle.sum(axis=1, keepdims=True)
            oracle = oracle / oracle.sum(axis=0, keepdims=True)
        worst = max(worst, float(np.max(np.abs(P - oracle))))
    elapsed = time.perf_counter() - start

    print(f"  worst oracle disagreement: {worst:.2e}")
    print(f"  runtime: {elapsed:.2f} s")
    assert worst <= 1e-9
    assert elapsed < 10.0
    print("\n✓ TEST 1 PASSED")


def test_mask_count_bounds():
    """
    Test 2: over 10,000 randomized (image, features, seed) triples at n = 196
    the dynamic variant masks 58..98 patches and the fixed variant exactly 98.
    """
    print("\n" + "=" * 70)
    print("TEST 2: MASK-COUNT BOUNDS")
    print("=" * 70)

    rng = np.random.default_rng(2)
    violations = 0
    for trial in range(10000):
        grid = patchify(shape_image(rng, 56), 4)
        features = rng.standard_normal((grid.n_patches, 16))
        seed = int(rng.integers(0, 2 ** 31))
        epoch = int(rng.integers(0, 32))
        if trial % 2:
            plan = generate_mask(grid, features, epoch, MaskingConfig.fixed(seed=seed))
            violations += len(plan.masked) != 98
        else:
            plan = generate_mask(grid, features, epoch, MaskingConfig.dynamic(seed=seed))
            violations += not 58 <= len(plan.masked) <= 98

    print(f"  violations: {violations} / 10000")
    assert violations == 0
    print("\n✓ TEST 2 PASSED")


def test_sobel_oracle():
    """Test 3: 500 random images up to 64x64 agree pixelwise to 1e-9."""
    print("\n" + "=" * 70)
    print("TEST 3: SOBEL ORACLE EQUIVALENCE")
    print("=" * 70)

    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(500):
        h, w = (int(v) for v in rng.integers(3, 65, size=2))
        plane = rng.uniform(0, 255, size=(h, w))
        got = sobel_magnitude(GrayImage(plane)).magnitude
        worst = max(worst, float(np.max(np.abs(got - shifted_window_sobel(plane)))))

    print(f"  worst pixel disagreement: {worst:.2e}")
    assert worst <= 1e-9
    print("\n✓ TEST 3 PASSED")


def test_edge_retention_soundness():
    """
    Test 4: retained patches score at or above the quantile threshold and are
    masked only when the lower-bound release fired.
    """
    print("\n" + "=" * 70)
    print("TEST 4: EDGE-RETENTION SOUNDNESS")
    print("=" * 70)

    rng = np.random.default_rng(4)
    retained_total = 0
    for trial in range(200):
        img = shape_image(rng, 56)
        grid = patchify(img, 4)
        detector = "canny" if trial % 2 else "sobel"
        cfg = MaskingConfig(seed=trial, edge_detector=detector)
        plan = generate_mask(grid, rng.standard_normal((grid.n_patches, 16)), 0, cfg)
        edges = compute_edge_scores(grid, cfg)
        nonzero = edges[edges > 0]
        if nonzero.size:
            threshold = np.quantile(nonzero, cfg.edge_quantile)
            assert all(edges[i] >= threshold for i in plan.retained_by_edge)
        masked_retained = set(plan.masked) & set(plan.released_by_bound)
        assert not set(plan.masked) & set(plan.retained_by_edge)
        if masked_retained:
            assert plan.constraint_warning
        retained_total += len(plan.retained_by_edge)

    print(f"  retained patches across corpus: {retained_total}")
    assert retained_total > 0
    print("\n✓ TEST 4 PASSED")


def test_info_nce_correctness():
    """Test 5: identity value, gradients over 100 batches, invariances."""
    print("\n" + "=" * 70)
    print("TEST 5: INFONCE CORRECTNESS")
    print("=" * 70)

    eye = np.eye(2)
    identity = info_nce(EmbeddingBatch(eye, eye), ContrastiveConfig(temperature=1.0)).loss
    assert abs(identity - math.log(1 + math.exp(-1))) < 1e-9

    rng = np.random.default_rng(5)
    cfg = ContrastiveConfig(temperature=0.5)
    worst = 0.0
    for _ in range(100):
        B, d = (int(v) for v in rng.integers(2, 7, size=2))
        I, T = rng.standard_normal((B, d)), rng.standard_normal((B, d))
        out = info_nce(EmbeddingBatch(I, T), cfg)
        worst = max(
            worst,
            finite_diff_check(lambda X: info_nce(EmbeddingBatch(X, T), cfg).loss, out.grad_image, I,
                              floor=1e-4),
            finite_diff_check(lambda X: info_nce(EmbeddingBatch(I, X), cfg).loss, out.grad_text, T,
                              floor=1e-4),
        )
        perm = rng.permutation(B)
        permuted = info_nce(EmbeddingBatch(I[perm], T[perm]), cfg).loss
        assert abs(permuted - out.loss) < 1e-12
        ones = np.ones((B, 1))
        shifted = info_nce(EmbeddingBatch(np.hstack([I, ones]), np.hstack([T, 2 * ones])), cfg).loss
        assert abs(shifted - out.loss) < 1e-12

    print(f"  worst relative gradient error: {worst:.2e}")
    assert worst < 1e-4
    print("\n✓ TEST 5 PASSED")


def test_toy_training_signal():
    """Test 6: loss below 0.5 ln 32 within 200 steps and recall@1 above 5x chance."""
    print("\n" + "=" * 70)
    print("TEST 6: TOY TRAINING SIGNAL")
    print("=" * 70)

    start = time.perf_counter()
    result = train_toy(ToyTrainConfig(steps=200, batch_size=32), masking="pgs")
    elapsed = time.perf_counter() - start
    target = 0.5 * math.log(32)

    print(f"  best loss {min(result.losses):.4f} (target < {target:.4f})")
    print(f"  recall@1 {result.final_recall:.3f} (chance {result.chance_recall:.3f})")
    print(f"  runtime {elapsed:.1f} s, masking share {result.masking_fraction:.1%}")
    assert min(result.losses) < target
    assert result.final_recall > 5 * result.chance_recall
    assert elapsed < 120.0
    print("\n✓ TEST 6 PASSED")


def test_masking_latency_and_breakdown():
    """Test 7: median per-image masking under 5 ms with MR/ED/OTN reported."""
    print("\n" + "=" * 70)
    print("TEST 7: MASKING OVERHEAD")
    print("=" * 70)

    report = run_bench(RunConfig(), repeat=5, warmup=1)
    print(f"  median masking: {report.masking_median_ms:.3f} ms per image")
    print(f"  breakdown (us): {json.dumps(report.breakdown_us)}")
    assert set(report.breakdown_us) == {"MR", "ED", "OTN"}
    assert report.train_step and 0.0 <= report.train_step["masking_fraction"] <= 1.0
    assert report.masking_median_ms < 5.0
    print("\n✓ TEST 7 PASSED")


def _write_corpus(folder: Path, count: int) -> None:
    rng = np.random.default_rng(8)
    for i in range(count):
        (folder / f"img_{i:03d}.ppm").write_bytes(encode_ppm(shape_image(rng, 224)))


def test_batch_determinism():
    """Test 8: threads=1 and threads=8 produce byte-identical records."""
    print("\n" + "=" * 70)
    print("TEST 8: DETERMINISM")
    print("=" * 70)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "imgs").mkdir()
        _write_corpus(tmp / "imgs", 100)
        pattern = str(tmp / "imgs" / "*.ppm")
        outputs = []
        for threads in (1, 8):
            out = tmp / f"threads_{threads}.jsonl"
            assert cli_main(["mask", pattern, "--seed", "42", "--threads", str(threads),
                             "--output", str(out), "--quiet"]) == 0
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]
        print(f"  {len(outputs[0].splitlines())} records, identical across thread counts")
    print("\n✓ TEST 8 PASSED")


def test_ablation_grid():
    """Test 9: all 16 ED x OTN x detector x variant combinations emit distinct records."""
    print("\n" + "=" * 70)
    print("TEST 9: ABLATION GRID")
    print("=" * 70)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        _write_corpus(tmp, 2)
        out = tmp / "ablate.jsonl"
        assert cli_main(["ablate", str(tmp / "*.ppm"), "--output", str(out), "--quiet"]) == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]

    assert len(records) == 16 * 2
    combos = {json.dumps(r["ablation"], sort_keys=True) for r in records}
    assert combos == {json.dumps(c, sort_keys=True) for c in ablation_grid()}
    for record in records:
        assert record["grid_h"] * record["grid_w"] == 196
        assert 58 <= len(record["masked"]) <= 98
        assert len(record["scores"]) == 196
    echoes = {json.dumps(r["config_echo"], sort_keys=True) for r in records}
    assert len(echoes) == 16
    print(f"  {len(records)} records over {len(combos)} combinations")
    print("\n✓ TEST 9 PASSED")


def run_all_tests():
    """
    Runs all acceptance tests and reports results.
    """
    set_quiet(True)
    try:
        return run_test_suite("PGS MASKING - END-TO-END ACCEPTANCE SUITE", [
            ("Sinkhorn Contract", test_sinkhorn_contract),
            ("Mask-Count Bounds", test_mask_count_bounds),
            ("Sobel Oracle Equivalence", test_sobel_oracle),
            ("Edge-Retention Soundness", test_edge_retention_soundness),
            ("InfoNCE Correctness", test_info_nce_correctness),
            ("Toy Training Signal", test_toy_training_signal),
            ("Masking Overhead", test_masking_latency_and_breakdown),
            ("Determinism", test_batch_determinism),
            ("Ablation Grid", test_ablation_grid),
        ])
    finally:
        set_quiet(False)


if __name__ == "__main__":
    exit_code = run_all_tests()
    sys.exit(exit_code)
