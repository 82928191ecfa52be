"""End-to-end acceptance checks at the stated tolerances and time limits.

The overfit run (criteria 3, 4, 9, 10) trains twice for roughly seven
minutes each on one CPU; the classifier run (criterion 8) takes about six.
"""

import time

import numpy as np
import pytest

from rocnet.evaluation import (
    complexity_report,
    decode_codes,
    eval_classification,
    eval_reconstruction,
    generate_samples,
    sample_hull_codes,
    split_indices,
)
from rocnet.gradcheck import run_suite
from rocnet.model import ModelConfig, Pass, encode_batch
from rocnet.octree import build, from_bytes, to_bytes, to_voxels
from rocnet.training import TrainConfig, fit, fit_classifier, measure_resources
from rocnet.voxel import SHAPE_KINDS, VoxelGrid, chamfer, generate_synthetic, iou, random_grid

OVERFIT_ITERATIONS = 300
OVERFIT_BATCH = 20


def overfit_shapes():
    return [generate_synthetic(SHAPE_KINDS[i % 4], 32, seed=100 + i) for i in range(20)]


def overfit_run(out_dir, monkeypatch):
    monkeypatch.setenv("ROCNET_THREADS", "0")
    cfg = TrainConfig(batch_size=OVERFIT_BATCH, iterations=OVERFIT_ITERATIONS, alpha=5.0, seed=0)
    start = time.perf_counter()
    result = fit(overfit_shapes(), ModelConfig(32, 8, latent_dim=80), cfg, out_dir=out_dir)
    return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    mp = pytest.MonkeyPatch()
    try:
        out = tmp_path_factory.mktemp("overfit_a")
        result, seconds = overfit_run(out, mp)
    finally:
        mp.undo()
    return out, result, seconds


def test_criterion_01_octree_round_trip(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = 0
    for i in range(200):
        N = int(rng.choice([16, 32, 64]))
        k = int(rng.choice([4, 8, 16]))
        if i % 3 == 0:
            g = random_grid(N, float(rng.uniform(0.0, 0.6)), rng)
        elif i % 3 == 1:
            g = random_grid(N, float(rng.uniform(0.0, 0.002)), rng)
        else:
            g = generate_synthetic(SHAPE_KINDS[i % 4], N, seed=i)
        t = build(g, k)
        failures += not (to_voxels(t) == g and from_bytes(to_bytes(t)) == t)
    seconds = time.perf_counter() - start
    ok = failures == 0 and seconds < 60
    acceptance(1, ok, f"200 grids, {failures} mismatches, {seconds:.1f}s (limit 60s)")
    assert ok


def test_criterion_02_gradient_correctness(acceptance):
    start = time.perf_counter()
    reports = run_suite(seed=0, grid_side=8, leaf_side=4, tolerance=1e-4)
    seconds = time.perf_counter() - start
    worst = max(reports, key=lambda r: r.max_error)
    failed = [r.name for r in reports if not r.passed]
    ok = not failed and seconds < 300
    acceptance(2, ok, f"{len(reports)} checks, worst {worst.name} {worst.max_error:.2e} "
                      f"(limit 1e-4), failed {failed}, {seconds:.1f}s (limit 300s)")
    assert ok


def test_criterion_03_overfit_reconstruction(overfit, acceptance):
    _, result, seconds = overfit
    ps = result.params
    report = eval_reconstruction(ps, overfit_shapes(), "predicted", chamfer_points=512)
    ok = report.mean_iou >= 0.95 and report.mean_topology_accuracy >= 0.98 and seconds < 1800
    acceptance(3, ok, f"IoU {report.mean_iou:.4f} (>= 0.95), topology {report.mean_topology_accuracy:.4f} "
                      f"(>= 0.98), {OVERFIT_ITERATIONS} iterations in {seconds:.0f}s (limit 1800s)")
    assert ok


def test_criterion_04_mode_near_equality(overfit, acceptance):
    ps = overfit[1].params
    shapes = overfit_shapes()
    predicted = eval_reconstruction(ps, shapes, "predicted", chamfer_points=64).mean_iou
    known = eval_reconstruction(ps, shapes, "known", chamfer_points=64).mean_iou
    gap = abs(known - predicted)
    ok = gap <= 0.02
    acceptance(4, ok, f"IoU known {known:.4f}, predicted {predicted:.4f}, gap {gap:.4f} (<= 0.02)")
    assert ok


def test_criterion_05_parameter_growth(acceptance):
    start = time.perf_counter()
    report = complexity_report([(N, 32) for N in (64, 128, 256, 512, 1024, 2048)])
    seconds = time.perf_counter() - start
    worst = max(abs(r) for r in report.residuals)
    ok = worst == 0 and seconds < 1.0
    acceptance(5, ok, f"slope {report.slope:.0f} params/level, max residual {worst} (== 0), "
                      f"{seconds:.3f}s (limit 1s)")
    assert ok


def test_criterion_06_complexity_scaling(acceptance):
    start = time.perf_counter()
    dense = [measure_resources([random_grid(N, 0.5, np.random.default_rng(N))], ModelConfig(N, 8)).peak_bytes
             for N in (16, 32, 64)]
    empty = [measure_resources([VoxelGrid.empty(N)], ModelConfig(N, 8)).peak_bytes for N in (16, 32, 64)]
    seconds = time.perf_counter() - start
    ratios = [dense[1] / dense[0], dense[2] / dense[1]]
    ok = all(4 <= r <= 16 for r in ratios) and len(set(empty)) == 1 and seconds < 600
    acceptance(6, ok, f"dense ratios {ratios[0]:.2f}, {ratios[1]:.2f} (in [4,16]), "
                      f"empty peaks {empty} (constant), {seconds:.1f}s (limit 600s)")
    assert ok


def brute_iou(a, b):
    inter = union = 0
    for x, y in zip(a.occupancy.ravel(), b.occupancy.ravel()):
        inter += bool(x and y)
        union += bool(x or y)
    return 1.0 if union == 0 else inter / union


def brute_chamfer(P, G):
    def directed(src, dst):
        best = np.empty(len(src))
        for i, p in enumerate(src):
            best[i] = min(((p - g) ** 2).sum() for g in dst)
        return np.mean(best)

    return float(directed(P, G) + directed(G, P))


def test_criterion_07_metric_correctness(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(50):
        side = int(rng.choice([4, 8, 16]))
        a = random_grid(side, float(rng.random()), rng)
        b = random_grid(side, float(rng.random()), rng)
        mismatches += iou(a, b) != brute_iou(a, b)
        mismatches += iou(a, a) != 1.0
        P = rng.random((int(rng.integers(1, 101)), 3))
        G = rng.random((int(rng.integers(1, 101)), 3))
        mismatches += chamfer(P, G) != brute_chamfer(P, G)
        mismatches += chamfer(P, P) != 0.0
    seconds = time.perf_counter() - start
    ok = mismatches == 0 and seconds < 60
    acceptance(7, ok, f"50 random instances, {mismatches} mismatches, {seconds:.1f}s (limit 60s)")
    assert ok


def test_criterion_08_classification(acceptance):
    kinds = ["sphere", "box", "torus"]
    grids = [generate_synthetic(kinds[i % 3], 32, seed=1000 + i) for i in range(300)]
    labels = np.array([i % 3 for i in range(300)])
    train, test = split_indices(300, seed=0)
    start = time.perf_counter()
    result = fit_classifier([grids[i] for i in train], labels[train], ModelConfig(32, 8, n_classes=3),
                            TrainConfig(batch_size=50, iterations=200, seed=0))
    acc = eval_classification(result.params, [grids[i] for i in test], labels[test])
    seconds = time.perf_counter() - start
    ok = acc >= 0.9 and seconds < 2700
    acceptance(8, ok, f"held-out accuracy {acc:.4f} on {len(test)} samples (>= 0.90), "
                      f"{seconds:.0f}s (limit 2700s)")
    assert ok


def test_criterion_09_generation_contract(overfit, acceptance):
    start = time.perf_counter()
    ps = overfit[1].params
    shapes = overfit_shapes()
    latents = encode_batch([build(g, 8) for g in shapes], ps, Pass(training=False)).data
    one_hot = np.eye(len(latents))
    exact = generate_samples(ps, latents, len(latents), weights=one_hot)
    direct = decode_codes(ps, latents)
    reproduces = all(a == b for a, b in zip(exact.grids, direct))
    codes, _ = sample_hull_codes(latents, 200, seed=3)
    inside = bool(np.all(codes >= latents.min(axis=0)) and np.all(codes <= latents.max(axis=0)))
    a = generate_samples(ps, latents, 5, seed=11)
    b = generate_samples(ps, latents, 5, seed=11)
    seeded = np.array_equal(a.codes, b.codes) and all(x == y for x, y in zip(a.grids, b.grids))
    seconds = time.perf_counter() - start
    ok = reproduces and inside and seeded and seconds < 60
    acceptance(9, ok, f"one-hot exact {reproduces}, within hull bounds {inside}, seeded {seeded}, "
                      f"{seconds:.1f}s (limit 60s)")
    assert ok


def test_criterion_10_determinism(overfit, tmp_path, monkeypatch, acceptance):
    first = overfit[0]
    overfit_run(tmp_path, monkeypatch)
    same = {name: (first / name).read_bytes() == (tmp_path / name).read_bytes()
            for name in ("final.rockpt", "loss.csv")}
    ok = all(same.values())
    acceptance(10, ok, f"bit-identical across two runs: {same}")
    assert ok
