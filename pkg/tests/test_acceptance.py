"""Acceptance gate: one test per exit criterion.

Run ``pytest tests/test_acceptance.py`` for a PASS/FAIL line per criterion
at the end of the report.
"""

import json
import math
import time

import numpy as np
import pytest

from helpers import blob_recovery_ari, random_volume_maps
from hrgr.checks import run_gradchecks
from hrgr.cli import main
from hrgr.dfp import ChannelReducer, DfpConfig, association, grid_labels, run_dfp, update_centers
from hrgr.graph import build_adjacency_oracle, build_adjacency_parallel, stack_index_maps
from hrgr.harness import train_toy
from hrgr.loss import FocalConfig, focal_loss
from hrgr.metrics import f1_at_eer, pixel_auc
from hrgr.reasoning import HrgrConfig, HrgrParams, hrgr_block, message_pass
from hrgr.tensor import load, save

GRADIENT_OPS = ["reduce_channels", "association", "update_centers", "run_dfp",
                "aggregate_nodes", "project_nodes", "message_pass", "regularize", "remap",
                "fuse", "focal_loss", "hrgr_block"]


@pytest.mark.criterion(1, "gradient suite, 12 ops x 5 seeds, h=1e-5, tol=1e-4")
def test_gradient_suite(note):
    t0 = time.perf_counter()
    reports = run_gradchecks(GRADIENT_OPS, seeds=range(5), h=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    failed = [r.line() for r in reports if not r.passed]
    note(f"{len(reports)} checks, max rel {max(r.max_rel_err for r in reports):.1e}, "
         f"{elapsed:.1f}s")
    assert {r.op for r in reports} == set(GRADIENT_OPS)
    assert not failed, "\n".join(failed)
    assert elapsed < 300


@pytest.mark.criterion(2, "parallel adjacency == oracle on 100 volumes, threads 1/2/4/8")
def test_adjacency_oracle_equivalence(note):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240)
    for _ in range(100):
        maps, counts = random_volume_maps(rng, max_hw=32, max_k=4, max_m=16)
        vol = stack_index_maps(maps, counts)
        ref = build_adjacency_oracle(vol)
        for threads in (1, 2, 4, 8):
            out = build_adjacency_parallel(vol, threads)
            assert out.dtype == ref.dtype and out.tobytes() == ref.tobytes()
    elapsed = time.perf_counter() - t0
    note(f"{elapsed:.1f}s")
    assert elapsed < 60


@pytest.mark.criterion(3, "coarse region stacked on four quadrants")
def test_fig3_configuration():
    quadrants = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    vol = stack_index_maps([np.ones((2, 2), dtype=np.uint32), quadrants], [1, 4])
    assert vol.values.shape == (4, 4, 2)
    a = build_adjacency_oracle(vol)
    assert all(a[0, v] and a[v, 0] for v in range(1, 5))
    assert all(a[u, v] for u in range(1, 5) for v in range(1, 5))
    assert np.array_equal(build_adjacency_parallel(vol, 4), a)


@pytest.mark.criterion(4, "association rows sum to 1; one-hot D gives exact region means")
def test_row_stochasticity(note):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(30):
        n, m, c = (int(v) for v in rng.integers(1, 40, size=3))
        scale = float(rng.uniform(0.1, 10.0))
        d = association(scale * rng.standard_normal((n, c)), scale * rng.standard_normal((m, c)))
        worst = max(worst, float(np.abs(d.sum(axis=1) - 1).max()))
    for seed in range(10):
        r = np.random.default_rng(seed)
        h, w = (int(v) for v in r.integers(4, 17, size=2))
        cfg = DfpConfig(n_regions=4, n_iter=int(r.integers(1, 6)))
        d, _, _ = run_dfp(r.standard_normal((h, w, 3)), ChannelReducer.init(5, 3, r), cfg)
        worst = max(worst, float(np.abs(d.sum(axis=1) - 1).max()))
    feats = [rng.standard_normal((16, 16, 4)), rng.standard_normal((8, 8, 4))]
    _, diag = hrgr_block(feats, HrgrParams.init([4, 4], rng=0), HrgrConfig(n_regions=[8, 4]))
    for d in diag["D"]:
        worst = max(worst, float(np.abs(d.sum(axis=1) - 1).max()))
    note(f"max row deviation {worst:.1e}")
    assert worst <= 1e-6

    labels = rng.integers(0, 6, size=200)
    labels[:6] = np.arange(6)
    f = rng.standard_normal((200, 5))
    centres = update_centers(np.eye(6)[labels], f, epsilon=0.0)
    for j in range(6):
        assert np.abs(centres[j] - f[labels == j].mean(axis=0)).max() <= 1e-10


@pytest.mark.criterion(5, "blob partition recovery, ARI >= 0.9 on >= 9 of 10 seeds")
def test_partition_recovery(note):
    t0 = time.perf_counter()
    scores = [blob_recovery_ari(seed) for seed in range(10)]
    elapsed = time.perf_counter() - t0
    note(f"ARI min {min(scores):.3f}, {sum(s >= 0.9 for s in scores)}/10, {elapsed:.1f}s")
    assert sum(s >= 0.9 for s in scores) >= 9
    assert elapsed < 30


@pytest.mark.criterion(6, "identity contracts")
def test_identity_contracts():
    rng = np.random.default_rng(6)
    feats = [rng.standard_normal((8, 8, 4)), rng.standard_normal((4, 4, 6))]
    params = HrgrParams.init([4, 6], rng=1)
    params.mu = [np.zeros(1), np.zeros(1)]
    out, _ = hrgr_block(feats, params, HrgrConfig(n_regions=4, n_iter=3))
    assert all(np.array_equal(o, f) for o, f in zip(out, feats))

    rg = rng.standard_normal((9, 5))
    assert np.array_equal(message_pass(rg, np.eye(9, dtype=np.uint8), np.eye(5)), rg)

    cfg = DfpConfig(n_regions=16, partition_mode="regular-grid")
    _, _, labels = run_dfp(rng.standard_normal((32, 32, 3)), ChannelReducer.init(5, 4, 0), cfg)
    expected = (np.arange(32)[:, None] // 8) * 4 + np.arange(32)[None, :] // 8 + 1
    assert np.array_equal(labels, expected)
    assert np.array_equal(grid_labels(32, 32, 16), expected)


@pytest.mark.criterion(7, "focal loss reference value and gamma=0 reduction")
def test_focal_loss(note):
    scalar = -0.5 * (1 - 0.5) ** 2 * math.log(0.5)
    value = focal_loss(np.array([0.5]), np.array([1]), FocalConfig(alpha=0.5, gamma=2.0))
    note(f"value {value:.6f}")
    assert abs(value - 0.08664) <= 1e-4
    assert abs(value - scalar) <= 1e-15

    rng = np.random.default_rng(7)
    y = rng.uniform(0.001, 0.999, 500)
    t = (rng.random(500) < 0.5).astype(int)
    bce = math.fsum(-math.log(p) if ti else -math.log(1 - p) for p, ti in zip(y, t))
    got = focal_loss(y, t, FocalConfig(alpha=0.5, gamma=0.0))
    assert abs(got - 0.5 * bce) <= 1e-10


@pytest.mark.criterion(8, "toy training halves mean focal loss in 200 steps, deterministic")
def test_toy_trainability(note):
    t0 = time.perf_counter()
    first = train_toy()
    elapsed = time.perf_counter() - t0
    second = train_toy()
    ratio = first["final_loss"] / first["initial_loss"]
    note(f"loss {first['initial_loss']:.5f} -> {first['final_loss']:.5f} "
         f"(ratio {ratio:.3f}), held-out AUC {first['auc']:.3f}, {elapsed:.0f}s per run")
    assert len(first["losses"]) == 200
    assert ratio <= 0.5
    assert first["losses"] == second["losses"] and first["final_loss"] == second["final_loss"]
    assert elapsed < 300


def _pair_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (pos.size * neg.size)


def _sweep_oracle(s, y):
    u = np.unique(s)
    P, N = int(y.sum()), int(y.size - y.sum())
    best = None
    for t in (u[:-1] + u[1:]) / 2.0:
        tp = int(((s > t) & (y == 1)).sum())
        fp = int(((s > t) & (y == 0)).sum())
        fn = P - tp
        gap = abs(fp * P - fn * N)
        f1 = 2 * tp / (2 * tp + fp + fn)
        if best is None or (gap, -f1, t) < best[0]:
            best = ((gap, -f1, t), f1, t)
    return best[1], best[2]


@pytest.mark.criterion(9, "AUC vs pair counting, F1@EER vs exhaustive sweep")
def test_metrics():
    rng = np.random.default_rng(9)
    for i in range(20):
        y = (rng.random(1000) < rng.uniform(0.05, 0.5)).astype(int)
        y[:2] = [0, 1]
        s = rng.random(1000)
        if i % 2:
            s = np.round(s, 2)
        assert abs(pixel_auc(s, y) - _pair_auc(s, y)) <= 1e-12
    for i in range(50):
        y = (rng.random(200) < rng.uniform(0.05, 0.5)).astype(int)
        y[:2] = [0, 1]
        s = rng.random(200)
        if i % 2:
            s = np.round(s, 1)
        f1, thr = f1_at_eer(s, y)
        f1_o, thr_o = _sweep_oracle(s, y)
        assert f1 == f1_o and thr == thr_o


@pytest.mark.criterion(10, "128x128x4 parallel adjacency at 8 threads beats the oracle")
def test_performance(capsys, note):
    code = main(["bench", "--h", "128", "--w", "128", "--layers", "4", "--threads", "8"])
    report = json.loads(capsys.readouterr().out)
    note(f"oracle {report['oracle_seconds']:.3f}s, parallel {report['parallel_seconds']:.4f}s, "
         f"speedup {report['speedup']:.0f}x on {report['cpu_count']} cpu")
    assert code == 0
    assert report["identical"] is True
    assert report["parallel_seconds"] < report["oracle_seconds"]


@pytest.mark.criterion(11, ".hrgt round trips, all dtypes, ranks 1-4")
def test_format_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    for dtype in (np.float32, np.float64, np.uint32):
        for rank in range(1, 5):
            for trial in range(3):
                shape = tuple(int(v) for v in rng.integers(1, 6, size=rank))
                if dtype is np.uint32:
                    x = rng.integers(0, 2**32, size=shape, dtype=np.uint64).astype(np.uint32)
                else:
                    x = rng.standard_normal(shape).astype(dtype)
                    x.reshape(-1)[0] = -0.0
                path = tmp_path / f"{np.dtype(dtype).name}_{rank}_{trial}.hrgt"
                save(x, path)
                y = load(path)
                assert y.dtype == x.dtype and y.shape == x.shape
                assert y.tobytes() == x.tobytes()
                copy = tmp_path / "copy.hrgt"
                save(y, copy)
                assert copy.read_bytes() == path.read_bytes()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
