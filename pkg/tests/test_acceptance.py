"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict through the ``report`` fixture; the
lines are printed together at the end of the pytest run.  Criteria 6 and 7
train two models and take most of the suite's runtime (about 40 minutes on
one core).
"""
import math
import time

import numpy as np
import pytest

from octree_codec.coder.codec import decode, encode
from octree_codec.coder.rangecoder import FREQ_TOTAL, RangeEncoder
from octree_codec.geometry import dequantize, grid_cells, quantize
from octree_codec.metrics import chamfer, d1_mse, d2, nearest
from octree_codec.model.infer import InferenceEngine, quantize_dist
from octree_codec.model.network import forward
from octree_codec.model.params import ModelConfig, ModelParams
from octree_codec.model.train import (TrainConfig, WindowDataset, grad_check,
                                      sequences_from_clouds, train)
from octree_codec.synthetic import corpus, random_cloud

N_CLOUDS = 100
HELD_OUT_DEPTH = 7
DENSE_POINTS = 30_000
TRAIN_BUDGET_S = 30 * 60


def ideal_bits(cdfs, symbols):
    return sum(-math.log2((c[s + 1] - c[s]) / FREQ_TOTAL) for c, s in zip(cdfs, symbols))


def random_rows(rng, n, K, level_max=16):
    return np.stack([rng.integers(0, 256, (n, K)), rng.integers(0, level_max + 1, (n, K)),
                     rng.integers(0, 9, (n, K))], axis=-1)


# ---------------------------------------------------------------------------
# criteria 1-3 share one pass over the random corpus
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def coded_corpus():
    rng = np.random.default_rng(2024)
    model = ModelParams.init(ModelConfig(N=64, N0=64), seed=0)
    encode(quantize(corpus(1, seed=0, n_points=300)[0], 5), model)   # compile outside the clock
    records = []
    seconds = 0.0
    for _ in range(N_CLOUDS):
        pc = random_cloud(rng)
        qc = quantize(pc, int(rng.integers(6, 11)))
        rec = {"pc": pc, "qc": qc}
        t = time.perf_counter()
        for name, m in (("baseline", None), ("model", model)):
            trace = {}
            bs = encode(qc, m, trace=trace)
            out = decode(bs.to_bytes(), m)
            rec[name] = (bs.payload_bits, ideal_bits(trace["cdfs"], trace["symbols"]), out)
        seconds += time.perf_counter() - t
        records.append(rec)
    return records, seconds


def test_1_lossless_roundtrip(coded_corpus, report):
    records, seconds = coded_corpus
    exact = sum(all(r[k][2].same_cells(r["qc"]) and r[k][2].count == r["qc"].count
                    for k in ("baseline", "model")) for r in records)
    depths = sorted({r["qc"].depth for r in records})
    ok = report.record(1, "lossless roundtrip", exact == N_CLOUDS and seconds < 300,
                       f"{exact}/{N_CLOUDS} clouds exact for both coders, depths {depths}, "
                       f"max {max(r['pc'].count for r in records)} points, {seconds:.1f} s")
    assert ok


def test_2_quantization_error_bound(coded_corpus, report):
    records, _ = coded_corpus
    violations, worst = 0, 0.0
    for r in records:
        pc, qc = r["pc"], r["qc"]
        dec = r["model"][2]
        rec_pts = dequantize(dec).points
        # find each input point's reconstruction among the decoded cells
        key = lambda c: (c[:, 0] << 32) | (c[:, 1] << 16) | c[:, 2]
        dkeys = key(dec.coords)
        order = np.argsort(dkeys)
        want = key(grid_cells(pc.points, dec.offset, dec.qs))
        pos = np.searchsorted(dkeys, want, sorter=order)
        pos = order[np.minimum(pos, len(order) - 1)]
        assert np.array_equal(dkeys[pos], want)
        err = np.abs(rec_pts[pos] - pc.points).max(axis=1)
        # allowance for rounding in offset + c * qs, a few ulps of the coordinates
        tol = 8 * np.finfo(float).eps * (np.abs(pc.points).max() + qc.qs * (1 << qc.depth))
        violations += int((err > qc.qs / 2 + tol).sum())
        worst = max(worst, float(err.max() / qc.qs))
    ok = report.record(2, "quantization error bound", violations == 0,
                       f"{violations} violations, worst error {worst:.6f} qs")
    assert ok


def test_3_rate_bound(coded_corpus, report):
    records, _ = coded_corpus
    slack = [r[k][1] + 64 - r[k][0] for r in records for k in ("baseline", "model")]
    rng = np.random.default_rng(7)
    cdf = quantize_dist(np.full(255, 1 / 255))
    enc = RangeEncoder()
    for s in rng.integers(0, 255, 10_000):
        enc.encode_symbol(cdf, int(s))
    bits = 8 * len(enc.finish())
    rel = abs(bits - 79_940) / 79_940
    ok = report.record(3, "rate bound", min(slack) >= 0 and rel < 0.002,
                       f"{len(slack)} encodes, min slack {min(slack):.1f} bits; "
                       f"uniform stream {bits} bits ({100 * rel:.3f}% from 79,940)")
    assert ok


# ---------------------------------------------------------------------------

def test_4_mask_causality(report):
    cfg = ModelConfig(N=16, N0=16)
    model = ModelParams.init(cfg, seed=3)
    engine = InferenceEngine(model, cfg.N)
    rng = np.random.default_rng(4)
    changed = 0
    for _ in range(1000):
        rows = random_rows(rng, cfg.N, cfg.K)
        m = int(rng.integers(0, cfg.N - 1))
        pert = rows.copy()
        pert[m + 1:] = random_rows(rng, cfg.N - m - 1, cfg.K)
        a = engine.window_probs(rows, cfg.N)
        b = engine.window_probs(pert, cfg.N)
        fa, fb = forward(model, rows[None])[0], forward(model, pert[None])[0]
        changed += int(not np.array_equal(a[:m + 1], b[:m + 1]))
        changed += int(not np.array_equal(fa[:m + 1], fb[:m + 1]))
    ok = report.record(4, "mask causality", changed == 0,
                       f"{changed} changed earlier distributions in 1000 trials "
                       "(coding engine and training forward)")
    assert ok


def test_5_gradient_check(report):
    cfg = ModelConfig(N=16, N0=8)
    ds = WindowDataset(sequences_from_clouds(corpus(1, seed=3, n_points=800), 6),
                       cfg.N, cfg.K, cfg.N0)
    rows, targets, mask = ds.batch([0, 3, 7])
    worst, n = 0.0, 0
    for seed in range(4):
        err, samples = grad_check(ModelParams.init(cfg, seed=seed), rows, targets, mask,
                                  n_params=128, seed=seed)
        worst = max(worst, err)
        n += len(samples)
    ok = report.record(5, "gradient check", worst < 1e-4,
                       f"max relative error {worst:.2e} over {n} sampled parameters (float64)")
    assert ok


# ---------------------------------------------------------------------------
# criteria 6 and 7: trained models on dense synthetic clouds
# ---------------------------------------------------------------------------

def _train(N, sequences):
    cfg = TrainConfig(lr=3e-3, batch_size=4096 // N, epochs=1000, max_steps=6000,
                      lr_floor=0.05, max_seconds=TRAIN_BUDGET_S - 60, seed=0)
    params, history = train(sequences, cfg, ModelConfig(N=N, N0=N))
    return params, history[-1]["seconds"]


@pytest.fixture(scope="module")
def held_out():
    clouds = corpus(9, seed=2, n_points=DENSE_POINTS)
    return clouds, [quantize(pc, HELD_OUT_DEPTH) for pc in clouds]


@pytest.fixture(scope="module")
def trained():
    seqs = sequences_from_clouds(corpus(250, seed=1, n_points=DENSE_POINTS), HELD_OUT_DEPTH)
    return {N: _train(N, seqs) for N in (64, 8)}


def _coded_bits(qcs, model=None):
    return sum(encode(qc, model).payload_bits for qc in qcs)


def test_6_learning_signal(trained, held_out, report):
    clouds, qcs = held_out
    model, seconds = trained[64]
    nodes = sum(encode(qc).node_count for qc in qcs)
    base = _coded_bits(qcs) / nodes
    ours = _coded_bits(qcs, model) / nodes
    cut = 1 - ours / base
    ok = report.record(6, "learning signal", cut >= 0.30 and seconds <= TRAIN_BUDGET_S,
                       f"{ours:.3f} vs baseline {base:.3f} bits/node on {nodes} held-out "
                       f"nodes, {100 * cut:.1f}% lower, trained {seconds:.0f} s")
    assert ok


def test_7_ablation_trend(trained, held_out, report):
    clouds, qcs = held_out
    n_points = sum(pc.count for pc in clouds)
    bpp = {N: _coded_bits(qcs, trained[N][0]) / n_points for N in (64, 8)}
    model = trained[64][0]
    qc = quantize(clouds[0], 6)
    nodes = encode(qc).node_count
    ms = []
    n0_values = [1, 2, 4, 8, 16, 32, 64]
    for N0 in n0_values:
        best = min(_timed(lambda: encode(qc, model, N=64, N0=N0)) for _ in range(3))
        ms.append(1000 * best / nodes * 1000)
    decreasing = all(b < a for a, b in zip(ms, ms[1:]))
    times = ", ".join(f"N0={k}: {v:.1f}" for k, v in zip(n0_values, ms))
    ok = report.record(7, "ablation trend", bpp[64] <= bpp[8] and decreasing,
                       f"bpp N=64 {bpp[64]:.3f} vs N=8 {bpp[8]:.3f}; "
                       f"ms per 1000 nodes {times}")
    assert ok


def _timed(fn):
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t


# ---------------------------------------------------------------------------

def brute_nn(q, r):
    """O(n^2) scan in plain Python; the first minimum wins."""
    idx, best = [], []
    for p in q.tolist():
        bd, bi = math.inf, -1
        for j, s in enumerate(r.tolist()):
            dx, dy, dz = p[0] - s[0], p[1] - s[1], p[2] - s[2]
            d = dx * dx + dy * dy + dz * dz
            if d < bd:
                bd, bi = d, j
        idx.append(bi)
        best.append(bd)
    return np.array(idx), np.array(best)


def test_8_metric_oracles(report):
    rng = np.random.default_rng(8)
    exact = 0
    for _ in range(5):
        a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3))
        ia, da = nearest(a, b)
        ib, db = nearest(b, a)
        (oa, ea), (ob, eb) = brute_nn(a, b), brute_nn(b, a)
        exact += int(np.array_equal(da, ea) and np.array_equal(db, eb)
                     and np.array_equal(ia, oa) and np.array_equal(ib, ob)
                     and chamfer(a, b) == ea.mean() + eb.mean())
    grid = np.unique(rng.integers(0, 20, (300, 3)) * 10.0, axis=0)
    shift = 0.37
    d1_err = abs(d1_mse(grid, grid + [shift, 0, 0]) - shift ** 2)
    xy = rng.uniform(-1, 1, (4000, 2))
    plane = np.column_stack([xy, np.zeros(len(xy))])
    d = 0.01
    along = d2(plane, plane + [d, 0, 0]).mse / d ** 2
    across = d2(plane, plane + [0, 0, d]).mse / d ** 2
    ok = report.record(8, "metric oracles",
                       exact == 5 and d1_err < 1e-9 and along < 0.05 and abs(across - 1) < 0.05,
                       f"{exact}/5 brute-force matches exact; D1 error {d1_err:.1e}; "
                       f"plane D2/d^2 in-plane {along:.4f}, normal {across:.4f}")
    assert ok


def test_9_determinism(tmp_path, report):
    seqs = sequences_from_clouds(corpus(4, seed=5, n_points=2000), 6)
    cfg = TrainConfig(lr=3e-3, batch_size=8, epochs=1, max_steps=20, seed=9)
    mc = ModelConfig(N=32, N0=16)
    a, _ = train(seqs, cfg, mc)
    b, _ = train(seqs, cfg, mc)
    same_training = a.to_bytes() == b.to_bytes()
    a.save(tmp_path / "m.bin")
    qc = quantize(corpus(1, seed=6, n_points=3000)[0], 7)
    streams = [encode(qc, ModelParams.load(tmp_path / "m.bin")).to_bytes() for _ in range(2)]
    loaded = ModelParams.load(tmp_path / "m.bin")
    rows = random_rows(np.random.default_rng(1), mc.N, mc.K)
    same_engine = np.array_equal(InferenceEngine(a, mc.N).window_probs(rows, mc.N),
                                 InferenceEngine(loaded, mc.N).window_probs(rows, mc.N))
    same_forward = np.array_equal(forward(a, rows[None]), forward(loaded, rows[None]))
    ok = report.record(9, "determinism",
                       same_training and streams[0] == streams[1] and same_engine and same_forward,
                       f"seeded training identical: {same_training}; encodes byte-identical: "
                       f"{streams[0] == streams[1]} ({len(streams[0])} bytes); save/load "
                       f"bit-exact: {same_engine and same_forward}")
    assert ok
