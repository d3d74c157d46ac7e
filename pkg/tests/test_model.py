import math

import numpy as np
import pytest

from octree_codec.context import pad_row
from octree_codec.model.infer import CDF_TOTAL, InferenceEngine, quantize_dist, quantize_dists
from octree_codec.model.network import (attention_scores, distributions, forward,
                                        loss_and_grad)
from octree_codec.model.params import ModelConfig, ModelFileError, ModelParams, param_shapes
from octree_codec.model.train import (TrainConfig, WindowDataset, bits_per_node, grad_check,
                                      sequences_from_clouds, train)
from octree_codec.synthetic import corpus

TINY = ModelConfig(d_occ=8, d_lvl=3, d_oct=2, K=3, head_dim=4, mlp_hidden=10, out_hidden=12,
                   N=12, N0=12)


def random_rows(rng, B, N, K, level_max=16):
    return np.stack([rng.integers(0, 256, (B, N, K)), rng.integers(0, level_max + 1, (B, N, K)),
                     rng.integers(0, 9, (B, N, K))], -1)


def test_param_shapes_and_sizes():
    cfg = ModelConfig()
    shapes = dict(param_shapes(cfg))
    assert shapes["emb_occ"] == (256, 32)
    assert shapes["emb_lvl"] == (17, 6)
    assert shapes["emb_oct"] == (9, 4)
    assert cfg.d_model == 4 * 42 and cfg.heads == 4
    p = ModelParams.init(cfg)
    assert p.size == sum(int(np.prod(s)) for s in shapes.values())
    for name, t in p.tensors.items():
        assert t.dtype == np.float32


def test_out_of_range_indices_raise():
    p = ModelParams.init(TINY)
    rows = np.zeros((1, 4, 3, 3), dtype=np.int64)
    for slot, bad in ((0, 256), (1, 17), (2, 9), (0, -1)):
        r = rows.copy()
        r[0, 1, 0, slot] = bad
        with pytest.raises(IndexError):
            forward(p, r)


def test_distributions_normalized():
    rng = np.random.default_rng(0)
    p = ModelParams.init(TINY, seed=3)
    d = distributions(p, random_rows(rng, 2, 12, 3))
    assert d.shape == (2, 12, 255)
    np.testing.assert_allclose(d.sum(-1), 1.0, rtol=1e-5)


def test_uniform_output_loss_oracle():
    # zeroed output layer gives uniform logits: loss per target = ln 255
    rng = np.random.default_rng(1)
    p = ModelParams.init(TINY, seed=0, dtype=np.float64)
    p.tensors["out.w2"][:] = 0
    p.tensors["out.b2"][:] = 0
    rows = random_rows(rng, 3, 12, 3)
    mask = rng.random((3, 12)) < 0.6
    targets = rng.integers(1, 256, (3, 12))
    loss, _ = loss_and_grad(p, rows, targets, mask, need_grad=False)
    assert loss == pytest.approx(mask.sum() * math.log(255), rel=1e-12)


def test_attention_rows_are_causal_distributions():
    rng = np.random.default_rng(2)
    p = ModelParams.init(TINY, seed=1, dtype=np.float64)
    A = attention_scores(p, random_rows(rng, 1, 12, 3)[0], layer=1)
    assert A.shape == (3, 12, 12)
    np.testing.assert_allclose(A.sum(-1), 1.0, rtol=1e-12)
    assert np.all(np.triu(A, 1) == 0)


def test_mask_causality_numpy_forward():
    rng = np.random.default_rng(4)
    p = ModelParams.init(TINY, seed=2, dtype=np.float64)
    rows = random_rows(rng, 1, 12, 3)
    base = forward(p, rows)
    for _ in range(30):
        m = int(rng.integers(0, 11))
        pert = rows.copy()
        pert[0, m + 1:] = random_rows(rng, 1, 11 - m, 3)[0]
        out = forward(p, pert)
        assert np.array_equal(out[0, :m + 1], base[0, :m + 1])


def test_engine_matches_float64_forward():
    rng = np.random.default_rng(5)
    p = ModelParams.init(TINY, seed=4)
    rows = random_rows(rng, 1, 12, 3)[0]
    ref = distributions(p.astype(np.float64), rows)
    eng = InferenceEngine(p, 12)
    got = eng.window_probs(rows, 12)
    np.testing.assert_allclose(got, ref, atol=2e-6, rtol=1e-4)


def test_engine_incremental_equals_batched():
    rng = np.random.default_rng(6)
    p = ModelParams.init(TINY, seed=5)
    rows = random_rows(rng, 1, 12, 3)[0]
    batched = InferenceEngine(p, 12).window_probs(rows, 8)
    eng = InferenceEngine(p, 12)
    eng.reset(np.broadcast_to(pad_row(3), (12, 3, 3)))
    for r in range(4):
        eng.set_row(r, rows[r])
    eng.run(4, 4)
    serial = []
    for r in range(4, 12):
        eng.set_row(r, rows[r])
        serial.append(eng.run(r + 1, r)[0].copy())
    assert np.array_equal(np.array(serial), batched)
    with pytest.raises(ValueError):
        eng.set_row(0, rows[0])


def test_grad_check_double_precision():
    rng = np.random.default_rng(7)
    p = ModelParams.init(TINY, seed=6, dtype=np.float64)
    rows = random_rows(rng, 2, 12, 3)
    mask = np.zeros((2, 12), bool)
    mask[:, 4:] = True
    targets = rng.integers(1, 256, (2, 12))
    worst, samples = grad_check(p, rows, targets, mask, n_params=80, seed=1)
    assert len(samples) == 80
    assert worst < 1e-4


def test_save_load_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    p = ModelParams.init(TINY, seed=9)
    path = tmp_path / "m.bin"
    p.save(path)
    q = ModelParams.load(path)
    assert q.config == p.config
    for n in p.names():
        assert np.array_equal(p[n], q[n])
    rows = random_rows(rng, 1, 12, 3)[0]
    assert np.array_equal(InferenceEngine(p, 12).window_probs(rows, 12),
                          InferenceEngine(q, 12).window_probs(rows, 12))
    assert p.content_hash() == q.content_hash()
    q.tensors["out.b2"][0] += 1
    assert q.content_hash() != p.content_hash()


def test_model_file_errors(tmp_path):
    data = ModelParams.init(TINY).to_bytes()
    with pytest.raises(ModelFileError):
        ModelParams.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ModelFileError):
        ModelParams.from_bytes(data[:-3])
    with pytest.raises(ModelFileError):
        ModelParams.from_bytes(data + b"\0")


def test_quantize_dist_invariants():
    rng = np.random.default_rng(9)
    for p in [np.full(255, 1 / 255), rng.dirichlet(np.ones(255)),
              np.eye(255)[17], rng.dirichlet(np.full(255, 0.01))]:
        cdf = quantize_dist(p)
        freq = np.diff(cdf)
        assert cdf[0] == 0 and cdf[-1] == CDF_TOTAL
        assert freq.min() >= 1
    one_hot = np.diff(quantize_dist(np.eye(255)[17]))
    assert one_hot[17] == CDF_TOTAL - 254


def kl_bits(p, cdf):
    q = np.diff(cdf) / CDF_TOTAL
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / q[nz])))


def test_quantize_dist_kl_dense_distributions():
    rng = np.random.default_rng(10)
    P = rng.dirichlet(np.ones(255), size=200).astype(np.float32)
    C = quantize_dists(P)
    kls = [kl_bits(P[i].astype(np.float64) / P[i].sum(dtype=np.float64), C[i])
           for i in range(len(P))]
    assert max(kls) < 1e-3


def test_quantize_dist_kl_floor_bound():
    # the frequency floor of 1 costs at most -log2(1 - 254 / 2^16) bits
    bound = -math.log2(1 - 254 / CDF_TOTAL)
    rng = np.random.default_rng(11)
    for alpha in (1e-3, 1e-2, 0.1):
        P = rng.dirichlet(np.full(255, alpha), size=50)
        for p in P:
            assert kl_bits(p, quantize_dist(p)) <= bound + 1e-6


def test_quantize_dist_rejects_bad_shape():
    with pytest.raises(ValueError):
        quantize_dist(np.ones(10) / 10)


@pytest.fixture(scope="module")
def tiny_data():
    seqs = sequences_from_clouds(corpus(3, seed=5, n_points=3000), 5)
    return WindowDataset(seqs, 12, 3, 12)


def test_training_reduces_loss_and_is_deterministic(tiny_data):
    cfg = TrainConfig(lr=3e-3, batch_size=8, epochs=3, seed=2)
    before = bits_per_node(ModelParams.init(TINY, seed=2), tiny_data)
    p1, hist = train(tiny_data, cfg, TINY)
    p2, _ = train(tiny_data, cfg, TINY)
    after = bits_per_node(p1, tiny_data)
    assert after < before - 0.5
    assert len(hist) == 3
    for n in p1.names():
        assert np.array_equal(p1[n], p2[n])


def test_training_step_and_lr_schedule(tiny_data):
    p, hist = train(tiny_data, TrainConfig(max_steps=5, lr_floor=0.1, batch_size=4), TINY)
    assert hist[-1]["steps"] == 5
    with pytest.raises(ValueError):
        train([], TrainConfig(), TINY)
