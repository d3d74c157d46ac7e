import io
import math

import numpy as np
import pytest

from octree_codec.geometry import PointCloud, dequantize, quantize
from octree_codec.metrics import (RDPoint, bpp, chamfer, d1_mse, d1_psnr, d2, estimate_normals,
                                  nearest, psnr, rd_point, write_rd_csv)


def brute_nn(q, r):
    """O(n^2) scan; first minimum wins."""
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


def brute_chamfer(a, b):
    return brute_nn(a, b)[1].mean() + brute_nn(b, a)[1].mean()


def plane(n, rng, size=1.0):
    xy = rng.uniform(-size, size, (n, 2))
    return np.column_stack([xy, np.zeros(n)])


@pytest.mark.parametrize("seed", range(5))
def test_nearest_matches_brute_force_exactly(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3))
    idx, d = nearest(a, b)
    bi, bd = brute_nn(a, b)
    assert np.array_equal(d, bd)
    # ties aside, the indices agree too
    assert np.array_equal(idx, bi)
    assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-15)
    assert chamfer(a, b) == chamfer(b, a)


def test_grid_clouds_with_ties_give_exact_distances():
    rng = np.random.default_rng(9)
    a = rng.integers(0, 6, (200, 3)).astype(float)
    b = rng.integers(0, 6, (200, 3)).astype(float)
    assert np.array_equal(nearest(a, b)[1], brute_nn(a, b)[1])


def test_chamfer_simple_cases():
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    x = np.random.default_rng(0).normal(size=(50, 3))
    assert chamfer(x, x) == 0.0


def test_d1_translation_closed_form():
    rng = np.random.default_rng(1)
    # points far apart relative to the shift, so the nearest neighbour is the shifted twin
    a = rng.integers(0, 20, (300, 3)) * 10.0
    a = np.unique(a, axis=0)
    d = 0.37
    b = a + [d, 0, 0]
    assert abs(d1_mse(a, b) - d * d) < 1e-9
    assert d1_psnr(a, b, peak=1.0) == pytest.approx(10 * math.log10(3 / (d * d)), abs=1e-6)


def test_psnr_definition_and_identity():
    assert psnr(0.5, 2.0) == pytest.approx(10 * math.log10(3 * 4 / 0.5))
    x = np.random.default_rng(0).normal(size=(40, 3))
    assert d1_psnr(x, x) == math.inf
    assert d2(x, x, k=8).psnr == math.inf


def test_d1_max_vs_mean():
    a = np.array([[0.0, 0, 0], [10, 0, 0]])
    b = np.array([[0.0, 0, 0]])
    assert d1_mse(a, b) == 50.0          # a->b: (0 + 100) / 2
    assert d1_mse(a, b, "mean") == 25.0  # b->a is 0
    with pytest.raises(ValueError):
        d1_mse(a, b, "median")


def test_d2_plane_cases():
    rng = np.random.default_rng(2)
    ref = plane(4000, rng)
    d = 0.01
    in_plane = d2(ref, ref + [d, 0, 0])
    assert in_plane.mse < 0.05 * d * d
    off_plane = d2(ref, ref + [0, 0, d])
    assert off_plane.mse == pytest.approx(d * d, rel=0.05)
    assert in_plane.degenerate == 0


def test_normals_of_plane_and_degenerate_line():
    rng = np.random.default_rng(3)
    n, deg = estimate_normals(plane(500, rng), k=16)
    assert not deg.any()
    np.testing.assert_allclose(np.abs(n[:, 2]), 1.0, atol=1e-12)
    line = np.column_stack([np.linspace(0, 1, 50), np.zeros(50), np.zeros(50)])
    n, deg = estimate_normals(line, k=8)
    assert deg.all()
    assert np.all(n == 0)


def test_d2_degenerate_falls_back_to_full_residual():
    line = np.column_stack([np.linspace(0, 1, 50), np.zeros(50), np.zeros(50)])
    res = d2(line, line + [0, 0.1, 0], k=8)
    assert res.degenerate == 100
    assert res.mse == pytest.approx(0.01, rel=1e-12)


def test_quantization_d1_bound():
    rng = np.random.default_rng(4)
    pc = PointCloud(rng.normal(size=(2000, 3)))
    for L in (4, 6, 8):
        qc = quantize(pc, L)
        assert d1_mse(pc, dequantize(qc)) <= 3 * (qc.qs / 2) ** 2


def test_bpp_and_rd_csv():
    assert bpp(800, 100) == 8.0
    with pytest.raises(ValueError):
        bpp(1, 0)
    rng = np.random.default_rng(5)
    ref = plane(200, rng)
    pt = rd_point(ref, ref + [0, 0, 0.01], payload_bits=1000, depth=7, name="x")
    assert isinstance(pt, RDPoint) and pt.bpp == 5.0 and pt.depth == 7
    buf = io.StringIO()
    write_rd_csv(buf, [pt, pt])
    lines = buf.getvalue().strip().splitlines()
    assert len(lines) == 3 and lines[0].startswith("file,depth,bpp")


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), [[0, 0, 0]])
