"""Geometry distortion metrics: D1/D2 PSNR, chamfer distance, bpp.

PSNR follows the MPEG pc_error convention ``10 log10(3 r^2 / MSE)`` with a
caller-supplied peak ``r``.  The symmetric MSE is the larger of the two
directional MSEs unless ``symmetric="mean"`` is requested.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud


def _pts(pc) -> np.ndarray:
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("expected a non-empty (n, 3) point set")
    return pts


def nearest(query: np.ndarray, ref: np.ndarray):
    """Index of each query point's nearest reference point and the squared distance.

    Squared distances are recomputed from coordinates as ``dx^2 + dy^2 + dz^2``
    (left to right) so they are the same numbers a brute-force search produces.
    """
    _, idx = cKDTree(ref).query(query, k=1)
    return idx, _sqdist(query, ref[idx])


def _sqdist(a, b):
    d = a - b
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def _mean(x: np.ndarray) -> float:
    # np.add.reduce uses pairwise summation
    return float(np.add.reduce(x) / len(x)) if len(x) else 0.0


def psnr(mse: float, peak: float) -> float:
    """``10 log10(3 peak^2 / mse)``; ``inf`` for a perfect match."""
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def d1_mse(ref, rec, symmetric: str = "max") -> float:
    a, b = _pts(ref), _pts(rec)
    e_ab = _mean(nearest(a, b)[1])
    e_ba = _mean(nearest(b, a)[1])
    return _combine(e_ab, e_ba, symmetric)


def _combine(x, y, symmetric):
    if symmetric == "max":
        return max(x, y)
    if symmetric == "mean":
        return (x + y) / 2
    raise ValueError(f"symmetric must be 'max' or 'mean', got {symmetric!r}")


def d1_psnr(ref, rec, peak: float = 1.0, symmetric: str = "max") -> float:
    return psnr(d1_mse(ref, rec, symmetric), peak)


def chamfer(ref, rec) -> float:
    a, b = _pts(ref), _pts(rec)
    return _mean(nearest(a, b)[1]) + _mean(nearest(b, a)[1])


def estimate_normals(points, k: int = 16, rank_tol: float = 1e-10):
    """PCA normals from the ``k`` nearest neighbours (the point included).

    Returns ``(normals, degenerate)``; a neighbourhood whose covariance has
    rank < 2 has no defined plane and gets a zero normal with the flag set.
    """
    pts = _pts(points)
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    idx = np.asarray(idx).reshape(len(pts), k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    scale = np.maximum(w[:, 2], np.finfo(float).tiny)
    degenerate = w[:, 1] <= rank_tol * scale
    normals[degenerate] = 0.0
    return normals, degenerate


@dataclass
class D2Result:
    mse: float
    psnr: float
    degenerate: int


def d2(ref, rec, peak: float = 1.0, k: int = 16, symmetric: str = "max",
       normals=None) -> D2Result:
    """Point-to-plane error against the reference cloud's normals.

    Both directions project the nearest-neighbour residual onto the normal of
    the reference point involved.  Points with a degenerate normal fall back
    to the full squared residual; their count is reported.
    """
    a, b = _pts(ref), _pts(rec)
    if len(a) < k + 1:
        raise ValueError(f"reference needs at least k+1={k + 1} points for normals")
    if normals is None:
        normals, degenerate = estimate_normals(a, k)
    else:
        normals = np.asarray(normals, dtype=np.float64)
        degenerate = ~np.any(normals != 0, axis=1)

    def plane_err(residual, n, deg):
        proj = np.einsum("ij,ij->i", residual, n) ** 2
        return np.where(deg, np.einsum("ij,ij->i", residual, residual), proj)

    i_ab, _ = nearest(a, b)
    r_ab = b[i_ab] - a
    e_ab = _mean(plane_err(r_ab, normals, degenerate))
    i_ba, _ = nearest(b, a)
    r_ba = b - a[i_ba]
    e_ba = _mean(plane_err(r_ba, normals[i_ba], degenerate[i_ba]))
    mse = _combine(e_ab, e_ba, symmetric)
    n_deg = int(degenerate.sum() + degenerate[i_ba].sum())
    return D2Result(mse, psnr(mse, peak), n_deg)


def d2_psnr(ref, rec, peak: float = 1.0, k: int = 16, symmetric: str = "max") -> float:
    return d2(ref, rec, peak, k, symmetric).psnr


def bpp(payload_bits: int, n_points: int) -> float:
    if n_points <= 0:
        raise ValueError("bpp needs a non-empty input cloud")
    return payload_bits / n_points


@dataclass
class RDPoint:
    file: str
    depth: int
    bpp: float
    d1_psnr: float
    d2_psnr: float
    chamfer: float
    d1_mse: float
    d2_mse: float
    points: int
    payload_bits: int
    degenerate_normals: int = 0


def rd_point(ref, rec, payload_bits: int, depth: int, peak: float = 1.0, k: int = 16,
             name: str = "") -> RDPoint:
    ref_pts = _pts(ref)
    m1 = d1_mse(ref, rec)
    r2 = d2(ref, rec, peak, k)
    return RDPoint(name, int(depth), bpp(payload_bits, len(ref_pts)), psnr(m1, peak), r2.psnr,
                   chamfer(ref, rec), m1, r2.mse, len(ref_pts), int(payload_bits), r2.degenerate)


def write_rd_csv(path_or_file, points) -> None:
    cols = [f.name for f in fields(RDPoint)]
    own = isinstance(path_or_file, str)
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for p in points:
            w.writerow(asdict(p))
    finally:
        if own:
            f.close()
