"""Synthetic point clouds: planar patches, spheres and LiDAR-like ring scans."""
from __future__ import annotations

import numpy as np

from .geometry import PointCloud

KINDS = ("planes", "spheres", "rings")


def _random_frame(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q


def planes(rng, n_points=4000, n_planes=None):
    """A few randomly oriented rectangular patches."""
    n_planes = n_planes or int(rng.integers(1, 4))
    per = np.full(n_planes, n_points // n_planes)
    per[: n_points - per.sum()] += 1
    out = []
    for k in per:
        frame = _random_frame(rng)
        size = rng.uniform(0.4, 1.0, size=2)
        uv = rng.uniform(-0.5, 0.5, size=(k, 2)) * size
        center = rng.uniform(-0.3, 0.3, size=3)
        out.append(center + uv[:, :1] * frame[0] + uv[:, 1:] * frame[1])
    return np.concatenate(out)


def spheres(rng, n_points=4000, n_spheres=None):
    n_spheres = n_spheres or int(rng.integers(1, 3))
    per = np.full(n_spheres, n_points // n_spheres)
    per[: n_points - per.sum()] += 1
    out = []
    for k in per:
        d = rng.normal(size=(k, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        out.append(rng.uniform(-0.3, 0.3, size=3) + rng.uniform(0.2, 0.5) * d)
    return np.concatenate(out)


def rings(rng, n_points=4000, beams=None):
    """Spinning-LiDAR scan of a ground plane, a few walls and a distant boundary.

    Each beam has a fixed elevation; hits on flat ground form concentric rings.
    """
    beams = beams or int(rng.integers(16, 33))
    height = rng.uniform(1.5, 2.0)
    elev = np.deg2rad(np.linspace(rng.uniform(-26, -20), rng.uniform(1, 4), beams))
    n_az = max(8, n_points // beams)
    az = np.linspace(0, 2 * np.pi, n_az, endpoint=False) + rng.uniform(0, 2 * np.pi / n_az)
    E, A = np.meshgrid(elev, az, indexing="ij")
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)

    t = np.full(len(d), np.inf)
    down = d[:, 2] < 0
    t[down] = height / -d[down, 2]
    boundary = rng.uniform(25, 40)
    horiz = np.linalg.norm(d[:, :2], axis=1)
    t = np.minimum(t, boundary / np.maximum(horiz, 1e-9))
    for _ in range(int(rng.integers(1, 4))):
        normal = np.array([*rng.normal(size=2), 0.0])
        normal /= np.linalg.norm(normal)
        dist = rng.uniform(5, 20)
        denom = d @ normal
        hit = denom > 1e-6
        tw = np.where(hit, dist / np.where(hit, denom, 1), np.inf)
        top = d[:, 2] * tw + height
        tw[top > rng.uniform(3, 8)] = np.inf
        t = np.minimum(t, tw)
    pts = d * t[:, None]
    pts[:, 2] += height
    pts += rng.normal(scale=0.01, size=pts.shape)
    return pts


_GENERATORS = {"planes": planes, "spheres": spheres, "rings": rings}


def make_cloud(kind: str, rng, n_points: int = 4000) -> PointCloud:
    if kind == "mixed":
        kind = KINDS[int(rng.integers(len(KINDS)))]
    return PointCloud(_GENERATORS[kind](rng, n_points))


def corpus(count: int, seed: int = 0, kinds=KINDS, n_points: int = 4000) -> list[PointCloud]:
    """``count`` clouds cycling through ``kinds``."""
    rng = np.random.default_rng(seed)
    return [make_cloud(kinds[i % len(kinds)], rng, n_points) for i in range(count)]


def random_cloud(rng, max_points: int = 10_000) -> PointCloud:
    """Cloud of random kind and size, including unstructured uniform noise."""
    n = int(np.exp(rng.uniform(np.log(2), np.log(max_points))))
    kind = ("uniform",) + KINDS
    k = kind[int(rng.integers(len(kind)))]
    if k == "uniform":
        return PointCloud(rng.uniform(-1, 1, size=(n, 3)) * rng.uniform(0.1, 100))
    return make_cloud(k, rng, n)
