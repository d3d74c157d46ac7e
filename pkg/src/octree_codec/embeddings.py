"""Export learned node features reduced to three principal components."""
from __future__ import annotations

import csv

import numpy as np

from .context import feature_table, previous_occupancy
from .model.network import embed
from .model.params import ModelParams
from .octree import NodeSequence, cell_centers


def node_features(params: ModelParams, ns: NodeSequence, as_target: bool = False) -> np.ndarray:
    """Concatenated slot embeddings of every node, shape ``(n, K * d_slot)``.

    By default the node's own slot carries its true occupancy.  With
    ``as_target`` it carries the predecessor's occupancy, exactly what the
    model sees when the node is being coded.
    """
    rows = feature_table(ns, params.config.K)
    if as_target:
        rows = rows.copy()
        rows[:, 0, 0] = previous_occupancy(ns)
    return embed(params, rows).reshape(len(ns), -1).astype(np.float64)


def _fix_signs(vt: np.ndarray) -> np.ndarray:
    # make the largest-magnitude entry of every axis positive
    idx = np.argmax(np.abs(vt), axis=1)
    s = np.sign(vt[np.arange(len(vt)), idx])
    s[s == 0] = 1
    return vt * s[:, None]


def pca_project(X, n_components: int = 3, tol: float = 1e-12):
    """Project rows of ``X`` onto its leading principal axes via SVD.

    Returns ``(proj, axes, variances)``.  Axes whose variance is zero (up to
    ``tol`` relative to the total) give all-zero projections.  Axis signs are
    fixed so the results are reproducible.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    m = min(n_components, len(s))
    var = s[:m] ** 2 / max(n - 1, 1)
    axes = np.zeros((n_components, d))
    axes[:m] = _fix_signs(vt[:m])
    total = float((s ** 2).sum())
    live = var > tol * max(total, np.finfo(float).tiny) if total > 0 else np.zeros(m, bool)
    axes[:m][~live] = 0.0
    variances = np.zeros(n_components)
    variances[:m] = np.where(live, var, 0.0)
    return Xc @ axes.T, axes, variances


def export_embeddings(params: ModelParams, ns: NodeSequence, path_or_file, qs: float = 1.0,
                      offset=(0.0, 0.0, 0.0), as_target: bool = False) -> np.ndarray:
    """Write one CSV row per node: index, level, occupancy, cell center, pc1..pc3.

    Cell centers are in world units (``offset + center * qs``).  Returns the
    projections.
    """
    proj, _, _ = pca_project(node_features(params, ns, as_target))
    centers = np.asarray(offset, dtype=np.float64) + cell_centers(ns) * qs
    own = isinstance(path_or_file, str)
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f)
        w.writerow(["node", "level", "occupancy", "x", "y", "z", "pc1", "pc2", "pc3"])
        for i in range(len(ns)):
            w.writerow([i, int(ns.level[i]), int(ns.occupancy[i]),
                        *(repr(float(v)) for v in centers[i]),
                        *(repr(float(v)) for v in proj[i])])
    finally:
        if own:
            f.close()
    return proj
