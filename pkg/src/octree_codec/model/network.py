"""Batched forward and reverse-mode backward pass of the context model.

Shapes: ``B`` windows of ``N`` rows, ``K`` slots per row, slot width
``ds = d_occ + d_lvl + d_oct``, model width ``D = K * ds``.

Each of the two attention layers is pre-norm::

    Y = LN(X)
    head t reads chunk t of Y (the ancestor-t slot at layer 0)
    C_t = softmax_causal(Q_t K_t^T) V_t
    X <- X + W2 relu(W1 [C_0 .. C_{K-1}] + b1) + b2

and the head is ``softmax(W2' relu(W1' LN(X) + b1') + b2')`` over the 255
occupancy symbols.  Row ``m`` attends to rows ``n <= m`` only.
"""
from __future__ import annotations

import numpy as np

from .params import N_OCC, N_OCTANT, N_SYMBOLS, ModelParams

LN_EPS = 1e-5


def check_indices(rows: np.ndarray, level_max: int) -> None:
    """Out-of-range feature indices are an error, never clamped."""
    occ, lvl, octn = rows[..., 0], rows[..., 1], rows[..., 2]
    if occ.min() < 0 or occ.max() >= N_OCC:
        raise IndexError(f"occupancy index outside [0, {N_OCC - 1}]")
    if lvl.min() < 0 or lvl.max() > level_max:
        raise IndexError(f"level index outside [0, {level_max}]")
    if octn.min() < 0 or octn.max() >= N_OCTANT:
        raise IndexError(f"octant index outside [0, {N_OCTANT - 1}]")


def embed(params: ModelParams, rows: np.ndarray) -> np.ndarray:
    """Per-slot embeddings ``(..., K, ds)`` for integer rows ``(..., K, 3)``."""
    rows = np.asarray(rows)
    check_indices(rows, params.config.level_max)
    return np.concatenate([
        params["emb_occ"][rows[..., 0]],
        params["emb_lvl"][rows[..., 1]],
        params["emb_oct"][rows[..., 2]],
    ], axis=-1)


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(red), dy.sum(red)


def _causal_mask(N):
    return np.tril(np.ones((N, N), dtype=bool))


def _head_proj(Yk, w, b=None):
    # Yk: (K, B*N, ds) slot-major; returns (K, B*N, dh)
    T = Yk @ w
    return T if b is None else T + b[:, None, :]


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _attn_layer(params, l, X, mask):
    cfg = params.config
    p = f"layer{l}."
    B, N, D = X.shape
    K, ds = cfg.K, cfg.d_slot
    Y, ln_cache = _layer_norm(X, params[p + "ln_g"], params[p + "ln_b"])
    # slot-major layout so each head's projection is one matmul
    Yk = np.ascontiguousarray(Y.reshape(B * N, K, ds).transpose(1, 0, 2))

    def proj(name):
        T = _head_proj(Yk, params[p + "w" + name], params.tensors.get(p + "b" + name))
        return T.reshape(K, B, N, -1).transpose(1, 0, 2, 3)

    Q, Kt, V = proj("q"), proj("k"), proj("v")
    S = Q @ Kt.transpose(0, 1, 3, 2)
    S = np.where(mask, S, -np.inf)
    S = S - S.max(-1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(-1, keepdims=True)
    Cc = A @ V
    Cm = Cc.transpose(0, 2, 1, 3).reshape(B, N, -1)
    Hpre = Cm @ params[p + "w1"] + params[p + "b1"]
    H = np.maximum(Hpre, 0)
    Z = H @ params[p + "w2"] + params[p + "b2"]
    cache = (ln_cache, Yk, Q, Kt, V, A, Cm, Hpre, H)
    return X + Z, cache, A


def _attn_layer_back(params, l, dXout, cache, grads):
    cfg = params.config
    p = f"layer{l}."
    ln_cache, Yk, Q, Kt, V, A, Cm, Hpre, H = cache
    B, N = Cm.shape[:2]
    K, _, ds = Yk.shape
    dh = cfg.head_dim
    dZ = dXout
    grads[p + "w2"] += _flat(H).T @ _flat(dZ)
    grads[p + "b2"] += dZ.sum((0, 1))
    dH = dZ @ params[p + "w2"].T
    dHpre = dH * (Hpre > 0)
    grads[p + "w1"] += _flat(Cm).T @ _flat(dHpre)
    grads[p + "b1"] += dHpre.sum((0, 1))
    dCm = dHpre @ params[p + "w1"].T
    dCc = dCm.reshape(B, N, K, dh).transpose(0, 2, 1, 3)
    dA = dCc @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dCc
    dS = A * (dA - (dA * A).sum(-1, keepdims=True))
    dQ = dS @ Kt
    dK = dS.transpose(0, 1, 3, 2) @ Q
    dYk = np.zeros_like(Yk)
    YkT = Yk.transpose(0, 2, 1)
    for name, dT in (("q", dQ), ("k", dK), ("v", dV)):
        dTk = dT.transpose(1, 0, 2, 3).reshape(K, B * N, dh)
        grads[p + "w" + name] += YkT @ dTk
        if p + "b" + name in grads:
            grads[p + "b" + name] += dTk.sum(1)
        dYk += dTk @ params[p + "w" + name].transpose(0, 2, 1)
    dY = dYk.transpose(1, 0, 2).reshape(B, N, K * ds)
    dX, dg, db = _layer_norm_back(dY, params[p + "ln_g"], ln_cache)
    grads[p + "ln_g"] += dg
    grads[p + "ln_b"] += db
    return dXout + dX


def forward(params: ModelParams, rows: np.ndarray, return_cache: bool = False):
    """Logits ``(B, N, 255)`` for every row of every window in ``rows``."""
    rows = np.asarray(rows)
    if rows.ndim == 3:
        rows = rows[None]
    B, N, K, _ = rows.shape
    if K != params.config.K:
        raise ValueError(f"rows have {K} slots, model expects {params.config.K}")
    E = embed(params, rows)
    X = E.reshape(B, N, -1)
    mask = _causal_mask(N)
    caches, attn = [], []
    for l in range(params.config.layers):
        X, c, A = _attn_layer(params, l, X, mask)
        caches.append(c)
        attn.append(A)
    Yf, lnf = _layer_norm(X, params["out.ln_g"], params["out.ln_b"])
    Hpre = Yf @ params["out.w1"] + params["out.b1"]
    H = np.maximum(Hpre, 0)
    logits = H @ params["out.w2"] + params["out.b2"]
    if not return_cache:
        return logits
    return logits, dict(rows=rows, caches=caches, attn=attn, lnf=lnf, Yf=Yf, Hpre=Hpre, H=H)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def attention_scores(params: ModelParams, rows: np.ndarray, layer: int = 0) -> np.ndarray:
    """Masked attention maps ``(K, N, N)`` of one window at ``layer``."""
    _, cache = forward(params, rows, return_cache=True)
    return cache["attn"][layer][0]


def loss_and_grad(params: ModelParams, rows, targets, target_mask, need_grad: bool = True):
    """Summed cross-entropy (nats) over masked rows, and its gradients.

    ``targets`` holds occupancies 1..255 where ``target_mask`` is set.
    """
    rows = np.asarray(rows)
    targets = np.asarray(targets)
    target_mask = np.asarray(target_mask, dtype=bool)
    if rows.ndim == 3:
        rows, targets, target_mask = rows[None], targets[None], target_mask[None]
    if np.any(targets[target_mask] < 1) or np.any(targets[target_mask] > N_SYMBOLS):
        raise ValueError("target occupancies must be in [1, 255]")
    logits, cache = forward(params, rows, return_cache=True)
    logp = log_softmax(logits)
    sym = np.where(target_mask, targets - 1, 0)
    picked = np.take_along_axis(logp, sym[..., None], -1)[..., 0]
    loss = -float((picked * target_mask).sum())
    if not need_grad:
        return loss, None

    cfg = params.config
    grads = {n: np.zeros_like(t) for n, t in params.tensors.items()}
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, sym[..., None],
                      np.take_along_axis(dlogits, sym[..., None], -1) - 1.0, -1)
    dlogits *= target_mask[..., None]
    dlogits = dlogits.astype(logits.dtype)

    H, Hpre, Yf = cache["H"], cache["Hpre"], cache["Yf"]
    grads["out.w2"] += _flat(H).T @ _flat(dlogits)
    grads["out.b2"] += dlogits.sum((0, 1))
    dHpre = (dlogits @ params["out.w2"].T) * (Hpre > 0)
    grads["out.w1"] += _flat(Yf).T @ _flat(dHpre)
    grads["out.b1"] += dHpre.sum((0, 1))
    dYf = dHpre @ params["out.w1"].T
    dX, dg, db = _layer_norm_back(dYf, params["out.ln_g"], cache["lnf"])
    grads["out.ln_g"] += dg
    grads["out.ln_b"] += db
    for l in reversed(range(cfg.layers)):
        dX = _attn_layer_back(params, l, dX, cache["caches"][l], grads)

    B, N = rows.shape[:2]
    dE = dX.reshape(B, N, cfg.K, cfg.d_slot)
    a, b = cfg.d_occ, cfg.d_occ + cfg.d_lvl
    np.add.at(grads["emb_occ"], rows[..., 0], dE[..., :a])
    np.add.at(grads["emb_lvl"], rows[..., 1], dE[..., a:b])
    np.add.at(grads["emb_oct"], rows[..., 2], dE[..., b:])
    return loss, grads


def distributions(params: ModelParams, rows: np.ndarray) -> np.ndarray:
    """Probabilities over symbols 1..255 for each row; shape ``(..., N, 255)``."""
    rows = np.asarray(rows)
    squeeze = rows.ndim == 3
    p = softmax(forward(params, rows))
    return p[0] if squeeze else p
