"""Training (Adam on summed cross-entropy) and gradient checking."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from ..context import feature_table, previous_occupancy, window_rows, window_spans
from .network import loss_and_grad
from .params import ModelConfig, ModelParams

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_seconds: float | None = None
    max_steps: int | None = None
    dtype: str = "float32"
    # cosine decay to lr * lr_floor over max_steps (ignored without max_steps)
    lr_floor: float = 1.0


class WindowDataset:
    """All context windows of a collection of node sequences."""

    def __init__(self, sequences, N: int, K: int, N0: int):
        if not 1 <= N0 <= N:
            raise ValueError(f"need 1 <= N0 <= N, got N={N}, N0={N0}")
        self.N, self.K, self.N0 = N, K, N0
        self.tables, self.prevs, self.occs = [], [], []
        index = []
        for i, ns in enumerate(sequences):
            self.tables.append(feature_table(ns, K))
            self.prevs.append(previous_occupancy(ns))
            self.occs.append(np.asarray(ns.occupancy))
            index += [(i, t0, t1) for t0, t1 in window_spans(len(ns), N0)]
        self.index = np.array(index, dtype=np.int64).reshape(-1, 3)
        self.node_count = int(sum(len(o) for o in self.occs))

    def __len__(self):
        return len(self.index)

    def batch(self, ids):
        B, N = len(ids), self.N
        rows = np.empty((B, N, self.K, 3), dtype=np.int64)
        targets = np.zeros((B, N), dtype=np.int64)
        mask = np.zeros((B, N), dtype=bool)
        for b, w in enumerate(ids):
            i, t0, t1 = self.index[w]
            rows[b], _ = window_rows(self.tables[i], self.prevs[i], t0, t1, N)
            nt = t1 - t0
            targets[b, N - nt:] = self.occs[i][t0:t1]
            mask[b, N - nt:] = True
        return rows, targets, mask


class Adam:
    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(t) for n, t in params.tensors.items()}
        self.v = {n: np.zeros_like(t) for n, t in params.tensors.items()}
        self.t = 0

    def step(self, params: ModelParams, grads) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for n, g in grads.items():
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params.tensors[n] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(
                params.tensors[n].dtype)


def bits_per_node(params: ModelParams, data: WindowDataset, batch_size: int = 64) -> float:
    total = 0.0
    for s in range(0, len(data), batch_size):
        rows, targets, mask = data.batch(np.arange(s, min(s + batch_size, len(data))))
        loss, _ = loss_and_grad(params, rows, targets, mask, need_grad=False)
        total += loss
    return total / (data.node_count * math.log(2))


def train(dataset, config: TrainConfig | None = None, model_config: ModelConfig | None = None,
          validation=None, init: ModelParams | None = None, callback=None):
    """Fit a model to ``dataset`` (node sequences or a prepared WindowDataset).

    Returns ``(params, history)``; ``history`` holds one dict per epoch with
    train and validation bits per node.  Stops early when ``max_seconds`` or
    ``max_steps`` is reached.  Deterministic for a given seed.
    """
    config = config or TrainConfig()
    model_config = model_config or (init.config if init else ModelConfig())
    mc = model_config
    if not isinstance(dataset, WindowDataset):
        dataset = list(dataset)
        if not dataset:
            raise ValueError("training set is empty")
        dataset = WindowDataset(dataset, mc.N, mc.K, mc.N0)
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if validation is not None and not isinstance(validation, WindowDataset):
        validation = WindowDataset(list(validation), dataset.N, dataset.K, dataset.N0)

    dtype = np.dtype(config.dtype)
    params = (init or ModelParams.init(mc, seed=config.seed)).astype(dtype)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    history = []
    step = 0
    stop = False
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        ep_loss, ep_nodes = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            rows, targets, mask = dataset.batch(order[s:s + config.batch_size])
            loss, grads = loss_and_grad(params, rows, targets, mask)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step} (lr={config.lr})")
            nodes = int(mask.sum())
            # optimize the per-node mean so the step size is batch-size independent
            for g in grads.values():
                g /= nodes
            if config.max_steps and config.lr_floor < 1.0:
                frac = min(step / config.max_steps, 1.0)
                scale = config.lr_floor + (1 - config.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac))
                opt.lr = config.lr * scale
            opt.step(params, grads)
            ep_loss += loss
            ep_nodes += nodes
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
            if config.max_seconds is not None and time.perf_counter() - start > config.max_seconds:
                stop = True
            if stop:
                break
        rec = {"epoch": epoch, "steps": step,
               "train_bpn": ep_loss / max(ep_nodes, 1) / math.log(2),
               "seconds": time.perf_counter() - start}
        if validation is not None:
            rec["val_bpn"] = bits_per_node(params, validation)
        history.append(rec)
        log.info("epoch %d: %s", epoch, rec)
        if callback is not None:
            callback(rec)
        if stop:
            break
    return params.astype(np.float32), history


def grad_check(params: ModelParams, rows, targets, mask, n_params: int = 64,
               step: float = 1e-5, seed: int = 0, floor: float = 1e-8):
    """Largest relative error between analytic and central-difference gradients.

    Parameters are drawn at random from all tensors.  The relative error of a
    pair ``(a, f)`` is ``|a - f| / max(|a|, |f|, floor)`` (0 when both are 0).
    """
    params = params.astype(np.float64)
    _, grads = loss_and_grad(params, rows, targets, mask)
    rng = np.random.default_rng(seed)
    names = params.names()
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    worst = 0.0
    samples = []
    for _ in range(n_params):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        t = params.tensors[name]
        idx = np.unravel_index(rng.integers(t.size), t.shape)
        old = t[idx]
        t[idx] = old + step
        lp, _ = loss_and_grad(params, rows, targets, mask, need_grad=False)
        t[idx] = old - step
        lm, _ = loss_and_grad(params, rows, targets, mask, need_grad=False)
        t[idx] = old
        fd = (lp - lm) / (2 * step)
        a = float(grads[name][idx])
        err = 0.0 if a == 0 and fd == 0 else abs(a - fd) / max(abs(a), abs(fd), floor)
        samples.append((name, idx, a, fd, err))
        worst = max(worst, err)
    return worst, samples


def sequences_from_clouds(clouds, depth: int):
    from ..geometry import quantize
    from ..octree import build

    return [build(quantize(pc, depth)) for pc in clouds]


def dataset_bits_baseline(sequences) -> float:
    """Adaptive order-0 bits per node, counts reset for every sequence."""
    from ..coder.baseline import adaptive_code_length

    bits = sum(adaptive_code_length(np.asarray(ns.occupancy) - 1) for ns in sequences)
    return bits / sum(len(ns) for ns in sequences)

