"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import numpy as np


def dense_matrices(model):
    """Scatter each junction's edge weights into a full ``(right, left)`` matrix."""
    mats = []
    for topo, w in zip(model.topologies, model.weights):
        W = np.zeros((topo.spec.right_size, topo.spec.left_size), dtype=np.float64)
        for (l, r), value in zip(topo.edges, w.tolist()):
            W[r, l] = value
        mats.append(W)
    return mats


def dense_forward(model, x):
    a = np.asarray(x, dtype=np.float64)
    mats = dense_matrices(model)
    pre = []
    for i, (W, b) in enumerate(zip(mats, model.biases)):
        z = a @ W.T + b.astype(np.float64)
        pre.append(z)
        a = np.maximum(z, 0) if i < len(mats) - 1 else z
    return a, pre


def dense_loss(model, x, y):
    logits, _ = dense_forward(model, x)
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def dense_loss_and_grad(model, x, y):
    """Textbook backprop on dense matrices; returns grads in edge order."""
    a0 = np.asarray(x, dtype=np.float64)
    mats = dense_matrices(model)
    acts = [a0]
    a = a0
    for i, (W, b) in enumerate(zip(mats, model.biases)):
        z = a @ W.T + b.astype(np.float64)
        a = np.maximum(z, 0) if i < len(mats) - 1 else z
        acts.append(a)
    logits = acts[-1]
    m = logits.max(axis=1, keepdims=True)
    p = np.exp(logits - m)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.log(p[np.arange(n), y]).mean())
    delta = p.copy()
    delta[np.arange(n), y] -= 1
    delta /= n
    gW, gb = [None] * len(mats), [None] * len(mats)
    for i in range(len(mats) - 1, -1, -1):
        gW[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ mats[i]) * (acts[i] > 0)
    edge_grads = [
        np.array([G[r, l] for l, r in topo.edges]) for G, topo in zip(gW, model.topologies)
    ]
    return loss, edge_grads + gb


def finite_difference(model64, x, y, loss_fn, delta=1e-3):
    """Central differences of ``loss_fn`` for every parameter of a float64 model."""
    grads = []
    for p in model64.parameters():
        g = np.zeros_like(p)
        for k in range(p.size):
            old = p[k]
            p[k] = old + delta
            up = loss_fn(model64, x, y)
            p[k] = old - delta
            down = loss_fn(model64, x, y)
            p[k] = old
            g[k] = (up - down) / (2 * delta)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_sparse_config(rng, max_params=500, max_layers=3):
    """A random valid configuration with at most ``max_params`` parameters."""
    from sparse_split.topology import NeuronalConfig, count_parameters, enumerate_degree_pairs

    while True:
        depth = int(rng.integers(1, max_layers + 1))
        widths = [int(rng.integers(2, 13)) for _ in range(depth)] + [int(rng.integers(2, 6))]
        degrees = []
        for a, b in zip(widths, widths[1:]):
            pairs = enumerate_degree_pairs(a, b)
            degrees.append(pairs[int(rng.integers(len(pairs)))][0])
        cfg = NeuronalConfig(widths, degrees)
        if count_parameters(cfg) <= max_params:
            return cfg


def away_from_kinks(model64, x, margin):
    """True when no hidden pre-activation lies within ``margin`` of zero."""
    _, pre = dense_forward(model64, x)
    return all(np.min(np.abs(z)) > margin for z in pre[:-1])


def grad_agrees(analytic, numeric, rel=1e-4, floor=1e-6):
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all((diff <= rel * scale) | (diff <= floor)))
