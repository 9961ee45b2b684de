"""Sparse MLP: parameters, forward/backward over edge lists, Adam, training.

Weights of junction ``i`` are a flat array aligned with the canonical edge
order of its topology, i.e. grouped by right node.  Two forward paths exist:

* :func:`forward` accumulates each output in canonical edge order with
  elementwise ops only, so a row's result never depends on which other rows
  share the batch.  Inference, splitting and the pipeline all go through it.
* the training path inside :func:`loss_and_grad` uses BLAS for full-degree
  junctions and a vectorised gather for sparse ones; it is fast but its
  rounding depends on batch shape.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BadRange, ConfigError, LabelOutOfRange, ShapeMismatch
from .topology import (
    JunctionTopology,
    NeuronalConfig,
    build_topology,
    count_parameters,
    derive_seed,
    validate_config,
)

log = logging.getLogger(__name__)

_EXACT_CHUNK = 2048


class JunctionKernel:
    """Index tables that turn an edge list into gather/scatter operations."""

    def __init__(self, topology: JunctionTopology, force_gather: bool = False):
        spec = topology.spec
        self.left_size = spec.left_size
        self.right_size = spec.right_size
        self.in_degree = spec.in_degree
        self.out_degree = spec.out_degree
        self.full = spec.is_full and not force_gather
        # canonical order groups edges by right node, in_degree apiece
        self.left_by_right = topology.left.reshape(spec.right_size, spec.in_degree)
        by_left = np.lexsort((topology.right, topology.left))
        self.edge_by_left = by_left.reshape(spec.left_size, spec.out_degree)
        self.right_by_left = topology.right[by_left].reshape(spec.left_size, spec.out_degree)

    def forward_exact(self, a: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        wr = w.reshape(self.right_size, self.in_degree)
        out = np.empty((a.shape[0], self.right_size), dtype=w.dtype)
        for lo in range(0, a.shape[0], _EXACT_CHUNK):
            x = a[lo:lo + _EXACT_CHUNK]
            acc = np.empty((x.shape[0], self.right_size), dtype=w.dtype)
            tmp = np.empty_like(acc)
            for k in range(self.in_degree):
                if self.full:
                    col = x[:, k:k + 1]
                else:
                    col = x[:, self.left_by_right[:, k]]
                if k == 0:
                    np.multiply(col, wr[:, 0], out=acc)
                else:
                    np.multiply(col, wr[:, k], out=tmp)
                    acc += tmp
            acc += b
            out[lo:lo + _EXACT_CHUNK] = acc
        return out

    def forward_fast(self, a: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        wr = w.reshape(self.right_size, self.in_degree)
        if self.full:
            return a @ wr.T + b
        return np.einsum("brk,rk->br", a[:, self.left_by_right], wr) + b

    def weight_grad(self, a: np.ndarray, dz: np.ndarray) -> np.ndarray:
        if self.full:
            return (dz.T @ a).reshape(-1)
        return np.einsum("br,brk->rk", dz, a[:, self.left_by_right]).reshape(-1)

    def input_grad(self, dz: np.ndarray, w: np.ndarray) -> np.ndarray:
        if self.full:
            return dz @ w.reshape(self.right_size, self.in_degree)
        return np.einsum("blk,lk->bl", dz[:, self.right_by_left], w[self.edge_by_left])


@dataclass(eq=False)
class SparseMlp:
    """Structured-sparse MLP with ReLU hidden layers and raw logits.

    ``relu_output`` makes the last layer apply ReLU too; a split head uses it
    so that its output is the hidden activation the tail expects.
    """

    config: NeuronalConfig
    topologies: list[JunctionTopology]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    relu_output: bool = False
    kernels: list[JunctionKernel] = field(init=False, repr=False)

    def __post_init__(self):
        specs = validate_config(self.config)
        if len(self.topologies) != len(specs):
            raise ShapeMismatch("one topology per junction required")
        for i, (spec, topo) in enumerate(zip(specs, self.topologies)):
            if topo.spec != spec:
                raise ShapeMismatch(f"junction {i + 1}: topology {topo.spec} != config {spec}")
            if self.weights[i].shape != (spec.edge_count,):
                raise ShapeMismatch(f"junction {i + 1}: {self.weights[i].shape[0]} weights for {spec.edge_count} edges")
            if self.biases[i].shape != (spec.right_size,):
                raise ShapeMismatch(f"layer {i + 1}: bias length {self.biases[i].shape[0]} != {spec.right_size}")
        self.kernels = [JunctionKernel(t) for t in self.topologies]

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_junctions(self) -> int:
        return len(self.topologies)

    @property
    def input_width(self) -> int:
        return self.config.layer_sizes[0]

    @property
    def output_width(self) -> int:
        return self.config.layer_sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        """Weights of every junction, then biases of every layer."""
        return [*self.weights, *self.biases]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "SparseMlp":
        return SparseMlp(
            self.config,
            list(self.topologies),
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.relu_output,
        )

    def copy(self) -> "SparseMlp":
        return self.astype(self.dtype)

    def parameter_bytes(self) -> bytes:
        return b"".join(p.astype("<f4" if p.dtype == np.float32 else "<f8").tobytes() for p in self.parameters())


def init_model(config: NeuronalConfig, seed: int, dtype=np.float32) -> SparseMlp:
    """Wire every junction and draw sparse-fan Glorot weights; biases start at 0."""
    specs = validate_config(config)
    topologies, weights, biases = [], [], []
    for i, spec in enumerate(specs):
        topologies.append(build_topology(spec, derive_seed(seed, 1, i)))
        bound = np.sqrt(6.0 / (spec.in_degree + spec.out_degree))
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 2, i)))
        weights.append(rng.uniform(-bound, bound, size=spec.edge_count).astype(dtype))
        biases.append(np.zeros(spec.right_size, dtype=dtype))
    return SparseMlp(config, topologies, weights, biases)


def _check_batch(model: SparseMlp, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != model.input_width:
        raise ShapeMismatch(f"batch shape {batch.shape} does not match input width {model.input_width}")
    return batch.astype(model.dtype, copy=False)


def _applies_relu(model: SparseMlp, i: int) -> bool:
    return i < model.n_junctions - 1 or model.relu_output


def forward(model: SparseMlp, batch: np.ndarray) -> list[np.ndarray]:
    """Activations ``[a_0, a_1, ..., out]`` using the row-exact kernel.

    The last entry is the raw logits unless ``model.relu_output`` is set.
    """
    a = _check_batch(model, batch)
    acts = [a]
    for i, kernel in enumerate(model.kernels):
        z = kernel.forward_exact(a, model.weights[i], model.biases[i])
        if _applies_relu(model, i):
            np.maximum(z, 0, out=z)
        acts.append(z)
        a = z
    return acts


def predict_logits(model: SparseMlp, batch: np.ndarray) -> np.ndarray:
    return forward(model, batch)[-1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _check_labels(model: SparseMlp, labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatch(f"{labels.shape} labels for a batch of {n}")
    if n and (labels.min() < 0 or labels.max() >= model.output_width):
        raise LabelOutOfRange(f"labels must lie in [0, {model.output_width})")
    return labels.astype(np.int64, copy=False)


def loss_and_grad(model: SparseMlp, batch: np.ndarray, labels) -> tuple[float, list[np.ndarray]]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``model.parameters()``."""
    a = _check_batch(model, batch)
    labels = _check_labels(model, labels, a.shape[0])
    if model.relu_output:
        raise ConfigError("cannot train a model whose output passes through ReLU")
    acts = [a]
    for i, kernel in enumerate(model.kernels):
        z = kernel.forward_fast(a, model.weights[i], model.biases[i])
        if _applies_relu(model, i):
            z = np.maximum(z, 0)
        acts.append(z)
        a = z

    n = a.shape[0]
    logp = _log_softmax(acts[-1])
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    dz = np.exp(logp)
    dz[rows, labels] -= 1
    dz /= n

    L = model.n_junctions
    w_grads: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    for i in range(L - 1, -1, -1):
        kernel = model.kernels[i]
        w_grads[i] = kernel.weight_grad(acts[i], dz).astype(model.dtype, copy=False)
        b_grads[i] = dz.sum(axis=0).astype(model.dtype, copy=False)
        if i:
            da = kernel.input_grad(dz, model.weights[i])
            dz = da * (acts[i] > 0)
    return loss, [*w_grads, *b_grads]


@dataclass
class AdamState:
    """Moment buffers congruent with ``model.parameters()``.

    ``mode="sgd"`` turns :func:`adam_step` into the plain update
    ``theta <- theta - lr * grad``.
    """

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    mode: str = "adam"

    @classmethod
    def for_model(cls, model: SparseMlp, **kwargs) -> "AdamState":
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)


def adam_step(model: SparseMlp, grads: Sequence[np.ndarray], state: AdamState, lr: float):
    params = model.parameters()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ShapeMismatch("gradients are not congruent with the parameters")
    if len(state.first_moment) != len(params) or any(
        m.shape != p.shape for m, p in zip(state.first_moment, params)
    ):
        raise ShapeMismatch("optimizer state is not congruent with the parameters")
    state.step_count += 1
    if state.mode == "sgd":
        for p, g in zip(params, grads):
            p -= p.dtype.type(lr) * g
        return model, state
    if state.mode != "adam":
        raise ConfigError(f"unknown optimizer mode {state.mode!r}")
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        denom = np.sqrt(v / dt(bc2))
        denom += dt(state.epsilon)
        p -= dt(lr) * (m / dt(bc1)) / denom
    return model, state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-5
    batch_size: int = 64
    seed: int = 0
    shuffle_each_epoch: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    eval_accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    seconds: float = 0.0

    def __len__(self):
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def accuracies(self) -> list[float]:
        return [r.eval_accuracy for r in self.records]

    def to_csv(self) -> str:
        lines = ["epoch,loss,eval_accuracy"]
        lines += [f"{r.epoch},{r.loss:.9g},{r.eval_accuracy:.9g}" for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = text.strip().split("\n")
        if rows[0] != "epoch,loss,eval_accuracy":
            raise ValueError(f"unexpected history header {rows[0]!r}")
        out = cls()
        for row in rows[1:]:
            e, l, acc = row.split(",")
            out.records.append(EpochRecord(int(e), float(l), float(acc)))
        return out


def train(
    model: SparseMlp,
    train_set,
    eval_set,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainHistory:
    """Minibatch Adam training; ``model`` is updated in place.

    ``train_set``/``eval_set`` are :class:`~sparse_split.data.Dataset`
    instances (``eval_set`` may be ``None``).
    """
    from .data import batches

    if train_set.images.shape[1] != model.input_width:
        raise ShapeMismatch(f"dataset width {train_set.images.shape[1]} != model input {model.input_width}")
    state = AdamState.for_model(model)
    history = TrainHistory()
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm_epoch = epoch if cfg.shuffle_each_epoch else None
        total, seen = 0.0, 0
        for x, y in batches(train_set, cfg.batch_size, cfg.seed, perm_epoch):
            loss, grads = loss_and_grad(model, x, y)
            adam_step(model, grads, state, cfg.learning_rate)
            total += loss * len(y)
            seen += len(y)
        acc = evaluate(model, eval_set) if eval_set is not None else float("nan")
        rec = EpochRecord(epoch + 1, total / seen, acc)
        history.records.append(rec)
        log.info("epoch %d loss %.5f eval_acc %.4f", rec.epoch, rec.loss, rec.eval_accuracy)
        if on_epoch is not None:
            on_epoch(rec)
    for p in model.parameters():
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("training produced non-finite parameters")
    history.seconds = time.perf_counter() - t0
    return history


def evaluate(model: SparseMlp, dataset) -> float:
    """Top-1 accuracy; ties in the logits go to the lowest class index."""
    logits = predict_logits(model, dataset.images)
    labels = np.asarray(dataset.labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeMismatch("label count does not match image count")
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class Histogram:
    """Weight counts per bin; out-of-range weights are folded into the end bins.

    ``clamped_low``/``clamped_high`` report how many of the end-bin entries
    were folded in, so ``sum(counts) == edge count`` always.
    """

    junction: int
    edges: list[float]
    counts: list[int]
    clamped_low: int = 0
    clamped_high: int = 0

    @property
    def bins(self) -> list[tuple[float, int]]:
        return list(zip(self.edges[:-1], self.counts))

    def to_csv(self) -> str:
        lines = ["bin_left,bin_right,count"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{lo:.4f},{hi:.4f},{c}")
        return "\n".join(lines) + "\n"


def weight_histogram(
    model: SparseMlp,
    junction_index: int,
    bin_width: float = 0.07,
    value_range: tuple[float, float] = (-0.70, 0.70),
) -> Histogram:
    """Histogram of the weights of junction ``junction_index`` (1-based)."""
    if not 1 <= junction_index <= model.n_junctions:
        raise BadRange(f"junction {junction_index} not in 1..{model.n_junctions}")
    lo, hi = value_range
    if not bin_width > 0 or not hi > lo:
        raise BadRange(f"bad histogram range {value_range} / width {bin_width}")
    n_bins = int(round((hi - lo) / bin_width))
    if n_bins < 1 or abs(n_bins * bin_width - (hi - lo)) > 1e-9 * max(1.0, hi - lo):
        raise BadRange(f"range {value_range} is not a whole number of {bin_width}-wide bins")
    w = model.weights[junction_index - 1].astype(np.float64)
    edges = [round(lo + k * bin_width, 10) for k in range(n_bins + 1)]
    # bins are [left, right); the last one also takes values equal to hi
    idx = np.searchsorted(np.array(edges), w, side="right") - 1
    idx[w == edges[-1]] = n_bins - 1
    low = int(np.count_nonzero(idx < 0))
    high = int(np.count_nonzero(idx >= n_bins))
    idx = np.clip(idx, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return Histogram(junction_index, edges, counts.tolist(), low, high)
