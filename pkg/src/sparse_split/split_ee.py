"""Head/tail partitioning, the early-exit branch and its confidence gate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .core import SparseMlp, TrainConfig, TrainHistory, forward, init_model, train
from .data import Dataset
from .errors import BadSplitIndex, ConfigError, ShapeMismatch
from .topology import NeuronalConfig


def default_split_index(n_junctions: int) -> int:
    return math.ceil(n_junctions / 2)


@dataclass(frozen=True)
class SplitPlan:
    """Head runs junctions ``1..split_junction``; the tail runs the rest."""

    split_junction: int
    split_width: int

    @classmethod
    def for_config(cls, config: NeuronalConfig, s: Optional[int] = None) -> "SplitPlan":
        L = len(config.layer_sizes) - 1
        if s is None:
            s = default_split_index(L)
        if not 1 <= s <= L - 1:
            raise BadSplitIndex(f"split index {s} outside 1..{L - 1}")
        return cls(s, config.layer_sizes[s])


def split_model(model: SparseMlp, s: Optional[int] = None) -> tuple[SparseMlp, SparseMlp]:
    """Cut ``model`` after junction ``s`` (default: ``ceil(L/2)``).

    The head ends with ReLU so its output is exactly the hidden activation the
    tail consumes; parameters are copied, not shared.
    """
    plan = SplitPlan.for_config(model.config, s)
    s = plan.split_junction
    sizes, degrees = model.config.layer_sizes, model.config.out_degrees
    head = SparseMlp(
        NeuronalConfig(sizes[:s + 1], degrees[:s]),
        list(model.topologies[:s]),
        [w.copy() for w in model.weights[:s]],
        [b.copy() for b in model.biases[:s]],
        relu_output=True,
    )
    tail = SparseMlp(
        NeuronalConfig(sizes[s:], degrees[s:]),
        list(model.topologies[s:]),
        [w.copy() for w in model.weights[s:]],
        [b.copy() for b in model.biases[s:]],
        relu_output=model.relu_output,
    )
    return head, tail


@dataclass(eq=False)
class ExitBranch:
    """Small classifier fed by the head output (dense unless degrees given)."""

    net: SparseMlp

    @property
    def input_width(self) -> int:
        return self.net.input_width

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.net.config.layer_sizes[1:-1]

    def n_parameters(self) -> int:
        return self.net.n_parameters()

    def logits(self, head_output: np.ndarray) -> np.ndarray:
        return forward(self.net, head_output)[-1]


def attach_exit(
    head: SparseMlp,
    hidden_widths: Sequence[int] = (),
    seed: int = 0,
    output_width: int = 10,
    out_degrees: Optional[Sequence[int]] = None,
) -> ExitBranch:
    widths = (head.output_width, *hidden_widths, output_width)
    if any(w < 1 for w in widths):
        raise ConfigError(f"exit branch widths must be positive: {widths}")
    config = NeuronalConfig(widths, out_degrees if out_degrees is not None else widths[1:])
    return ExitBranch(init_model(config, seed))


def head_features(head: SparseMlp, dataset: Dataset) -> Dataset:
    return Dataset(forward(head, dataset.images)[-1], dataset.labels, dataset.split_tag)


def train_exit(
    head: SparseMlp,
    branch: ExitBranch,
    train_set: Dataset,
    cfg: TrainConfig,
    eval_set: Optional[Dataset] = None,
) -> TrainHistory:
    """Train only ``branch`` on features from the frozen ``head``."""
    feats = head_features(head, train_set)
    eval_feats = head_features(head, eval_set) if eval_set is not None else None
    return train(branch.net, feats, eval_feats, cfg)


@dataclass(frozen=True)
class ExitPolicy:
    threshold: float = 0.9
    kind: str = "max_softmax_threshold"

    def __post_init__(self):
        if self.kind != "max_softmax_threshold":
            raise ConfigError(f"unsupported exit policy {self.kind!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")


@dataclass(frozen=True)
class Decision:
    exit_local: bool
    class_index: Optional[int] = None


def gate_batch(logits: np.ndarray, policy: ExitPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised gate: ``(exit_mask, argmax_class)`` per row.

    The test ``max softmax >= tau`` is evaluated as
    ``sum_{j != argmax} exp(l_j - l_max) <= (1 - tau) / tau``, accumulated one
    class at a time, so ``tau = 1`` only exits when every other class
    underflows to exactly zero probability.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeMismatch("logits must be 2-D")
    top = np.argmax(logits, axis=1)
    rows = np.arange(len(logits))
    lmax = logits[rows, top]
    rest = np.zeros(len(logits))
    for j in range(logits.shape[1]):
        term = np.exp(logits[:, j] - lmax)
        term[top == j] = 0.0
        rest += term
    tau = policy.threshold
    if tau == 0.0:
        exit_mask = np.ones(len(logits), dtype=bool)
    else:
        exit_mask = rest <= (1.0 - tau) / tau
    return exit_mask, top


def gate(branch_logits, policy: ExitPolicy) -> Decision:
    row = np.asarray(branch_logits, dtype=np.float64).reshape(1, -1)
    exit_mask, top = gate_batch(row, policy)
    if exit_mask[0]:
        return Decision(True, int(top[0]))
    return Decision(False)


@dataclass
class PipelineMetrics:
    """Integer tallies; every ratio is derived exactly as a Fraction."""

    n_samples: int = 0
    n_exited: int = 0
    correct_exited: int = 0
    correct_continued: int = 0
    bytes_total: int = 0

    @property
    def n_continued(self) -> int:
        return self.n_samples - self.n_exited

    @property
    def exit_rate(self) -> Fraction:
        return Fraction(self.n_exited, self.n_samples) if self.n_samples else Fraction(0)

    @property
    def overall_accuracy(self) -> Fraction:
        if not self.n_samples:
            return Fraction(0)
        return Fraction(self.correct_exited + self.correct_continued, self.n_samples)

    @property
    def accuracy_on_exited(self) -> Optional[Fraction]:
        return Fraction(self.correct_exited, self.n_exited) if self.n_exited else None

    @property
    def accuracy_on_continued(self) -> Optional[Fraction]:
        return Fraction(self.correct_continued, self.n_continued) if self.n_continued else None

    @property
    def avg_bytes_per_sample(self) -> Fraction:
        return Fraction(self.bytes_total, self.n_samples) if self.n_samples else Fraction(0)

    def record(self, exited: bool, correct: bool, nbytes: int) -> None:
        self.n_samples += 1
        self.bytes_total += nbytes
        if exited:
            self.n_exited += 1
            self.correct_exited += int(correct)
        else:
            self.correct_continued += int(correct)

    def as_dict(self) -> dict:
        def f(x):
            return None if x is None else float(x)

        return {
            "n_samples": self.n_samples,
            "overall_accuracy": f(self.overall_accuracy),
            "exit_rate": f(self.exit_rate),
            "accuracy_on_exited": f(self.accuracy_on_exited),
            "accuracy_on_continued": f(self.accuracy_on_continued),
            "avg_bytes_per_sample": f(self.avg_bytes_per_sample),
        }


def evaluate_pipeline(
    head: SparseMlp,
    branch: ExitBranch,
    tail: SparseMlp,
    policy: ExitPolicy,
    dataset: Dataset,
) -> PipelineMetrics:
    """In-process reference for gated split inference."""
    from .pipeline.protocol import activation_frame_size

    if branch.input_width != head.output_width or tail.input_width != head.output_width:
        raise ShapeMismatch("head, branch and tail widths do not line up")
    z = forward(head, dataset.images)[-1]
    exit_mask, local_class = gate_batch(branch.logits(z), policy)
    remote_class = np.full(len(dataset), -1, dtype=np.int64)
    cont = ~exit_mask
    if cont.any():
        remote_class[cont] = np.argmax(forward(tail, z[cont])[-1], axis=1)
    frame_bytes = activation_frame_size(head.output_width)
    metrics = PipelineMetrics()
    labels = np.asarray(dataset.labels)
    for i in range(len(dataset)):
        if exit_mask[i]:
            metrics.record(True, local_class[i] == labels[i], 0)
        else:
            metrics.record(False, remote_class[i] == labels[i], frame_bytes)
    return metrics
