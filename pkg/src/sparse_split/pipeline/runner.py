"""Edge-side execution, the channel model and the LOC/ROC/SC/SC+EE comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ..core import SparseMlp, forward
from ..data import Dataset
from ..errors import ConfigError, ConnectionLost, RemoteError, ShapeMismatch, FrameError
from ..split_ee import (
    ExitBranch,
    ExitPolicy,
    PipelineMetrics,
    SplitPlan,
    evaluate_pipeline,
    gate_batch,
    split_model,
)
from .protocol import Frame, MsgType, activation_frame_size
from .transport import LoopbackTransport, TcpTransport

LOOPBACK = "loopback_in_process"
TCP = "tcp_socket"


@dataclass(frozen=True)
class ChannelModel:
    bandwidth_bytes_per_s: float = 1e6
    rtt_s: float = 0.01
    mode: str = LOOPBACK

    def __post_init__(self):
        if not self.bandwidth_bytes_per_s > 0:
            raise ConfigError("bandwidth must be positive")
        if not self.rtt_s >= 0:
            raise ConfigError("rtt must be non-negative")
        if self.mode not in (LOOPBACK, TCP):
            raise ConfigError(f"unknown channel mode {self.mode!r}")

    def latency(self, nbytes: int) -> float:
        """Modeled time for one transfer of ``nbytes`` (0 when nothing is sent)."""
        if nbytes == 0:
            return 0.0
        return self.rtt_s + nbytes / self.bandwidth_bytes_per_s


@dataclass
class TrafficRecord:
    sample_id: int
    exited_locally: bool
    bytes: int
    modeled_latency_s: float
    wall_s: float = 0.0


@dataclass
class TrafficLog:
    records: list[TrafficRecord] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.records)

    @property
    def modeled_transfer_s(self) -> float:
        return float(np.sum([r.modeled_latency_s for r in self.records]))

    @property
    def frames_sent(self) -> int:
        return sum(1 for r in self.records if not r.exited_locally)

    def to_csv(self) -> str:
        lines = ["sample_id,exited_locally,bytes,modeled_latency_s"]
        for r in self.records:
            lines.append(f"{r.sample_id},{int(r.exited_locally)},{r.bytes},{r.modeled_latency_s:.9g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrafficLog":
        rows = text.strip().split("\n")
        if rows[0] != "sample_id,exited_locally,bytes,modeled_latency_s":
            raise ValueError(f"unexpected traffic log header {rows[0]!r}")
        out = cls()
        for row in rows[1:]:
            sid, ex, nb, lat = row.split(",")
            out.records.append(TrafficRecord(int(sid), bool(int(ex)), int(nb), float(lat)))
        return out


def _transport_for(channel: ChannelModel, remote):
    if channel.mode == LOOPBACK:
        if not isinstance(remote, SparseMlp):
            raise ConfigError("loopback mode needs the tail model as the remote")
        return LoopbackTransport(remote)
    if isinstance(remote, SparseMlp):
        raise ConfigError("tcp mode needs a host:port endpoint as the remote")
    return TcpTransport(remote)


def run_edge(
    head: SparseMlp,
    branch: ExitBranch,
    policy: ExitPolicy,
    dataset: Dataset,
    channel: ChannelModel,
    remote: Union[SparseMlp, str, tuple],
    start: int = 0,
) -> tuple[PipelineMetrics, TrafficLog]:
    """Classify ``dataset`` on the edge, shipping uncertain samples to the tail.

    ``remote`` is the tail model itself in loopback mode and a ``host:port``
    endpoint in tcp mode.  If the link drops, :class:`ConnectionLost` carries
    the partial results and the index to pass back as ``start``.
    """
    if branch.input_width != head.output_width:
        raise ShapeMismatch("branch input width differs from head output width")
    z = forward(head, dataset.images)[-1]
    exit_mask, local_class = gate_batch(branch.logits(z), policy)
    labels = np.asarray(dataset.labels)
    metrics = PipelineMetrics()
    traffic = TrafficLog()
    transport = None
    try:
        for i in range(start, len(dataset)):
            if exit_mask[i]:
                metrics.record(True, local_class[i] == labels[i], 0)
                traffic.records.append(TrafficRecord(i, True, 0, 0.0))
                continue
            if transport is None:
                transport = _transport_for(channel, remote)
            request = Frame.activation_request(i, z[i])
            t0 = time.perf_counter()
            try:
                reply = transport.exchange(request)
            except (OSError, FrameError) as exc:
                raise ConnectionLost(f"lost remote at sample {i}: {exc}", i, metrics, traffic) from exc
            wall = time.perf_counter() - t0 if channel.mode == TCP else 0.0
            if reply.msg_type != MsgType.CLASS_RESPONSE or reply.sample_id != i:
                raise RemoteError(f"reply for sample {reply.sample_id} ({reply.msg_type!r}) to request {i}")
            nbytes = len(request)
            metrics.record(False, reply.class_index == labels[i], nbytes)
            traffic.records.append(TrafficRecord(i, False, nbytes, channel.latency(nbytes), wall))
    finally:
        if transport is not None:
            transport.close()
    return metrics, traffic


@dataclass(frozen=True)
class PolicyRow:
    policy: str
    accuracy: float
    bytes_per_sample: float
    modeled_latency_per_sample: float
    exit_rate: float


@dataclass
class PolicyReport:
    rows: list[PolicyRow]

    def __getitem__(self, name: str) -> PolicyRow:
        for row in self.rows:
            if row.policy == name:
                return row
        raise KeyError(name)

    def to_csv(self) -> str:
        lines = ["policy,accuracy,bytes_per_sample,modeled_latency_s_per_sample,exit_rate"]
        for r in self.rows:
            lines.append(
                f"{r.policy},{r.accuracy:.6f},{r.bytes_per_sample:.6f},"
                f"{r.modeled_latency_per_sample:.9g},{r.exit_rate:.6f}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "PolicyReport":
        rows = text.strip().split("\n")
        if rows[0] != "policy,accuracy,bytes_per_sample,modeled_latency_s_per_sample,exit_rate":
            raise ValueError(f"unexpected report header {rows[0]!r}")
        out = []
        for row in rows[1:]:
            name, acc, nb, lat, er = row.split(",")
            out.append(PolicyRow(name, float(acc), float(nb), float(lat), float(er)))
        return cls(out)


def compare_policies(
    model: SparseMlp,
    split_plan: SplitPlan,
    branch: ExitBranch,
    policy: ExitPolicy,
    dataset: Dataset,
    channel: ChannelModel,
    sc_ee_metrics: Optional[PipelineMetrics] = None,
) -> PolicyReport:
    """Accuracy, uplink bytes and modeled latency for the four execution policies.

    LOC answers with the exit branch alone, ROC ships the raw input to the
    full model, SC always ships the split activation and SC_EE gates.  Pass
    ``sc_ee_metrics`` (e.g. from a tcp :func:`run_edge` pass) to reuse a
    measured SC_EE run instead of the in-process reference.
    """
    head, tail = split_model(model, split_plan.split_junction)
    labels = np.asarray(dataset.labels)
    z = forward(head, dataset.images)[-1]

    loc_acc = float(np.mean(np.argmax(branch.logits(z), axis=1) == labels))
    full_acc = float(np.mean(np.argmax(forward(model, dataset.images)[-1], axis=1) == labels))
    sc_acc = float(np.mean(np.argmax(forward(tail, z)[-1], axis=1) == labels))

    roc_bytes = activation_frame_size(model.input_width)
    sc_bytes = activation_frame_size(split_plan.split_width)
    ee = sc_ee_metrics or evaluate_pipeline(head, branch, tail, policy, dataset)
    ee_latency = float(ee.n_continued * channel.latency(sc_bytes) / ee.n_samples) if ee.n_samples else 0.0
    return PolicyReport([
        PolicyRow("LOC", loc_acc, 0.0, 0.0, 1.0),
        PolicyRow("ROC", full_acc, float(roc_bytes), channel.latency(roc_bytes), 0.0),
        PolicyRow("SC", sc_acc, float(sc_bytes), channel.latency(sc_bytes), 0.0),
        PolicyRow("SC_EE", float(ee.overall_accuracy), float(ee.avg_bytes_per_sample), ee_latency, float(ee.exit_rate)),
    ])
