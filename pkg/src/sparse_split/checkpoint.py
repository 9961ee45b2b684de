"""Binary checkpoint container.

``SPMLP1`` header, then u32 layer count, u32 layer sizes, u32 out-degrees and
u32 in-degrees; then every junction's edge list as u32 ``(left, right)``
pairs; then every junction's f32 weights and every layer's f32 biases, all in
canonical order.  Optional tagged sections follow, each ``tag (5 bytes) +
u32 length + payload``:

* ``SPLT1``: u32 split junction, u32 split width, f64 exit threshold
* ``EXIT1``: the exit branch as a nested ``SPMLP1`` blob
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import SparseMlp
from .errors import CheckpointError, ConfigError
from .split_ee import ExitBranch, ExitPolicy, SplitPlan
from .topology import JunctionTopology, NeuronalConfig, validate_config

MAGIC = b"SPMLP1"
SPLIT_TAG = b"SPLT1"
EXIT_TAG = b"EXIT1"


@dataclass(eq=False)
class Checkpoint:
    model: SparseMlp
    plan: Optional[SplitPlan] = None
    policy: Optional[ExitPolicy] = None
    branch: Optional[ExitBranch] = None


def model_to_bytes(model: SparseMlp) -> bytes:
    cfg = model.config
    specs = validate_config(cfg)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", len(cfg.layer_sizes)))
    out.write(np.asarray(cfg.layer_sizes, dtype="<u4").tobytes())
    out.write(np.asarray([s.out_degree for s in specs], dtype="<u4").tobytes())
    out.write(np.asarray([s.in_degree for s in specs], dtype="<u4").tobytes())
    for topo in model.topologies:
        pairs = np.stack([topo.left, topo.right], axis=1).astype("<u4")
        out.write(pairs.tobytes())
    for w in model.weights:
        out.write(w.astype("<f4").tobytes())
    for b in model.biases:
        out.write(b.astype("<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).copy()

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def _read_model(reader: _Reader) -> SparseMlp:
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an SPMLP1 checkpoint")
    (n_layers,) = struct.unpack("<I", reader.take(4))
    if not 2 <= n_layers <= 1024:
        raise CheckpointError(f"implausible layer count {n_layers}")
    sizes = reader.array("<u4", n_layers).astype(int)
    d_out = reader.array("<u4", n_layers - 1).astype(int)
    d_in = reader.array("<u4", n_layers - 1).astype(int)
    try:
        config = NeuronalConfig(tuple(sizes), tuple(d_out))
        specs = validate_config(config)
    except ConfigError as exc:
        raise CheckpointError(f"invalid configuration in checkpoint: {exc}") from None
    if [s.in_degree for s in specs] != list(d_in):
        raise CheckpointError("stored in-degrees disagree with layer sizes and out-degrees")
    topologies = []
    for spec in specs:
        pairs = reader.array("<u4", 2 * spec.edge_count).reshape(-1, 2).astype(np.int64)
        topo = JunctionTopology(spec, pairs[:, 0], pairs[:, 1])
        try:
            topo.check()
        except ConfigError as exc:
            raise CheckpointError(f"corrupt topology: {exc}") from None
        topologies.append(topo)
    weights = [reader.array("<f4", s.edge_count).astype(np.float32) for s in specs]
    biases = [reader.array("<f4", s.right_size).astype(np.float32) for s in specs]
    return SparseMlp(config, topologies, weights, biases)


def model_from_bytes(data: bytes) -> SparseMlp:
    reader = _Reader(data)
    model = _read_model(reader)
    if reader.remaining:
        raise CheckpointError(f"{reader.remaining} unexpected trailing bytes")
    return model


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<I", len(payload)) + payload


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [model_to_bytes(ckpt.model)]
    if ckpt.plan is not None:
        tau = ckpt.policy.threshold if ckpt.policy is not None else float("nan")
        parts.append(_section(SPLIT_TAG, struct.pack("<IId", ckpt.plan.split_junction, ckpt.plan.split_width, tau)))
    if ckpt.branch is not None:
        parts.append(_section(EXIT_TAG, model_to_bytes(ckpt.branch.net)))
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    ckpt = Checkpoint(_read_model(reader))
    while reader.remaining:
        tag = reader.take(5)
        (length,) = struct.unpack("<I", reader.take(4))
        payload = reader.take(length)
        if tag == SPLIT_TAG:
            if length != 16:
                raise CheckpointError("bad SPLT1 section length")
            s, width, tau = struct.unpack("<IId", payload)
            plan = SplitPlan.for_config(ckpt.model.config, s)
            if plan.split_width != width:
                raise CheckpointError("SPLT1 split width disagrees with the model")
            ckpt.plan = plan
            if not np.isnan(tau):
                ckpt.policy = ExitPolicy(tau)
        elif tag == EXIT_TAG:
            ckpt.branch = ExitBranch(model_from_bytes(payload))
        else:
            raise CheckpointError(f"unknown section tag {tag!r}")
    return ckpt


def save_checkpoint(path, model: SparseMlp, plan=None, policy=None, branch=None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(Checkpoint(model, plan, policy, branch)))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
