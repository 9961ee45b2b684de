"""Structured predefined sparsity: degree arithmetic and exact-degree wiring.

A junction links ``left_size`` nodes to ``right_size`` nodes.  Every left node
has the same out-degree and every right node the same in-degree, so the edge
count is ``left_size * out_degree == right_size * in_degree``.  All densities
here are :class:`fractions.Fraction` so membership tests stay exact.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegreeOutOfRange, NonIntegralInDegree

__all__ = [
    "NeuronalConfig",
    "JunctionSpec",
    "JunctionTopology",
    "validate_config",
    "enumerate_degree_pairs",
    "junction_density",
    "network_density",
    "build_topology",
    "count_parameters",
    "derive_seed",
]

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class NeuronalConfig:
    """Layer widths ``N_0..N_L`` plus one out-degree per junction."""

    layer_sizes: tuple[int, ...]
    out_degrees: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        object.__setattr__(self, "out_degrees", tuple(int(d) for d in self.out_degrees))

    @classmethod
    def dense(cls, layer_sizes: Sequence[int]) -> "NeuronalConfig":
        sizes = tuple(layer_sizes)
        return cls(sizes, sizes[1:])

    @property
    def n_junctions(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def is_dense(self) -> bool:
        return all(d == n for d, n in zip(self.out_degrees, self.layer_sizes[1:]))

    def __str__(self):
        sizes = ",".join(map(str, self.layer_sizes))
        degrees = ",".join(map(str, self.out_degrees))
        return f"[{sizes}]/[{degrees}]"


@dataclass(frozen=True)
class JunctionSpec:
    left_size: int
    right_size: int
    out_degree: int
    in_degree: int

    @property
    def edge_count(self) -> int:
        return self.left_size * self.out_degree

    @property
    def is_full(self) -> bool:
        return self.out_degree == self.right_size

    @classmethod
    def from_out_degree(cls, left_size: int, right_size: int, out_degree: int) -> "JunctionSpec":
        if left_size < 1 or right_size < 1:
            raise ConfigError(f"layer sizes must be positive, got {left_size} and {right_size}")
        if not 1 <= out_degree <= right_size:
            raise DegreeOutOfRange(
                f"out-degree {out_degree} outside [1, {right_size}] for junction {left_size}->{right_size}"
            )
        in_degree, rem = divmod(left_size * out_degree, right_size)
        if rem:
            raise NonIntegralInDegree(
                f"{left_size}*{out_degree}/{right_size} is not an integer in-degree"
            )
        return cls(left_size, right_size, out_degree, in_degree)

    def complement(self) -> "JunctionSpec":
        return JunctionSpec(
            self.left_size,
            self.right_size,
            self.right_size - self.out_degree,
            self.left_size - self.in_degree,
        )


def validate_config(config: NeuronalConfig) -> list[JunctionSpec]:
    sizes, degrees = config.layer_sizes, config.out_degrees
    if len(sizes) < 2:
        raise ConfigError("need at least an input and an output layer")
    if len(degrees) != len(sizes) - 1:
        raise ConfigError(
            f"{len(degrees)} out-degrees given for {len(sizes) - 1} junctions"
        )
    if any(n < 1 for n in sizes):
        raise ConfigError(f"layer sizes must be positive: {list(sizes)}")
    return [
        JunctionSpec.from_out_degree(sizes[i], sizes[i + 1], degrees[i])
        for i in range(len(degrees))
    ]


def enumerate_degree_pairs(left_size: int, right_size: int) -> list[tuple[int, int]]:
    """All ``(d_out, d_in)`` pairs allowed for a junction, sparsest first.

    There are exactly ``gcd(left_size, right_size)`` of them; pair ``k`` has
    density ``k / gcd``.
    """
    if left_size < 1 or right_size < 1:
        raise ConfigError(f"layer sizes must be positive, got {left_size} and {right_size}")
    g = math.gcd(left_size, right_size)
    return [(k * right_size // g, k * left_size // g) for k in range(1, g + 1)]


def junction_density(spec: JunctionSpec) -> Fraction:
    return Fraction(spec.edge_count, spec.left_size * spec.right_size)


def network_density(specs: Iterable[JunctionSpec]) -> Fraction:
    specs = list(specs)
    if not specs:
        raise ConfigError("network density of an empty junction list")
    edges = sum(s.edge_count for s in specs)
    possible = sum(s.left_size * s.right_size for s in specs)
    return Fraction(edges, possible)


def count_parameters(config: NeuronalConfig) -> int:
    """Stored weights plus one bias per non-input node."""
    specs = validate_config(config)
    return sum(s.edge_count for s in specs) + sum(config.layer_sizes[1:])


def derive_seed(seed: int, *path: int) -> int:
    """Deterministic 64-bit child seed for ``(seed, *path)``."""
    ss = np.random.SeedSequence([int(seed) & _U64, *path])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class JunctionTopology:
    """Edge set of one junction in canonical ``(right, left)`` order.

    ``left[e]`` and ``right[e]`` are the endpoints of edge ``e``; weights of a
    model are stored in the same order.
    """

    spec: JunctionSpec
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        left = np.ascontiguousarray(self.left, dtype=np.int64)
        right = np.ascontiguousarray(self.right, dtype=np.int64)
        left.setflags(write=False)
        right.setflags(write=False)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.left.tolist(), self.right.tolist()))

    def __len__(self):
        return len(self.left)

    def __eq__(self, other):
        if not isinstance(other, JunctionTopology):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.left, other.left)
            and np.array_equal(self.right, other.right)
        )

    def check(self) -> None:
        """Raise ``ConfigError`` unless every structural invariant holds."""
        s = self.spec
        if len(self.left) != s.edge_count or len(self.right) != s.edge_count:
            raise ConfigError(f"expected {s.edge_count} edges, found {len(self.left)}")
        if len(self.left) and (
            self.left.min() < 0 or self.left.max() >= s.left_size
            or self.right.min() < 0 or self.right.max() >= s.right_size
        ):
            raise ConfigError("edge endpoint out of range")
        key = self.right * s.left_size + self.left
        if np.any(np.diff(key) <= 0):
            raise ConfigError("edges not strictly ascending in (right, left) order")
        if np.any(np.bincount(self.left, minlength=s.left_size) != s.out_degree):
            raise ConfigError("out-degree violated")
        if np.any(np.bincount(self.right, minlength=s.right_size) != s.in_degree):
            raise ConfigError("in-degree violated")

    def to_text(self) -> str:
        s = self.spec
        buf = io.StringIO()
        buf.write(f"junction {s.left_size} {s.right_size} {s.out_degree} {s.in_degree}\n")
        for l, r in zip(self.left.tolist(), self.right.tolist()):
            buf.write(f"{l} {r}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "JunctionTopology":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise ConfigError("empty topology text")
        head = lines[0].split()
        if len(head) != 5 or head[0] != "junction":
            raise ConfigError(f"bad topology header: {lines[0]!r}")
        left_size, right_size, d_out, d_in = map(int, head[1:])
        spec = JunctionSpec.from_out_degree(left_size, right_size, d_out)
        if spec.in_degree != d_in:
            raise ConfigError(f"header in-degree {d_in} inconsistent, expected {spec.in_degree}")
        try:
            pairs = np.array([list(map(int, ln.split())) for ln in lines[1:]], dtype=np.int64)
        except ValueError as exc:
            raise ConfigError(f"bad edge line: {exc}") from None
        pairs = pairs.reshape(-1, 2)
        topo = cls(spec, pairs[:, 0], pairs[:, 1])
        topo.check()
        return topo


def _canonical(spec: JunctionSpec, left: np.ndarray, right: np.ndarray) -> JunctionTopology:
    order = np.lexsort((left, right))
    return JunctionTopology(spec, left[order], right[order])


def _complete(spec: JunctionSpec) -> JunctionTopology:
    right = np.repeat(np.arange(spec.right_size), spec.left_size)
    left = np.tile(np.arange(spec.left_size), spec.right_size)
    return JunctionTopology(spec, left, right)


def _pair_and_repair(spec: JunctionSpec, rng: np.random.Generator):
    """One attempt at positional stub pairing followed by swap repair.

    Returns ``(left, right)`` or ``None`` when the swap budget runs out.
    """
    n_edges = spec.edge_count
    width = spec.right_size
    left = np.repeat(np.arange(spec.left_size), spec.out_degree)
    right = np.repeat(np.arange(spec.right_size), spec.in_degree)
    rng.shuffle(left)

    keys = (left * width + right).tolist()
    counts: dict[int, int] = {}
    pending = []
    for pos, k in enumerate(keys):
        c = counts.get(k, 0)
        if c:
            pending.append(pos)
        counts[k] = c + 1
    if not pending:
        return left, right

    lft = left.tolist()
    rgt = right.tolist()
    budget = 10 * n_edges
    attempts = 0
    draws: list[int] = []
    while pending:
        p = pending[-1]
        if counts[lft[p] * width + rgt[p]] < 2:
            pending.pop()
            continue
        if attempts >= budget:
            return None
        attempts += 1
        if not draws:
            draws = rng.integers(0, n_edges, size=256).tolist()
            draws.reverse()
        q = draws.pop()
        lp, lq, rp, rq = lft[p], lft[q], rgt[p], rgt[q]
        if lp == lq:
            continue
        new_p = lq * width + rp
        new_q = lp * width + rq
        if counts.get(new_p, 0) or counts.get(new_q, 0):
            continue
        old_p = lp * width + rp
        old_q = lq * width + rq
        counts[old_p] -= 1
        counts[old_q] -= 1
        counts[new_p] = 1
        counts[new_q] = 1
        lft[p], lft[q] = lq, lp
        pending.pop()
    return np.array(lft, dtype=np.int64), right


def build_topology(spec: JunctionSpec, seed: int) -> JunctionTopology:
    """Random exact-degree wiring for ``spec``, deterministic in ``seed``.

    Junctions denser than one half are built as the complement of a sparser
    random junction, which keeps the duplicate-repair loop short.
    """
    if spec.is_full:
        return _complete(spec)
    if 2 * spec.out_degree > spec.right_size:
        sparse = build_topology(spec.complement(), derive_seed(seed, 0xC0))
        present = np.ones((spec.right_size, spec.left_size), dtype=bool)
        present[sparse.right, sparse.left] = False
        right, left = np.nonzero(present)
        return JunctionTopology(spec, left, right)
    restart = 0
    while True:
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, restart)))
        paired = _pair_and_repair(spec, rng)
        if paired is not None:
            return _canonical(spec, *paired)
        restart += 1
