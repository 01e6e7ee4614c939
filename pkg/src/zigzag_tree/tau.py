"""Ranked-topology encoding of ultrametric binary trees (tau-space).

Node labels are leaf sets stored as integer bitmasks: leaf ``j`` (1-based)
is ``1 << (j - 1)`` and an internal node is the union of its children.
A ranked topology is the ordered sequence of its ``n - 1`` merger pairs.
"""

from __future__ import annotations

import enum
import functools
import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np


class InvalidOperatorError(ValueError):
    """Raised when a swap or pivot is applied outside its domain."""


def lowbit(mask: int) -> int:
    return mask & -mask


def make_pair(a: int, b: int) -> tuple[int, int]:
    """Order a merger pair by least leaf label."""
    return (a, b) if lowbit(a) < lowbit(b) else (b, a)


def leaf_mask(leaves: int | Sequence[int] | frozenset) -> int:
    if isinstance(leaves, int):
        return 1 << (leaves - 1)
    mask = 0
    for j in leaves:
        mask |= 1 << (j - 1)
    return mask


def mask_leaves(mask: int) -> tuple[int, ...]:
    out = []
    j = 1
    while mask:
        if mask & 1:
            out.append(j)
        mask >>= 1
        j += 1
    return tuple(out)


def format_label(mask: int) -> str:
    leaves = mask_leaves(mask)
    if len(leaves) == 1:
        return str(leaves[0])
    return "{" + ",".join(map(str, leaves)) + "}"


@dataclass(frozen=True)
class RankedTopology:
    """Sequence of ``n - 1`` merger pairs; entry ``i`` holds the children of merger ``i + 1``."""

    n: int
    mergers: tuple[tuple[int, int], ...]

    @classmethod
    def from_pairs(cls, n: int, pairs: Sequence[tuple]) -> RankedTopology:
        """Build from pairs whose entries are leaf ints or iterables of leaves."""
        mergers = tuple(
            make_pair(leaf_mask(_as_leaves(a)), leaf_mask(_as_leaves(b))) for a, b in pairs
        )
        topo = cls(n, mergers)
        topo.validate()
        return topo

    def validate(self) -> None:
        if self.n < 2 or len(self.mergers) != self.n - 1:
            raise ValueError("a ranked topology on n leaves has n - 1 mergers")
        alive = {1 << j for j in range(self.n)}
        for a, b in self.mergers:
            if a not in alive or b not in alive or a == b:
                raise ValueError(f"merger ({format_label(a)}, {format_label(b)}) uses a dead label")
            if make_pair(a, b) != (a, b):
                raise ValueError("merger pairs must be ordered by least element")
            alive -= {a, b}
            alive.add(a | b)
        if alive != {(1 << self.n) - 1}:
            raise ValueError("final merger must produce the full leaf set")

    def node(self, i: int) -> int:
        """Label created by merger ``i`` (1-based)."""
        a, b = self.mergers[i - 1]
        return a | b

    def nested(self, i: int) -> bool:
        """True when merger ``i - 1`` is a child of merger ``i`` (``E_{i-1} in E_i``)."""
        return self.node(i - 1) in self.mergers[i - 1]

    @cached_property
    def topology_id(self) -> str:
        payload = f"{self.n}:" + ";".join(f"{a:x},{b:x}" for a, b in self.mergers)
        return hashlib.blake2b(payload.encode(), digest_size=8).hexdigest()

    def format_mergers(self) -> str:
        return "(" + ", ".join(
            "{" + format_label(a) + ", " + format_label(b) + "}" for a, b in self.mergers
        ) + ")"

    def log_line(self) -> str:
        return f"id {self.topology_id} mergers {self.format_mergers()}"

    def __repr__(self) -> str:
        return f"RankedTopology(n={self.n}, {self.format_mergers()})"


def _as_leaves(x) -> Sequence[int] | int:
    if isinstance(x, (int, np.integer)):
        return int(x)
    flat: list[int] = []
    stack = [x]
    while stack:
        y = stack.pop()
        if isinstance(y, (int, np.integer)):
            flat.append(int(y))
        else:
            stack.extend(y)
    return flat


def swap(topo: RankedTopology, i: int) -> RankedTopology:
    """Exchange the order of mergers ``i - 1`` and ``i``."""
    if not 2 <= i <= topo.n - 2 or topo.nested(i):
        raise InvalidOperatorError(f"swap s_{i} undefined for {topo!r}")
    m = list(topo.mergers)
    m[i - 2], m[i - 1] = m[i - 1], m[i - 2]
    return RankedTopology(topo.n, tuple(m))


def _pivot(topo: RankedTopology, i: int, up: bool) -> RankedTopology:
    if not 2 <= i <= topo.n - 1 or not topo.nested(i):
        raise InvalidOperatorError(f"pivot p_{i} undefined for {topo!r}")
    low, high = topo.mergers[i - 2]
    child = low | high
    a, b = topo.mergers[i - 1]
    sibling = b if a == child else a
    keep, move = (high, low) if up else (low, high)
    first = make_pair(keep, sibling)
    m = list(topo.mergers)
    m[i - 2] = first
    m[i - 1] = make_pair(keep | sibling, move)
    return RankedTopology(topo.n, tuple(m))


def pivot_up(topo: RankedTopology, i: int) -> RankedTopology:
    return _pivot(topo, i, up=True)


def pivot_down(topo: RankedTopology, i: int) -> RankedTopology:
    return _pivot(topo, i, up=False)


class BoundaryType(enum.IntEnum):
    TYPE1 = 1
    TYPE2 = 2
    TYPE3 = 3


@dataclass(frozen=True)
class BoundaryClass:
    kind: BoundaryType
    k: int


def classify_boundary(topo: RankedTopology, k: int) -> BoundaryClass:
    """Classify the face ``t_k = 0`` (``k = n`` denotes the theta coordinate)."""
    if not 1 <= k <= topo.n:
        raise ValueError(f"coordinate index {k} out of range")
    if k == 1 or k == topo.n:
        return BoundaryClass(BoundaryType.TYPE1, k)
    return BoundaryClass(BoundaryType.TYPE3 if topo.nested(k) else BoundaryType.TYPE2, k)


@dataclass(frozen=True)
class EdgeStructure:
    """Topology-only part of the edge table.

    Edge ``e`` runs from ``child[e]`` (born at merger ``birth[e]``, 0 for
    leaves) to ``parent[e]`` (merger ``death[e]``), so it spans the 0-based
    holding-time indices ``birth[e] .. death[e] - 1``.
    """

    child: tuple[int, ...]
    parent: tuple[int, ...]
    birth: np.ndarray
    death: np.ndarray
    span: np.ndarray  # bool, (2n - 2, n - 1)

    @cached_property
    def index(self) -> dict[int, int]:
        return {c: e for e, c in enumerate(self.child)}


@functools.lru_cache(maxsize=65536)
def edge_structure(topo: RankedTopology) -> EdgeStructure:
    n = topo.n
    born = {1 << j: 0 for j in range(n)}
    child, parent, birth, death = [], [], [], []
    for i, (a, b) in enumerate(topo.mergers, start=1):
        node = a | b
        for c in (a, b):
            child.append(c)
            parent.append(node)
            birth.append(born[c])
            death.append(i)
        born[node] = i
    birth_a = np.array(birth, dtype=np.intp)
    death_a = np.array(death, dtype=np.intp)
    cols = np.arange(n - 1)
    span = (cols[None, :] >= birth_a[:, None]) & (cols[None, :] < death_a[:, None])
    for arr in (birth_a, death_a, span):
        arr.flags.writeable = False
    return EdgeStructure(tuple(child), tuple(parent), birth_a, death_a, span)


@dataclass(frozen=True)
class EdgeTable:
    structure: EdgeStructure
    lengths: np.ndarray
    velocities: np.ndarray | None
    mutations: np.ndarray | None = None

    @property
    def child(self) -> tuple[int, ...]:
        return self.structure.child

    @property
    def parent(self) -> tuple[int, ...]:
        return self.structure.parent

    def spanned(self, e: int) -> range:
        return range(int(self.structure.birth[e]), int(self.structure.death[e]))

    def __len__(self) -> int:
        return len(self.structure.child)


def node_times(t: np.ndarray) -> np.ndarray:
    """Cumulative merger times with a leading zero for the leaves."""
    return np.concatenate(([0.0], np.cumsum(t)))


def build_edge_table(topo: RankedTopology, t, theta: float | None = None, vels=None) -> EdgeTable:
    """Edge lengths (and optional length velocities) for holding times ``t``.

    ``theta`` is accepted for signature symmetry with the targets; edge
    lengths do not depend on it.
    """
    st = edge_structure(topo)
    cum = node_times(np.asarray(t, dtype=float)[: topo.n - 1])
    lengths = cum[st.death] - cum[st.birth]
    vgam = None
    if vels is not None:
        cv = node_times(np.asarray(vels, dtype=float)[: topo.n - 1])
        vgam = cv[st.death] - cv[st.birth]
    return EdgeTable(st, lengths, vgam)


def pair_rates(n: int) -> np.ndarray:
    """``C(n + 1 - i, 2)`` for ``i = 1 .. n - 1``."""
    k = np.arange(n, 1, -1, dtype=float)
    return k * (k - 1) / 2


def log_prior(topo: RankedTopology, t) -> float:
    """Kingman coalescent log density of ``(topo, t)``; uniform over ranked topologies."""
    t = np.asarray(t, dtype=float)[: topo.n - 1]
    return -float(pair_rates(topo.n) @ t)


def prior_gradient(topo: RankedTopology, t) -> np.ndarray:
    return -pair_rates(topo.n)


def simulate_coalescent(n: int, seed=None) -> tuple[RankedTopology, np.ndarray]:
    """Draw ``(topology, holding times)`` from the Kingman coalescent."""
    if n < 2:
        raise ValueError("need at least two leaves")
    rng = np.random.default_rng(seed)
    lineages = [1 << j for j in range(n)]
    mergers = []
    t = np.empty(n - 1)
    for i, k in enumerate(range(n, 1, -1)):
        t[i] = rng.exponential(2.0 / (k * (k - 1)))
        x, y = rng.choice(k, size=2, replace=False)
        a, b = lineages[x], lineages[y]
        mergers.append(make_pair(a, b))
        for idx in sorted((x, y), reverse=True):
            lineages.pop(idx)
        lineages.append(a | b)
    return RankedTopology(n, tuple(mergers)), t


def enumerate_topologies(n: int) -> Iterator[RankedTopology]:
    """All ranked topologies on ``n`` leaves (there are ``prod_k C(k, 2)``)."""

    def rec(alive: tuple[int, ...], acc: tuple):
        if len(alive) == 1:
            yield RankedTopology(n, acc)
            return
        for x in range(len(alive)):
            for y in range(x + 1, len(alive)):
                a, b = alive[x], alive[y]
                rest = tuple(z for j, z in enumerate(alive) if j not in (x, y)) + (a | b,)
                yield from rec(rest, acc + (make_pair(a, b),))

    yield from rec(tuple(1 << j for j in range(n)), ())


def tree_height(t) -> float:
    return float(np.sum(t))


def to_newick(topo: RankedTopology, t, digits: int = 6) -> str:
    """Newick string with branch lengths; leaves labelled ``1..n``."""
    table = build_edge_table(topo, t)
    times = node_times(np.asarray(t, dtype=float))
    kids: dict[int, list[int]] = {}
    for c, p in zip(table.child, table.parent):
        kids.setdefault(p, []).append(c)
    born = {topo.node(i): i for i in range(1, topo.n)}

    def fmt(mask: int, parent_time: float) -> str:
        here = times[born.get(mask, 0)]
        length = f":{parent_time - here:.{digits}g}"
        if mask in kids:
            inner = ",".join(fmt(c, here) for c in sorted(kids[mask], key=lowbit))
            return f"({inner}){length}"
        return f"{mask_leaves(mask)[0]}{length}"

    root = topo.node(topo.n - 1)
    inner = ",".join(fmt(c, times[-1]) for c in sorted(kids[root], key=lowbit))
    return f"({inner});"
