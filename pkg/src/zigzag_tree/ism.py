"""Infinite-sites coalescent posterior over (ranked topology, holding times, theta)."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .engine import HybridState
from .targets import FlatPrior, TreeTarget
from .tau import RankedTopology, edge_structure, make_pair, node_times, simulate_coalescent


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ISMDataset:
    """Per-leaf sets of mutation positions in ``(0, 1)``; leaf ``j`` is ``leaves[j - 1]``."""

    leaves: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "leaves", tuple(tuple(sorted(map(float, s))) for s in self.leaves))
        if len(self.leaves) < 2:
            raise DataError("need at least two leaves")
        for s in self.leaves:
            if len(set(s)) != len(s):
                raise DataError("a leaf lists the same mutation twice")
            if any(not 0 < x < 1 for x in s):
                raise DataError("mutation positions must lie in (0, 1)")
        full = (1 << self.n) - 1
        masks = sorted(set(self.carriers.values()))
        for x in masks:
            if x == full:
                raise DataError("a mutation carried by every leaf cannot sit on any branch")
        for a_i, a in enumerate(masks):
            for b in masks[a_i + 1 :]:
                inter = a & b
                if inter and inter != a and inter != b:
                    raise DataError("carrier sets cross: data violate the infinite-sites model")

    @property
    def n(self) -> int:
        return len(self.leaves)

    @cached_property
    def carriers(self) -> dict[float, int]:
        out: dict[float, int] = {}
        for j, s in enumerate(self.leaves):
            for x in s:
                out[x] = out.get(x, 0) | (1 << j)
        return out

    @cached_property
    def clade_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for mask in self.carriers.values():
            counts[mask] = counts.get(mask, 0) + 1
        return counts

    @property
    def n_mutations(self) -> int:
        return len(self.carriers)

    def type_counts(self) -> list[tuple[int, tuple[float, ...]]]:
        """Distinct leaf types with multiplicities, most frequent first."""
        counts: dict[tuple[float, ...], int] = {}
        for s in self.leaves:
            counts[s] = counts.get(s, 0) + 1
        return sorted(((c, s) for s, c in counts.items()), key=lambda cs: (-cs[0], cs[1]))

    def summary(self) -> dict[str, int]:
        return {"n": self.n, "types": len(self.type_counts()), "mutations": self.n_mutations}

    @classmethod
    def from_type_counts(cls, pairs) -> ISMDataset:
        leaves = []
        for count, typ in pairs:
            leaves.extend([tuple(typ)] * int(count))
        return cls(tuple(leaves))


@dataclass(frozen=True)
class MutationAssignment:
    counts: np.ndarray  # per edge, aligned with edge_structure(topo)
    consistent: bool
    first_merger: int
    total: int


def assign_mutations(topo: RankedTopology, data: ISMDataset) -> MutationAssignment:
    """Place each mutation on the edge whose child subtends exactly its carriers."""
    st = edge_structure(topo)
    m = np.zeros(len(st.child), dtype=float)
    consistent = True
    for mask, cnt in data.clade_counts.items():
        e = st.index.get(mask)
        if e is None:
            consistent = False
            continue
        m[e] += cnt
    # edges 0 and 1 are the children of the first merger
    return MutationAssignment(m, consistent, int(m[0] + m[1]), data.n_mutations)


@dataclass(frozen=True)
class _TopoInfo:
    consistent: bool
    birth: np.ndarray  # mutated edges only
    death: np.ndarray
    m: np.ndarray
    span: np.ndarray  # (k, n - 1) float
    per_coord: tuple[np.ndarray, ...]
    guards: np.ndarray  # holding-time coordinates only


class ISMTarget(TreeTarget):
    """Posterior ``pi(E, t, theta | D)`` under the infinite-sites model."""

    def __init__(self, data: ISMDataset, prior=None, c: float = 4.0, K: float = 1.0, speeds=None, theta_speed: float | None = None):
        self.data = data
        if theta_speed is None:
            theta_speed = 2.0 * watterson(data) or 1.0
        super().__init__(data.n, prior if prior is not None else FlatPrior(), c, K, speeds, theta_speed)
        self.M = data.n_mutations
        self._k = np.arange(self.n, 1, -1, dtype=float)
        self._info = functools.lru_cache(maxsize=16384)(self._build_info)

    def _build_info(self, topo: RankedTopology) -> _TopoInfo:
        st = edge_structure(topo)
        asg = assign_mutations(topo, self.data)
        idx = np.flatnonzero(asg.counts > 0)
        span = st.span[idx].astype(float)
        per_coord = tuple(np.flatnonzero(st.span[idx, j]) for j in range(self.n - 1))
        guards = np.zeros(self.n - 1, dtype=bool)
        guards[0] = asg.first_merger > 0
        for i in range(2, self.n):
            if topo.nested(i):
                # the shorter child branch of merger i is the one from merger i - 1
                guards[i - 1] = asg.counts[st.index[topo.node(i - 1)]] > 0
        return _TopoInfo(asg.consistent, st.birth[idx], st.death[idx], asg.counts[idx], span, per_coord, guards)

    def is_consistent(self, mode) -> bool:
        return self._info(mode).consistent

    def guards(self, mode) -> np.ndarray:
        theta_guard = self.M > 0 or self.prior.vanishes_at_zero
        return np.append(self._info(mode).guards, theta_guard)

    def _rate_coef(self, theta):
        return self._k * (self._k - 1 + theta) / 2

    def log_density(self, mode, coords) -> float:
        self.counters["density"] += 1
        info = self._info(mode)
        if not info.consistent:
            return -math.inf
        coords = np.asarray(coords, dtype=float)
        t, th = coords[:-1], coords[-1]
        if np.any(t < 0) or th < 0:
            return -math.inf
        cum = node_times(t)
        lengths = cum[info.death] - cum[info.birth]
        with np.errstate(divide="ignore"):
            ll = float(info.m @ np.log(th * lengths / 2)) if info.m.size else 0.0
        return ll - float(self._rate_coef(th) @ t) + self.prior.logpdf(th)

    def grad_log_density(self, mode, coords) -> np.ndarray:
        info = self._info(mode)
        coords = np.asarray(coords, dtype=float)
        t, th = coords[:-1], coords[-1]
        cum = node_times(t)
        lengths = cum[info.death] - cum[info.birth]
        g = np.empty(self.n)
        g[:-1] = info.span.T @ (info.m / lengths) - self._rate_coef(th)
        g[-1] = self.M / th - 0.5 * float(self._k @ t) + self.prior.dlogpdf(th)
        return g

    def flip_rate(self, state: HybridState, i: int) -> float:
        self.counters["rate"] += 1
        info = self._info(state.mode)
        x = state.coords
        v = state.vels[i]
        if i == self.n - 1:
            th = x[-1]
            inner = 0.5 * float(self._k @ x[:-1]) - self.M / th - self.prior.dlogpdf(th)
            return max(v * inner, 0.0)
        k = self._k[i]
        inner = k * (k - 1 + x[-1]) / 2
        idx = info.per_coord[i]
        if idx.size:
            cum = node_times(x[:-1])
            inner -= float(np.sum(info.m[idx] / (cum[info.death[idx]] - cum[info.birth[idx]])))
        return max(v * inner, 0.0)

    def flip_bounds(self, state: HybridState, T: float) -> np.ndarray:
        """Constant rates dominating every flip rate on ``[0, T]``."""
        self.counters["bound"] += 1
        info = self._info(state.mode)
        x, v = state.coords, state.vels
        t, th = x[:-1], x[-1]
        vt, vth = v[:-1], v[-1]
        pos = vt > 0
        out = np.empty(self.n)

        th_ext = np.where(pos, th + max(vth * T, 0.0), th + min(vth * T, 0.0))
        a = self._k * (self._k - 1 + th_ext) / 2
        if info.m.size:
            cum = node_times(t)
            cv = node_times(vt)
            lengths = cum[info.death] - cum[info.birth]
            dl = (cv[info.death] - cv[info.birth]) * T
            b_pos = info.span.T @ (info.m / (lengths + np.maximum(dl, 0.0)))
            with np.errstate(divide="ignore"):
                b_neg = info.span.T @ (info.m / (lengths + np.minimum(dl, 0.0)))
            b = np.where(pos, b_pos, b_neg)
        else:
            b = 0.0
        out[:-1] = np.maximum(vt * (a - b), 0.0)

        if vth == 0:
            out[-1] = 0.0
            return out
        th_end = th + vth * T
        ext = np.maximum(vt * T, 0.0) if vth > 0 else np.minimum(vt * T, 0.0)
        lin = 0.5 * float(self._k @ (t + ext))
        mut = 0.0 if self.M == 0 else self.M / th_end
        dlo, dhi = self.prior.dlog_range(min(th, th_end), max(th, th_end))
        if vth > 0:
            out[-1] = max(vth * (lin - mut - dlo), 0.0)
        else:
            out[-1] = max(vth * (lin - mut - dhi), 0.0)
        return out

    def initial_theta(self) -> float:
        w = watterson(self.data)
        return w if w > 0 else 1.0

    def initial_tree(self, rng, tries: int = 200):
        for _ in range(tries):
            topo, t = simulate_coalescent(self.n, rng)
            if self.is_consistent(topo):
                return topo, t
        return consistent_tree(self.data, rng)


def watterson(data: ISMDataset) -> float:
    """Segregating-sites estimate ``M / sum_{k < n} 1/k``."""
    return data.n_mutations / sum(1.0 / k for k in range(1, data.n))


def consistent_tree(data: ISMDataset, rng) -> tuple[RankedTopology, np.ndarray]:
    """Random ranked topology whose clades include every carrier set.

    Pairs are merged uniformly among lineages sharing the same smallest
    enclosing carrier set; holding times are drawn from the prior.
    """
    n = data.n
    full = (1 << n) - 1
    clades = sorted(set(data.clade_counts) | {full}, key=lambda m: bin(m).count("1"))

    def enclosure(mask: int) -> int:
        for c in clades:
            if c != mask and c & mask == mask:
                return c
        return full

    lineages = [1 << j for j in range(n)]
    encl = [enclosure(x) for x in lineages]
    mergers = []
    t = np.empty(n - 1)
    for i, k in enumerate(range(n, 1, -1)):
        t[i] = rng.exponential(2.0 / (k * (k - 1)))
        groups: dict[int, list[int]] = {}
        for idx, e in enumerate(encl):
            groups.setdefault(e, []).append(idx)
        keys = sorted(g for g in groups if len(groups[g]) > 1)
        w = np.array([len(groups[g]) * (len(groups[g]) - 1) / 2 for g in keys])
        g = keys[rng.choice(len(keys), p=w / w.sum())]
        x, y = rng.choice(groups[g], size=2, replace=False)
        a, b = lineages[x], lineages[y]
        mergers.append(make_pair(a, b))
        for idx in sorted((x, y), reverse=True):
            lineages.pop(idx)
            encl.pop(idx)
        lineages.append(a | b)
        encl.append(enclosure(a | b) if (a | b) != full else full)
    return RankedTopology(n, tuple(mergers)), t


def simulate_ism_data(topo: RankedTopology, t, theta: float, seed=None) -> ISMDataset:
    """Poisson(theta * l / 2) mutations per edge at U(0, 1) positions."""
    rng = np.random.default_rng(seed)
    st = edge_structure(topo)
    cum = node_times(np.asarray(t, dtype=float))
    lengths = cum[st.death] - cum[st.birth]
    leaves: list[list[float]] = [[] for _ in range(topo.n)]
    for e, child in enumerate(st.child):
        k = rng.poisson(theta * lengths[e] / 2) if theta > 0 else 0
        for x in rng.uniform(0.0, 1.0, size=k):
            for j in range(topo.n):
                if child >> j & 1:
                    leaves[j].append(float(x))
    return ISMDataset(tuple(tuple(s) for s in leaves))


def write_ism(data: ISMDataset, path) -> None:
    lines = [f"n={data.n} model=ism"]
    lines += [" ".join(repr(x) for x in s) for s in data.leaves]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ism(path) -> ISMDataset:
    text = Path(path).read_text().split("\n")
    header = _parse_header(text[0])
    if header.get("model") != "ism":
        raise DataError(f"{path}: not an infinite-sites dataset")
    try:
        n = int(header["n"])
    except ValueError as exc:
        raise DataError(f"{path}: header needs an integer n") from exc
    body = text[1 : 1 + n]
    if len(body) < n:
        raise DataError(f"{path}: expected {n} leaf lines")
    try:
        leaves = tuple(tuple(float(x) for x in line.split()) for line in body)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return ISMDataset(leaves)


def _parse_header(line: str) -> dict[str, str]:
    out = {}
    for tok in line.split():
        if "=" not in tok:
            raise DataError(f"malformed header token {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    if "n" not in out or "model" not in out:
        raise DataError("header needs n=<int> and model=<ism|fsm>")
    return out
