"""Finite-sites coalescent posterior with the symmetric two-state mutation kernel.

The likelihood is computed by Felsenstein pruning, vectorized over sites and
over an optional leading batch axis of states that share one topology.  A
preorder pass gives every branch derivative at the cost of one extra sweep.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import HybridState
from .ism import DataError, _parse_header
from .targets import GammaPrior, TreeTarget
from .tau import RankedTopology, edge_structure, lowbit, node_times

NU = np.array([0.5, 0.5])


def transition(h: int, g: int, t: float, theta: float) -> float:
    """``Q_hg(t) = 1/2 + (1{h = g} - 1/2) exp(-theta t)``."""
    return 0.5 + ((h == g) - 0.5) * math.exp(-theta * t)


def transition_derivatives(h: int, g: int, t: float, theta: float) -> tuple[float, float]:
    """Partial derivatives of ``Q_hg`` in ``t`` and in ``theta``."""
    s = ((h == g) - 0.5) * math.exp(-theta * t)
    return -theta * s, -t * s


@dataclass(frozen=True, eq=False)
class FSMDataset:
    """Leaf types over sites: ``types[j - 1, s]`` is the type of leaf ``j`` at site ``s``."""

    types: np.ndarray
    alphabet: str = "01"

    def __post_init__(self):
        arr = np.array(self.types, dtype=np.int8, ndmin=2)
        if arr.ndim != 2:
            raise DataError("types must be a leaves x sites matrix")
        if arr.shape[0] < 2:
            raise DataError("need at least two leaves")
        if arr.shape[1] < 1:
            raise DataError("need at least one site")
        if self.alphabet != "01":
            raise DataError("only the binary alphabet '01' is supported")
        if np.any((arr < 0) | (arr > 1)):
            raise DataError("types must lie in the alphabet {0, 1}")
        arr.flags.writeable = False
        object.__setattr__(self, "types", arr)

    @property
    def n(self) -> int:
        return self.types.shape[0]

    @property
    def sites(self) -> int:
        return self.types.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, FSMDataset) and np.array_equal(self.types, other.types)

    def __hash__(self) -> int:
        return hash(self.types.tobytes())

    def rows(self) -> list[str]:
        return ["".join(self.alphabet[x] for x in row) for row in self.types]

    def type_counts(self) -> list[tuple[int, str]]:
        counts: dict[str, int] = {}
        for r in self.rows():
            counts[r] = counts.get(r, 0) + 1
        return sorted(((c, r) for r, c in counts.items()), key=lambda cr: (-cr[0], cr[1]))

    def polymorphic_sites(self) -> int:
        return int(np.sum(self.types.min(axis=0) != self.types.max(axis=0)))

    def summary(self) -> dict[str, int]:
        return {"n": self.n, "sites": self.sites, "types": len(self.type_counts()), "polymorphic": self.polymorphic_sites()}

    @classmethod
    def from_rows(cls, rows) -> FSMDataset:
        return cls(np.array([[int(ch) for ch in r] for r in rows], dtype=np.int8))


@dataclass(frozen=True)
class _Layout:
    child_node: np.ndarray  # per edge; leaves are nodes 0..n-1, merger i is node n - 1 + i
    span: np.ndarray  # float (edges, n - 1)
    birth: np.ndarray
    death: np.ndarray
    first_pair: tuple[int, int]  # 0-based leaf indices joined by merger 1


@functools.lru_cache(maxsize=16384)
def _layout(topo: RankedTopology) -> _Layout:
    n = topo.n
    st = edge_structure(topo)
    node_of = {1 << j: j for j in range(n)}
    for i in range(1, n):
        node_of[topo.node(i)] = n - 1 + i
    child = np.array([node_of[c] for c in st.child], dtype=np.intp)
    a, b = topo.mergers[0]
    first = (lowbit(a).bit_length() - 1, lowbit(b).bit_length() - 1)
    return _Layout(child, st.span.astype(float), st.birth, st.death, first)


def _through(e, om, x):
    """Apply the kernel with decay ``e`` and ``om = 1 - e`` to partials ``x`` (last axis = type)."""
    return 0.5 * om[..., None] * x.sum(-1, keepdims=True) + e[..., None] * x


class FSMTarget(TreeTarget):
    """Posterior ``pi(E, t, theta | D)`` under the finite-sites model."""

    def __init__(self, data: FSMDataset, prior=None, c: float = 4.0, K: float = 1.0, speeds=None, theta_speed: float = 1.0):
        self.data = data
        super().__init__(data.n, prior if prior is not None else GammaPrior(1.0, 0.1), c, K, speeds, theta_speed)
        self._leaf = np.eye(2)[data.types]  # (n, S, 2)
        self._polymorphic = data.polymorphic_sites() > 0
        self._last: tuple | None = None

    # -- pruning ---------------------------------------------------------------
    def _edge_terms(self, topo, t, theta):
        """Edge lengths and decays for a batch: ``t`` is (B, n - 1), ``theta`` is (B,)."""
        lay = _layout(topo)
        cum = np.concatenate((np.zeros((t.shape[0], 1)), np.cumsum(t, axis=1)), axis=1)
        lengths = cum[:, lay.death] - cum[:, lay.birth]
        # 1 - e via expm1 keeps short branches accurate
        om = -np.expm1(-theta[:, None] * lengths)
        return lay, lengths, (1.0 - om, om)

    def _upward(self, lay, decay):
        """Normalized postorder partials and per-site log-likelihoods."""
        n, S = self.n, self.data.sites
        decay, om = decay
        B = decay.shape[0]
        up = np.empty((B, 2 * n - 1, S, 2))
        up[:, :n] = self._leaf
        msg = np.empty((B, 2 * n - 2, S, 2))
        logscale = np.zeros((B, S))
        for i in range(1, n):
            e0, e1 = 2 * i - 2, 2 * i - 1
            for e in (e0, e1):
                msg[:, e] = _through(decay[:, e, None], om[:, e, None], up[:, lay.child_node[e]])
            p = msg[:, e0] * msg[:, e1]
            z = p.sum(-1)
            up[:, n - 1 + i] = p / z[..., None]
            logscale += np.log(z)
        root = up[:, 2 * n - 2] @ NU
        self.counters["site_ops"] += B * S * (2 * n - 1)
        return up, msg, logscale + np.log(root)

    def _downward(self, lay, decay, up, msg):
        """Per-edge, per-site ratio ``e r / (1 - r e)`` from outside partials."""
        n = self.n
        decay, om = decay
        B, _, S, _ = up.shape
        out = np.empty_like(up)
        out[:, 2 * n - 2] = NU
        R = np.empty((B, 2 * n - 2, S))
        for i in range(n - 1, 0, -1):
            p = n - 1 + i
            e0, e1 = 2 * i - 2, 2 * i - 1
            for e, sib in ((e0, e1), (e1, e0)):
                A = out[:, p] * msg[:, sib]
                A /= A.sum(-1, keepdims=True)
                U = up[:, lay.child_node[e]]
                a = np.sum(A * U, -1)
                b = A.sum(-1) * U.sum(-1) - a
                r = (b - a) / (a + b)
                d = decay[:, e, None]
                R[:, e] = d * r / (1.0 - r * d)
                out[:, lay.child_node[e]] = _through(d, om[:, e, None], A)
        self.counters["site_ops"] += B * S * (2 * n - 1)
        return R

    def site_log_likelihoods(self, topo, t, theta) -> np.ndarray:
        t = np.atleast_2d(np.asarray(t, dtype=float))
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        lay, _, decay = self._edge_terms(topo, t, theta)
        return self._upward(lay, decay)[2]

    def log_likelihood(self, topo, t, theta) -> float:
        return float(self.site_log_likelihoods(topo, t, theta).sum())

    def batch_gradient(self, topo, t, theta) -> np.ndarray:
        """Gradient of the log posterior for a batch of states: (B, n)."""
        lay, lengths, decay = self._edge_terms(topo, t, theta)
        up, msg, _ = self._upward(lay, decay)
        R0 = self._downward(lay, decay, up, msg).sum(-1)  # (B, edges)
        g = np.empty((t.shape[0], self.n))
        g[:, :-1] = theta[:, None] * (R0 @ lay.span) - self._coef
        g[:, -1] = np.sum(lengths * R0, axis=1) + np.array([self.prior.dlogpdf(x) for x in theta])
        return g

    # -- target interface -----------------------------------------------------------
    def log_density(self, mode, coords) -> float:
        self.counters["density"] += 1
        coords = np.asarray(coords, dtype=float)
        t, th = coords[:-1], coords[-1]
        if np.any(t < 0) or th < 0:
            return -math.inf
        if th == 0 and self._polymorphic:
            return -math.inf
        with np.errstate(divide="ignore"):
            ll = self.log_likelihood(mode, t, th)
        return ll - float(self._coef @ t) + self.prior.logpdf(th)

    def grad_log_density(self, mode, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        key = (mode, coords.tobytes())
        if self._last is not None and self._last[0] == key:
            return self._last[1]
        self.counters["gradient"] += 1
        g = self.batch_gradient(mode, coords[None, :-1], coords[-1:])[0]
        self._last = (key, g)
        return g

    def guards(self, mode) -> np.ndarray:
        g = np.zeros(self.n, dtype=bool)
        a, b = _layout(mode).first_pair
        g[0] = bool(np.any(self.data.types[a] != self.data.types[b]))
        g[-1] = self._polymorphic or self.prior.vanishes_at_zero
        return g

    def flip_bounds(self, state: HybridState, T: float) -> np.ndarray:
        """Dominating rates from interval pruning with window-extremal kernel entries."""
        self.counters["bound"] += 1
        lay = _layout(state.mode)
        n, S = self.n, self.data.sites
        x, v = state.coords, state.vels
        t, th = x[:-1], x[-1]
        th_lo = max(th + min(v[-1] * T, 0.0), 0.0)
        th_hi = th + max(v[-1] * T, 0.0)
        cum = node_times(t)
        cv = node_times(v[:-1])
        lengths = cum[lay.death] - cum[lay.birth]
        dl = (cv[lay.death] - cv[lay.birth]) * T
        l_lo = np.maximum(lengths + np.minimum(dl, 0.0), 0.0)
        l_hi = lengths + np.maximum(dl, 0.0)
        e_lo = np.exp(-th_hi * l_hi)
        e_hi = np.exp(-th_lo * l_lo)

        up_lo = np.empty((2 * n - 1, S, 2))
        up_hi = np.empty((2 * n - 1, S, 2))
        up_lo[:n] = self._leaf
        up_hi[:n] = self._leaf
        m_lo = np.empty((2 * n - 2, S, 2))
        m_hi = np.empty((2 * n - 2, S, 2))

        def through(elo, ehi, xlo, xhi):
            # same-type weight rises with e, cross-type weight falls
            ylo = 0.5 * (1 + elo) * xlo + 0.5 * (1 - ehi) * xlo[..., ::-1]
            yhi = 0.5 * (1 + ehi) * xhi + 0.5 * (1 - elo) * xhi[..., ::-1]
            return ylo, yhi

        for i in range(1, n):
            e0, e1 = 2 * i - 2, 2 * i - 1
            for e in (e0, e1):
                c = lay.child_node[e]
                m_lo[e], m_hi[e] = through(e_lo[e], e_hi[e], up_lo[c], up_hi[c])
            plo = m_lo[e0] * m_lo[e1]
            phi = m_hi[e0] * m_hi[e1]
            z = phi.sum(-1, keepdims=True)
            up_lo[n - 1 + i] = plo / z
            up_hi[n - 1 + i] = phi / z

        out_lo = np.empty_like(up_lo)
        out_hi = np.empty_like(up_hi)
        out_lo[2 * n - 2] = NU
        out_hi[2 * n - 2] = NU
        r_lo = np.empty((2 * n - 2, S))
        r_hi = np.empty((2 * n - 2, S))
        for i in range(n - 1, 0, -1):
            p = n - 1 + i
            e0, e1 = 2 * i - 2, 2 * i - 1
            for e, sib in ((e0, e1), (e1, e0)):
                Alo = out_lo[p] * m_lo[sib]
                Ahi = out_hi[p] * m_hi[sib]
                z = Ahi.sum(-1, keepdims=True)
                Alo, Ahi = Alo / z, Ahi / z
                c = lay.child_node[e]
                Ulo, Uhi = up_lo[c], up_hi[c]
                a_lo = np.sum(Alo * Ulo, -1)
                a_hi = np.sum(Ahi * Uhi, -1)
                b_lo = np.sum(Alo * Ulo[..., ::-1], -1)
                b_hi = np.sum(Ahi * Uhi[..., ::-1], -1)
                with np.errstate(divide="ignore", invalid="ignore"):
                    r_lo[e] = (b_lo - a_hi) / (a_hi + b_lo)
                    r_hi[e] = (b_hi - a_lo) / (a_lo + b_hi)
                out_lo[c], out_hi[c] = through(e_lo[e], e_hi[e], Alo, Ahi)
        self.counters["site_ops"] += 2 * S * (2 * n - 1)
        r_lo = np.nan_to_num(np.clip(r_lo, -1.0, 1.0), nan=-1.0)
        r_hi = np.nan_to_num(np.clip(r_hi, -1.0, 1.0), nan=1.0)

        # g(x, e, r) = x e r / (1 - r e) is monotone in each argument for fixed signs,
        # so its extremes over the box sit at corners
        def extremes(x_lo, x_hi):
            vals = []
            for xx in (x_lo, x_hi):
                for ee in (e_lo, e_hi):
                    for rr in (r_lo, r_hi):
                        ee_b = ee[:, None]
                        xx_b = np.broadcast_to(np.asarray(xx, dtype=float), ee.shape)[:, None]
                        with np.errstate(divide="ignore", invalid="ignore"):
                            vals.append(xx_b * ee_b * rr / (1.0 - rr * ee_b))
            stack = np.stack(vals)
            nan = np.isnan(stack)
            lo = np.where(nan, -np.inf, stack).min(0)
            hi = np.where(nan, np.inf, stack).max(0)
            return lo.sum(-1), hi.sum(-1)

        gt_lo, gt_hi = extremes(th_lo, th_hi)  # per edge, summed over sites
        G_lo = gt_lo @ lay.span
        G_hi = gt_hi @ lay.span
        C = self._coef
        vt = v[:-1]
        with np.errstate(invalid="ignore"):
            rates = np.where(vt > 0, vt * (C - G_lo), -vt * (G_hi - C))
        out = np.empty(n)
        out[:-1] = np.where(vt == 0, 0.0, np.maximum(np.nan_to_num(rates, nan=np.inf), 0.0))

        vth = v[-1]
        if vth == 0:
            out[-1] = 0.0
            return out
        gl_lo, gl_hi = extremes(l_lo, l_hi)
        dlo, dhi = self.prior.dlog_range(th_lo, th_hi)
        if vth > 0:
            val = vth * (-dlo - gl_lo.sum())
        else:
            val = -vth * (dhi + gl_hi.sum())
        out[-1] = max(val, 0.0) if not math.isnan(val) else math.inf
        return out

    def initial_theta(self) -> float:
        # Watterson-style start from polymorphic sites, scaled to the kernel's rate
        k = self.data.polymorphic_sites()
        return max(k / sum(1.0 / j for j in range(1, self.n)), 0.5)


def simulate_fsm_data(topo: RankedTopology, t, theta: float, sites: int, seed=None) -> FSMDataset:
    """Root types from ``nu``; per site, Poisson(theta / (2|S|) * l) type flips per edge."""
    rng = np.random.default_rng(seed)
    n = topo.n
    lay = _layout(topo)
    cum = node_times(np.asarray(t, dtype=float))
    lengths = cum[lay.death] - cum[lay.birth]
    types = np.empty((2 * n - 1, sites), dtype=np.int8)
    types[2 * n - 2] = rng.integers(0, 2, size=sites)
    rate = theta / (2.0 * sites)
    for i in range(n - 1, 0, -1):
        for e in (2 * i - 2, 2 * i - 1):
            flips = rng.poisson(rate * lengths[e], size=sites) % 2
            types[lay.child_node[e]] = types[n - 1 + i] ^ flips.astype(np.int8)
    return FSMDataset(types[:n].copy())


def write_fsm(data: FSMDataset, path) -> None:
    lines = [f"n={data.n} sites={data.sites} model=fsm alphabet={data.alphabet}"] + data.rows()
    Path(path).write_text("\n".join(lines) + "\n")


def read_fsm(path) -> FSMDataset:
    text = Path(path).read_text().split("\n")
    header = _parse_header(text[0])
    if header.get("model") != "fsm":
        raise DataError(f"{path}: not a finite-sites dataset")
    try:
        n, sites = int(header["n"]), int(header["sites"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: header needs integer n and sites") from exc
    alphabet = header.get("alphabet", "01")
    if alphabet != "01":
        raise DataError(f"{path}: unsupported alphabet {alphabet!r}")
    rows = [r.strip() for r in text[1 : 1 + n]]
    if len(rows) < n or any(len(r) != sites for r in rows):
        raise DataError(f"{path}: expected {n} rows of {sites} characters")
    if any(ch not in alphabet for r in rows for ch in r):
        raise DataError(f"{path}: characters outside the alphabet {alphabet!r}")
    return FSMDataset.from_rows(rows)
