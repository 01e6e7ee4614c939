"""Metropolis-Hastings baseline over trees and the zig-zag/MH hybrid.

Three proposals: a reflected random walk on theta, a sequential
truncated-normal perturbation of merger times under a fixed ranked
topology, and subtree-prune-regraft (SPR).  Every proposal is followed by
its own accept/reject step.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_ndtr, ndtri

from .engine import EventKind, EventTrace, HybridState, JumpProcess, TraceBuilder, simulate
from .tau import RankedTopology, make_pair

logger = logging.getLogger(__name__)

TARGET_ACCEPTANCE = 0.25


@dataclass
class MHConfig:
    sigma_theta: float = 1.0
    sigma_t: float = 0.5
    kappa: float = 10.0
    accepts: dict = field(default_factory=lambda: {"theta": 0, "times": 0, "spr": 0})
    tries: dict = field(default_factory=lambda: {"theta": 0, "times": 0, "spr": 0})

    def __post_init__(self):
        if self.sigma_theta <= 0 or self.sigma_t <= 0:
            raise ValueError("proposal scales must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")

    def acceptance(self, move: str) -> float:
        n = self.tries[move]
        return self.accepts[move] / n if n else float("nan")

    def count(self, move: str, accepted: bool) -> None:
        self.tries[move] += 1
        self.accepts[move] += int(accepted)

    def fresh(self) -> MHConfig:
        return replace(self, accepts={k: 0 for k in self.accepts}, tries={k: 0 for k in self.tries})


# Hyperparameters used for the benchmark datasets (sigma_theta, sigma_t, kappa).
PRESETS = {
    "ward": MHConfig(8.0, 0.6, 10.0),
    "ism-n550": MHConfig(6.0, 0.25, 10.0),
    "ism-n55": MHConfig(18.0, 0.4, 10.0),
    "griffiths-tavare": MHConfig(4.0, 0.7, 100.0),
    "fsm-n500": MHConfig(4.0, 0.3, 100.0),
    "fsm-n50": MHConfig(14.0, 0.6, 100.0),
}
HYBRID_SIGMA_THETA = {"ward": 10.0, "ism-n550": 6.0, "ism-n55": 18.0, "griffiths-tavare": 4.0, "fsm-n500": 3.0, "fsm-n50": 14.0}
ZIGZAG_THETA_SPEED = {"ward": 8.0, "ism-n550": 6.0, "ism-n55": 40.0, "griffiths-tavare": 4.0, "fsm-n500": 4.0, "fsm-n50": 20.0}


def preset(name: str, sampler: str = "mh") -> MHConfig:
    cfg = PRESETS[name].fresh()
    if sampler == "hybrid":
        cfg.sigma_theta = HYBRID_SIGMA_THETA[name]
    return cfg


# -- proposals -------------------------------------------------------------------

def theta_step(model, state: HybridState, sigma: float, rng, cfg: MHConfig | None = None, lp: float | None = None):
    """Reflected Gaussian walk on theta; the reflection keeps the proposal symmetric.

    Steps return ``(state, accepted, log density of the returned state)``;
    passing the current ``lp`` saves one evaluation.
    """
    x = state.coords
    if lp is None:
        lp = model.log_density(state.mode, x)
    new = x.copy()
    new[-1] = abs(x[-1] + sigma * rng.standard_normal())
    lp_new = model.log_density(state.mode, new) if new[-1] > 0 else -math.inf
    ok = math.log(rng.random()) < lp_new - lp
    if cfg is not None:
        cfg.count("theta", ok)
    if ok:
        return HybridState(state.mode, new, state.vels), True, lp_new
    return state, False, lp


def _time_scales(n: int, sigma: float) -> np.ndarray:
    i = np.arange(2, n, dtype=float)
    var = np.concatenate(([sigma**2 / (n * (n - 1) ** 2)], sigma**2 / ((n - 1) * (n - i + 1) * (n - i))))
    return np.sqrt(var)


def _trunc_logpdf(x: float, mu: float, sd: float, lower: float) -> float:
    z = (x - mu) / sd
    return -0.5 * z * z - math.log(sd) - 0.5 * math.log(2 * math.pi) - float(log_ndtr((mu - lower) / sd))


def _trunc_sample(mu: float, sd: float, lower: float, rng) -> float:
    alpha = (lower - mu) / sd
    # Z > alpha via inversion of the mirrored tail, in log space
    log_tail = float(log_ndtr(-alpha))
    p = math.exp(math.log(rng.random()) + log_tail)
    if p <= 0.0:
        return lower
    return max(mu - sd * float(ndtri(p)), lower)


def times_step(model, state: HybridState, sigma: float, rng, cfg: MHConfig | None = None, lp: float | None = None):
    """Perturb merger times in rank order, each truncated below by the previous proposal."""
    n = model.n
    x = state.coords
    if lp is None:
        lp = model.log_density(state.mode, x)
    tau = np.cumsum(x[: n - 1])
    sd = _time_scales(n, sigma)
    prop = np.empty(n - 1)
    log_q_fwd = log_q_rev = 0.0
    prev_new = prev_old = 0.0
    for i in range(n - 1):
        prop[i] = _trunc_sample(tau[i], sd[i], prev_new, rng)
        log_q_fwd += _trunc_logpdf(prop[i], tau[i], sd[i], prev_new)
        log_q_rev += _trunc_logpdf(tau[i], prop[i], sd[i], prev_old)
        prev_new, prev_old = prop[i], tau[i]
    new = x.copy()
    new[: n - 1] = np.diff(prop, prepend=0.0)
    ok = False
    if np.all(new[: n - 1] > 0):
        lp_new = model.log_density(state.mode, new)
        ok = math.log(rng.random()) < lp_new - lp + log_q_rev - log_q_fwd
    if cfg is not None:
        cfg.count("times", ok)
    if ok:
        return HybridState(state.mode, new, state.vels), True, lp_new
    return state, False, lp


@dataclass
class _Tree:
    """Mutable node-time tree: leaves ``0..n-1``, merger ``i`` is node ``n - 1 + i``."""

    n: int
    kids: dict
    parent: dict
    time: dict

    @classmethod
    def from_ranked(cls, topo: RankedTopology, t) -> _Tree:
        n = topo.n
        node_of = {1 << j: j for j in range(n)}
        kids, parent, tm = {}, {}, {j: 0.0 for j in range(n)}
        cum = np.cumsum(t)
        for i, (a, b) in enumerate(topo.mergers, start=1):
            v = n - 1 + i
            node_of[a | b] = v
            kids[v] = [node_of[a], node_of[b]]
            parent[node_of[a]] = v
            parent[node_of[b]] = v
            tm[v] = float(cum[i - 1])
        parent[2 * n - 2] = None
        return cls(n, kids, parent, tm)

    def root(self) -> int:
        return next(v for v, p in self.parent.items() if p is None)

    def subtree(self, v: int) -> set:
        out, stack = set(), [v]
        while stack:
            u = stack.pop()
            out.add(u)
            stack.extend(self.kids.get(u, ()))
        return out

    def to_ranked(self) -> tuple[RankedTopology, np.ndarray]:
        mask = {j: 1 << j for j in range(self.n)}
        internal = sorted(self.kids, key=lambda v: self.time[v])
        mergers = []
        for v in internal:
            a, b = self.kids[v]
            mask[v] = mask[a] | mask[b]
            mergers.append(make_pair(mask[a], mask[b]))
        times = np.array([self.time[v] for v in internal])
        return RankedTopology(self.n, tuple(mergers)), np.diff(times, prepend=0.0)


def _attach_logpdf(tree: _Tree, c: int, u: int, t_new: float) -> float:
    """Log density of regrafting ``c`` onto the edge above ``u`` at ``t_new`` in the pruned tree."""
    lo = max(tree.time[c], tree.time[u])
    pu = tree.parent[u]
    if pu is None:
        return -(t_new - lo) if t_new > lo else -math.inf
    hi = tree.time[pu]
    return -math.log(hi - lo) if lo < t_new < hi else -math.inf


def _prune(tree: _Tree, c: int) -> tuple[int, int]:
    """Detach ``c`` with its parent ``p``; returns ``(p, sibling)``."""
    p = tree.parent[c]
    s = next(k for k in tree.kids[p] if k != c)
    g = tree.parent[p]
    tree.parent[s] = g
    if g is not None:
        tree.kids[g] = [s if k == p else k for k in tree.kids[g]]
    del tree.kids[p]
    del tree.parent[p]
    return p, s


def _regraft(tree: _Tree, c: int, p: int, u: int, t_new: float) -> None:
    g = tree.parent[u]
    tree.kids[p] = [c, u]
    tree.parent[p] = g
    tree.parent[c] = p
    tree.parent[u] = p
    tree.time[p] = t_new
    if g is not None:
        tree.kids[g] = [p if k == u else k for k in tree.kids[g]]


def propose_spr(topo: RankedTopology, t, rng):
    """Draw an SPR move; returns ``(topo', t', log q-ratio)`` or ``None`` when infeasible.

    The pruned node is uniform over the ``2n - 2`` non-root nodes and the
    target slot uniform over all ``2n - 1`` nodes (the root slot being the
    edge above the root).  Slots inside the pruned subtree, or the pruned
    parent itself, are infeasible.
    """
    tree = _Tree.from_ranked(topo, t)
    n = topo.n
    root = tree.root()
    nonroot = [v for v in range(2 * n - 1) if v != root]
    c = nonroot[rng.integers(len(nonroot))]
    target = int(rng.integers(2 * n - 1))
    p = tree.parent[c]
    if target == p or target in tree.subtree(c):
        return None
    p, s = _prune(tree, c)
    u = target
    lo = max(tree.time[c], tree.time[u])
    pu = tree.parent[u]
    if pu is None:
        t_new = lo + rng.exponential(1.0)
    else:
        hi = tree.time[pu]
        if not hi > lo:
            return None
        t_new = rng.uniform(lo, hi)
    t_old = tree.time[p]
    log_fwd = _attach_logpdf(tree, c, u, t_new)
    log_rev = _attach_logpdf(tree, c, s, t_old)
    _regraft(tree, c, p, u, t_new)
    new_topo, new_t = tree.to_ranked()
    return new_topo, new_t, log_rev - log_fwd


def spr_step(model, state: HybridState, rng, cfg: MHConfig | None = None, lp: float | None = None):
    """SPR with instant rejection of infeasible or data-incompatible proposals."""
    n = model.n
    x = state.coords
    if lp is None:
        lp = model.log_density(state.mode, x)
    out = propose_spr(state.mode, x[: n - 1], rng)
    ok = False
    if out is None:
        model.counters["spr_infeasible"] += 1
    else:
        topo, t_new, log_q = out
        if not model.is_consistent(topo):
            model.counters["spr_incompatible"] += 1
        elif np.all(t_new > 0):
            new = np.concatenate((t_new, x[n - 1 :]))
            lp_new = model.log_density(topo, new)
            if math.log(rng.random()) < lp_new - lp + log_q:
                ok = True
                state, lp = HybridState(topo, new, state.vels), lp_new
    if cfg is not None:
        cfg.count("spr", ok)
    return state, ok, lp


# -- samplers ------------------------------------------------------------------------

def _tune(cfg: MHConfig, model, state, rng, iters: int, theta_free: bool):
    """Robbins-Monro adaptation of both scales toward the target acceptance, then frozen."""
    lp = None
    for k in range(1, iters + 1):
        gain = 1.0 / math.sqrt(k)
        if theta_free:
            state, ok, lp = theta_step(model, state, cfg.sigma_theta, rng, lp=lp)
            cfg.sigma_theta *= math.exp(gain * (ok - TARGET_ACCEPTANCE))
        state, ok, lp = times_step(model, state, cfg.sigma_t, rng, lp=lp)
        cfg.sigma_t *= math.exp(gain * (ok - TARGET_ACCEPTANCE))
        state, _, lp = spr_step(model, state, rng, lp=lp)
    return state


def run_mh(model, init: HybridState, n_iter: int, cfg: MHConfig | None = None, seed=None, *, warmup: int = 0, thin: int = 1) -> EventTrace:
    """Run ``n_iter`` sweeps (theta, times, SPR); each step occupies 1/3 of a time unit.

    ``warmup`` sweeps adapt the proposal scales and are not recorded.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be positive")
    cfg = (cfg or MHConfig()).fresh()
    rng = np.random.default_rng(seed)
    d = model.dim
    state = HybridState(init.mode, np.asarray(init.coords, dtype=float).copy(), np.zeros(d))
    if not np.isfinite(model.log_density(state.mode, state.coords)):
        raise ValueError("log density is not finite at the initial state")
    theta_free = not getattr(model, "theta_fixed", False)
    if warmup > 0:
        state = _tune(cfg, model, state, rng, warmup, theta_free)
        cfg = cfg.fresh()
    model.counters.clear()
    builder = TraceBuilder(np.zeros(d), getattr(model, "coord_names", None))
    wall = time.perf_counter()
    step = 0
    builder.add(0.0, EventKind.MH_MOVE, -1, state, "init", True)
    lp = model.log_density(state.mode, state.coords)
    for _ in range(n_iter):
        for move in ("theta", "times", "spr"):
            if move == "theta":
                if theta_free:
                    state, ok, lp = theta_step(model, state, cfg.sigma_theta, rng, cfg, lp)
                else:
                    ok = False
            elif move == "times":
                state, ok, lp = times_step(model, state, cfg.sigma_t, rng, cfg, lp)
            else:
                state, ok, lp = spr_step(model, state, rng, cfg, lp)
            step += 1
            if step % thin == 0:
                builder.add(step / 3.0, EventKind.MH_MOVE, -1, state, move, ok)
    t_end = step / 3.0
    if step % thin != 0:
        builder.add(t_end, EventKind.MH_MOVE, -1, state, "end", False)
    meta = {
        "sampler": "mh",
        "t_end": t_end,
        "iterations": n_iter,
        "seed": seed,
        "wall_time": time.perf_counter() - wall,
        "density_evals": int(model.counters["density"]),
        "sigma_theta": cfg.sigma_theta,
        "sigma_t": cfg.sigma_t,
        "acceptance": {m: cfg.acceptance(m) for m in ("theta", "times", "spr")},
    }
    trace = builder.build(meta)
    logger.info("mh: %d sweeps, acceptance %s", n_iter, meta["acceptance"])
    return trace


def hybrid_jumps(model, cfg: MHConfig) -> JumpProcess:
    """MH events for the hybrid: one uniformly chosen theta or SPR step, velocities kept."""
    theta_free = not getattr(model, "theta_fixed", False)
    moves = ("theta", "spr") if theta_free else ("spr",)

    def apply(state, rng):
        move = moves[int(rng.integers(len(moves)))]
        if move == "theta":
            new, ok, _ = theta_step(model, state, cfg.sigma_theta, rng, cfg)
        else:
            new, ok, _ = spr_step(model, state, rng, cfg)
        return new, move, ok

    return JumpProcess(cfg.kappa, apply)


def hybrid_run(model, init: HybridState, t_end: float, cfg: MHConfig | None = None, seed=None, **kwargs) -> EventTrace:
    """Zig-zag dynamics with MH moves at the arrivals of a rate-``kappa`` Poisson clock."""
    cfg = (cfg or MHConfig()).fresh()
    model.counters.clear()
    jumps = hybrid_jumps(model, cfg) if cfg.kappa > 0 else None
    trace = simulate(model, init, t_end, seed, jumps=jumps, **kwargs)
    trace.meta.update(
        sampler="hybrid",
        kappa=cfg.kappa,
        sigma_theta=cfg.sigma_theta,
        density_evals=int(model.counters["density"]),
        acceptance={m: cfg.acceptance(m) for m in ("theta", "spr")},
    )
    return trace
