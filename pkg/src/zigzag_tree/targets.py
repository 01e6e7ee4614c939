"""Shared machinery for zig-zag targets on (ranked topology, holding times, theta).

Coordinates are ``(t_1, ..., t_{n-1}, theta)``; theta sits at index ``n - 1``.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .engine import EventKind, HybridState, path_mean, simulate
from .tau import RankedTopology, pair_rates, pivot_down, pivot_up, simulate_coalescent, swap


class InconsistentJumpError(RuntimeError):
    """A boundary jump landed in a topology with zero target density."""


class FlatPrior:
    """Improper flat prior on ``(0, inf)``."""

    vanishes_at_zero = False

    def logpdf(self, theta: float) -> float:
        return 0.0 if theta >= 0 else -math.inf

    def dlogpdf(self, theta: float) -> float:
        return 0.0

    def dlog_range(self, lo: float, hi: float) -> tuple[float, float]:
        return 0.0, 0.0

    def __repr__(self) -> str:
        return "FlatPrior()"


class GammaPrior:
    """Gamma(shape, rate) prior; ``shape >= 1`` keeps the log-derivative bounded away from 0."""

    def __init__(self, shape: float = 1.0, rate: float = 1.0):
        if shape < 1 or rate <= 0:
            raise ValueError("GammaPrior needs shape >= 1 and rate > 0")
        self.shape = float(shape)
        self.rate = float(rate)
        self.vanishes_at_zero = shape > 1

    def logpdf(self, theta: float) -> float:
        if theta < 0:
            return -math.inf
        if theta == 0:
            return 0.0 if self.shape == 1 else -math.inf
        a, b = self.shape, self.rate
        return a * math.log(b) - math.lgamma(a) + (a - 1) * math.log(theta) - b * theta

    def dlogpdf(self, theta: float) -> float:
        return (self.shape - 1) / theta - self.rate

    def dlog_range(self, lo: float, hi: float) -> tuple[float, float]:
        # (a - 1)/theta - b is non-increasing in theta
        if self.shape == 1:
            return -self.rate, -self.rate
        top = math.inf if lo <= 0 else self.dlogpdf(lo)
        return self.dlogpdf(hi), top

    def __repr__(self) -> str:
        return f"GammaPrior(shape={self.shape}, rate={self.rate})"


def default_speeds(n: int, theta_speed: float) -> np.ndarray:
    """``|v_i| = 2 / ((n + 1 - i)(n - i))`` for holding times, then the theta speed."""
    return np.concatenate((1.0 / pair_rates(n), [float(theta_speed)]))


class TreeTarget:
    """Base class: localization, boundary kernel and generic rates for tree targets."""

    def __init__(self, n: int, prior=None, c: float = 4.0, K: float = 1.0, speeds=None, theta_speed: float = 1.0):
        if n < 2:
            raise ValueError("need at least two leaves")
        if c <= 0 or K <= 0:
            raise ValueError("c and K must be positive")
        self.n = n
        self.dim = n
        self.prior = prior if prior is not None else FlatPrior()
        self.c = float(c)
        self.K = float(K)
        self.speeds = np.asarray(speeds, dtype=float) if speeds is not None else default_speeds(n, theta_speed)
        if self.speeds.shape != (n,) or np.any(self.speeds < 0):
            raise ValueError(f"speeds must be {n} non-negative magnitudes")
        self.coord_names = [f"t_{i}" for i in range(1, n)] + ["theta"]
        self.counters: Counter = Counter()
        self._coef = pair_rates(n)

    @property
    def theta_fixed(self) -> bool:
        return self.speeds[-1] == 0

    # -- to be provided by subclasses -------------------------------------
    def log_density(self, mode: RankedTopology, coords) -> float:
        raise NotImplementedError

    def grad_log_density(self, mode: RankedTopology, coords) -> np.ndarray:
        raise NotImplementedError

    def guards(self, mode: RankedTopology) -> np.ndarray:
        """Boolean per coordinate: boundary where the density vanishes or rates diverge."""
        raise NotImplementedError

    def flip_bounds(self, state: HybridState, T: float) -> np.ndarray:
        raise NotImplementedError

    def is_consistent(self, mode: RankedTopology) -> bool:
        return True

    # -- shared ------------------------------------------------------------
    def flip_rate(self, state: HybridState, i: int) -> float:
        self.counters["rate"] += 1
        g = self.grad_log_density(state.mode, state.coords)[i]
        return max(-state.vels[i] * g, 0.0)

    def flip_rates(self, state: HybridState) -> np.ndarray:
        g = self.grad_log_density(state.mode, state.coords)
        return np.maximum(-state.vels * g, 0.0)

    def localization(self, state: HybridState) -> tuple[float, int | None]:
        v = state.vels
        neg = np.flatnonzero(v < 0)
        if neg.size == 0:
            return self.K, None
        guarded = self.guards(state.mode)[neg]
        d = np.where(guarded, 1.0 + self.c, 1.0)
        cand = -state.coords[neg] / (d * v[neg])
        j = int(np.argmin(cand))
        if cand[j] < self.K:
            return float(cand[j]), None if guarded[j] else int(neg[j])
        return self.K, None

    def boundary_jump(self, state: HybridState, k: int, rng) -> tuple[HybridState, EventKind]:
        new = state.flipped(k)
        if k == 0 or k == self.n - 1:
            return new, EventKind.REFLECT
        topo = state.mode
        i = k + 1
        if topo.nested(i):
            topo = pivot_up(topo, i) if rng.random() < 0.5 else pivot_down(topo, i)
        else:
            topo = swap(topo, i)
        if not self.is_consistent(topo):
            raise InconsistentJumpError(f"jump at t_{i} = 0 produced inconsistent {topo!r}")
        self.counters["boundary"] += 1
        return new.with_mode(topo), EventKind.BOUNDARY_CROSS

    def initial_tree(self, rng) -> tuple[RankedTopology, np.ndarray]:
        topo, t = simulate_coalescent(self.n, rng)
        return topo, t

    def initial_theta(self) -> float:
        return 1.0

    def initial_state(self, seed=None, theta: float | None = None) -> HybridState:
        """Prior tree (made consistent when data demand it), random velocity signs."""
        rng = np.random.default_rng(seed)
        topo, t = self.initial_tree(rng)
        th = self.initial_theta() if theta is None else float(theta)
        coords = np.concatenate((t, [th]))
        signs = rng.choice((-1.0, 1.0), size=self.n)
        return HybridState(topo, coords, signs * self.speeds)

    def height(self, coords) -> float:
        return float(np.sum(coords[: self.n - 1]))


class KingmanTarget(TreeTarget):
    """Coalescent prior alone, theta frozen; rates are constant in each orthant."""

    def __init__(self, n: int, theta: float = 1.0, c: float = 4.0, K: float = 1.0, speeds=None):
        if speeds is None:
            speeds = default_speeds(n, 0.0)
        super().__init__(n, FlatPrior(), c, K, speeds)
        if self.speeds[-1] != 0:
            raise ValueError("theta must be frozen (zero speed) in the prior-only target")
        self.theta = float(theta)

    def log_density(self, mode, coords) -> float:
        self.counters["density"] += 1
        t = np.asarray(coords, dtype=float)[: self.n - 1]
        if np.any(t < 0):
            return -math.inf
        return -float(self._coef @ t)

    def grad_log_density(self, mode, coords) -> np.ndarray:
        return np.concatenate((-self._coef, [0.0]))

    def guards(self, mode) -> np.ndarray:
        return np.zeros(self.n, dtype=bool)

    def flip_rate(self, state, i) -> float:
        self.counters["rate"] += 1
        if i == self.n - 1:
            return 0.0
        return max(state.vels[i] * self._coef[i], 0.0)

    def flip_bounds(self, state, T) -> np.ndarray:
        self.counters["bound"] += 1
        return self.flip_rates(state)

    def initial_theta(self) -> float:
        return self.theta


def pilot_theta_speed(make_target, seed=None, pilot_time: float = 5.0) -> float:
    """Twice the posterior-mean theta of a short pilot run (a tuning heuristic).

    ``make_target(theta_speed)`` builds the target; the pilot itself moves
    theta at the speed of its starting value.
    """
    probe = make_target(1.0)
    probe = make_target(max(probe.initial_theta(), 1e-3))
    trace = simulate(probe, probe.initial_state(seed), pilot_time, seed)
    return 2.0 * path_mean(trace, probe.n - 1)
