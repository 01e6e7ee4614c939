"""Hybrid zig-zag simulation: linear motion, thinned velocity flips,
localization refreshes and boundary-triggered discrete jumps.
"""

from __future__ import annotations

import csv
import enum
import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DOMINANCE_RTOL = 1e-9
MAX_WINDOW_HALVINGS = 60


class RateBoundViolation(RuntimeError):
    """A thinning proposal found ``lambda_i(s) > lambda*_i``: the target model is wrong."""


class InvalidInitialState(ValueError):
    pass


class EventKind(enum.IntEnum):
    REFRESH = 0
    FLIP = 1
    REFLECT = 2
    BOUNDARY_CROSS = 3
    MH_MOVE = 4

    @property
    def label(self) -> str:
        return _KIND_LABELS[self]


_KIND_LABELS = {
    EventKind.REFRESH: "Refresh",
    EventKind.FLIP: "Flip",
    EventKind.REFLECT: "Reflect",
    EventKind.BOUNDARY_CROSS: "BoundaryCross",
    EventKind.MH_MOVE: "MHMove",
}
_LABEL_KINDS = {v: k for k, v in _KIND_LABELS.items()}


@dataclass(frozen=True)
class HybridState:
    """Zig-zag state: discrete mode, non-negative coordinates, signed speeds."""

    mode: Hashable
    coords: np.ndarray
    vels: np.ndarray

    def moved(self, s: float) -> HybridState:
        return HybridState(self.mode, self.coords + self.vels * s, self.vels)

    def flipped(self, i: int) -> HybridState:
        v = self.vels.copy()
        v[i] = -v[i]
        return HybridState(self.mode, self.coords, v)

    def with_mode(self, mode: Hashable) -> HybridState:
        return HybridState(mode, self.coords, self.vels)


class TargetModel(Protocol):
    """What the engine needs from a target.

    ``localization`` returns the window length ``T`` and the index of the
    coordinate whose boundary is reached at ``T`` (``None`` when the window
    ends in a refresh). ``flip_bounds`` must dominate ``flip_rate`` along the
    straight path on ``[0, T]``. ``boundary_jump`` is called with the
    boundary coordinate exactly zero and returns the post-jump state plus the
    event kind (``REFLECT`` or ``BOUNDARY_CROSS``).
    """

    dim: int

    def log_density(self, mode, coords) -> float: ...

    def localization(self, state: HybridState) -> tuple[float, int | None]: ...

    def flip_rate(self, state: HybridState, i: int) -> float: ...

    def flip_bounds(self, state: HybridState, T: float) -> np.ndarray: ...

    def boundary_jump(
        self, state: HybridState, k: int, rng: np.random.Generator
    ) -> tuple[HybridState, EventKind]: ...


@dataclass
class EventRecord:
    time: float
    kind: EventKind
    coord: int
    state_after: HybridState
    subkind: str = ""
    accepted: bool | None = None


@dataclass
class EventTrace:
    """Columnar event log; ``vels = signs * speeds`` row-wise."""

    times: np.ndarray
    kinds: np.ndarray
    coord_index: np.ndarray
    modes: list
    coords: np.ndarray
    signs: np.ndarray
    speeds: np.ndarray
    subkinds: list[str] | None = None
    accepted: np.ndarray | None = None
    coord_names: list[str] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def vels(self) -> np.ndarray:
        return self.signs * self.speeds

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def record(self, k: int) -> EventRecord:
        return EventRecord(
            float(self.times[k]),
            EventKind(int(self.kinds[k])),
            int(self.coord_index[k]),
            HybridState(self.modes[k], self.coords[k].copy(), self.signs[k] * self.speeds),
            self.subkinds[k] if self.subkinds is not None else "",
            bool(self.accepted[k]) if self.accepted is not None else None,
        )

    def __iter__(self):
        return (self.record(k) for k in range(len(self)))

    def final_state(self) -> HybridState:
        return self.record(len(self) - 1).state_after

    def kind_counts(self) -> dict[str, int]:
        vals, counts = np.unique(self.kinds, return_counts=True)
        return {EventKind(int(v)).label: int(c) for v, c in zip(vals, counts)}


class TraceBuilder:
    def __init__(self, speeds: np.ndarray, coord_names: Sequence[str] | None = None):
        self.speeds = np.asarray(speeds, dtype=float)
        self.coord_names = list(coord_names) if coord_names is not None else None
        self._times: list[float] = []
        self._kinds: list[int] = []
        self._coord: list[int] = []
        self._modes: list = []
        self._coords: list[np.ndarray] = []
        self._signs: list[np.ndarray] = []
        self._sub: list[str] = []
        self._acc: list[int] = []
        self._has_mh = False

    def add(self, t, kind, coord, state, subkind="", accepted=None):
        self._times.append(t)
        self._kinds.append(int(kind))
        self._coord.append(coord)
        self._modes.append(state.mode)
        self._coords.append(np.array(state.coords, dtype=float))
        self._signs.append(np.sign(state.vels).astype(np.int8))
        self._sub.append(subkind)
        self._acc.append(-1 if accepted is None else int(accepted))
        if kind == EventKind.MH_MOVE:
            self._has_mh = True

    def build(self, meta=None) -> EventTrace:
        return EventTrace(
            times=np.array(self._times),
            kinds=np.array(self._kinds, dtype=np.int8),
            coord_index=np.array(self._coord, dtype=np.intp),
            modes=self._modes,
            coords=np.array(self._coords),
            signs=np.array(self._signs, dtype=np.int8),
            speeds=self.speeds,
            subkinds=self._sub if self._has_mh else None,
            accepted=np.array(self._acc, dtype=np.int8) if self._has_mh else None,
            coord_names=self.coord_names,
            meta=dict(meta or {}),
        )


@dataclass
class JumpProcess:
    """Instantaneous moves interleaved at the arrivals of a rate-``rate`` Poisson clock.

    ``apply(state, rng)`` returns ``(new_state, subkind, accepted)``.
    """

    rate: float
    apply: Callable[[HybridState, np.random.Generator], tuple[HybridState, str, bool]]


def _streams(seed, d: int) -> tuple[list[np.random.Generator], np.random.Generator, np.random.Generator]:
    # one stream per coordinate so flip draws do not depend on evaluation order
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = seq.spawn(d + 2)
    gens = [np.random.Generator(np.random.PCG64(c)) for c in children]
    return gens[:d], gens[d], gens[d + 1]


def next_flip(model: TargetModel, state: HybridState, i: int, window: float, rng, bound: float | None = None) -> float:
    """Thinned proposal for the first flip of coordinate ``i``.

    A return value ``>= window`` means no flip inside the window.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if bound is None:
        bound = float(model.flip_bounds(state, window)[i])
    if not bound > 0:
        return math.inf
    rho = 0.0
    while True:
        rho += rng.exponential(1.0 / bound)
        if rho >= window:
            return rho
        rate = model.flip_rate(state.moved(rho), i)
        _check_dominance(rate, bound, i)
        if rng.random() * bound < rate:
            return rho


def _check_dominance(rate: float, bound: float, i: int) -> None:
    if rate - bound > DOMINANCE_RTOL * max(1.0, bound):
        raise RateBoundViolation(f"coordinate {i}: rate {rate!r} exceeds bound {bound!r}")


def _race(model, state, bounds, horizon, rngs) -> tuple[float, int | None, int]:
    """Earliest accepted flip over all coordinates before ``horizon``.

    Proposals of all coordinates are processed in time order, so the work
    stops at the first acceptance; each coordinate draws only from its own
    stream.
    """
    heap = []
    for i, b in enumerate(bounds):
        if b > 0:
            rho = rngs[i].exponential(1.0 / b)
            if rho < horizon:
                heap.append((rho, i))
    heapq.heapify(heap)
    evals = 0
    while heap:
        rho, i = heapq.heappop(heap)
        b = bounds[i]
        rate = model.flip_rate(state.moved(rho), i)
        evals += 1
        _check_dominance(rate, b, i)
        if rngs[i].random() * b < rate:
            return rho, i, evals
        rho += rngs[i].exponential(1.0 / b)
        if rho < horizon:
            heapq.heappush(heap, (rho, i))
    return horizon, None, evals


def _window_bounds(model, state) -> tuple[float, int | None, np.ndarray]:
    T, hit = model.localization(state)
    bounds = np.asarray(model.flip_bounds(state, T), dtype=float)
    halvings = 0
    while not np.all(np.isfinite(bounds)):
        halvings += 1
        if halvings > MAX_WINDOW_HALVINGS:
            raise RateBoundViolation("no finite thinning bound on any window")
        T *= 0.5
        hit = None
        bounds = np.asarray(model.flip_bounds(state, T), dtype=float)
    return T, hit, bounds


def simulate(
    model: TargetModel,
    init: HybridState,
    t_end: float,
    seed=None,
    *,
    jumps: JumpProcess | None = None,
    record_refresh: bool = True,
    coord_names: Sequence[str] | None = None,
) -> EventTrace:
    """Run the zig-zag process from ``init`` until process time ``t_end``.

    The trace opens with a ``Refresh`` snapshot at time 0 and closes with one
    at ``t_end``.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    coords = np.asarray(init.coords, dtype=float)
    if np.any(coords <= 0):
        raise InvalidInitialState("initial coordinates must be strictly positive")
    if not np.isfinite(model.log_density(init.mode, coords)):
        raise InvalidInitialState("log density is not finite at the initial state")
    vels = np.asarray(init.vels, dtype=float)
    state = HybridState(init.mode, coords.copy(), vels.copy())
    speeds = np.abs(vels)
    d = len(coords)
    flip_rngs, kernel_rng, jump_rng = _streams(seed, d)

    builder = TraceBuilder(speeds, coord_names or getattr(model, "coord_names", None))
    builder.add(0.0, EventKind.REFRESH, -1, state)
    stats = {"windows": 0, "rate_evals": 0, "proposals_accepted": 0}

    next_jump = math.inf
    if jumps is not None and jumps.rate > 0:
        next_jump = jump_rng.exponential(1.0 / jumps.rate)

    t = 0.0
    wall = time.perf_counter()
    while t < t_end:
        T, hit, bounds = _window_bounds(model, state)
        stats["windows"] += 1
        # ties resolve in favour of the window, then the jump clock, then t_end
        horizon, which = T, "window"
        if next_jump - t < horizon:
            horizon, which = next_jump - t, "jump"
        if t_end - t < horizon:
            horizon, which = t_end - t, "end"
        rho, i, evals = _race(model, state, bounds, horizon, flip_rngs)
        stats["rate_evals"] += evals

        if i is not None:
            state = state.moved(rho).flipped(i)
            t += rho
            stats["proposals_accepted"] += 1
            builder.add(t, EventKind.FLIP, i, state)
            continue

        state = state.moved(horizon)
        if which == "end":
            t = t_end
            break
        t += horizon
        if which == "jump":
            state, subkind, accepted = jumps.apply(state, jump_rng)
            builder.add(t, EventKind.MH_MOVE, -1, state, subkind, accepted)
            next_jump = t + jump_rng.exponential(1.0 / jumps.rate)
        elif hit is None:
            if record_refresh:
                builder.add(t, EventKind.REFRESH, -1, state)
        else:
            c = state.coords.copy()
            c[hit] = 0.0
            state, kind = model.boundary_jump(HybridState(state.mode, c, state.vels), hit, kernel_rng)
            builder.add(t, kind, hit, state)

    builder.add(t_end, EventKind.REFRESH, -1, state)
    stats["wall_time"] = time.perf_counter() - wall
    stats["t_end"] = t_end
    stats["seed"] = seed
    trace = builder.build(meta=stats)
    logger.debug("simulate: %d events, %s", len(trace), stats)
    return trace


def _as_weights(trace: EventTrace, f) -> np.ndarray:
    d = trace.coords.shape[1]
    if isinstance(f, (int, np.integer)):
        w = np.zeros(d)
        w[int(f)] = 1.0
        return w
    w = np.asarray(f, dtype=float)
    if w.shape != (d,):
        raise ValueError(f"functional must have {d} weights")
    return w


def path_mean(trace: EventTrace, f) -> float:
    """Exact time average of a linear functional along the piecewise-linear path.

    ``f`` is a coordinate index or a weight vector.
    """
    w = _as_weights(trace, f)
    dt = np.diff(trace.times)
    x = trace.coords[:-1] @ w
    v = (trace.signs[:-1] * trace.speeds) @ w
    total = float(np.sum(x * dt + 0.5 * v * dt * dt))
    span = trace.duration
    if span <= 0:
        return float(trace.coords[0] @ w)
    return total / span


def mode_occupation(trace: EventTrace) -> dict:
    """Fraction of process time spent in each mode."""
    dt = np.diff(trace.times)
    occ: dict = {}
    for m, w in zip(trace.modes[:-1], dt):
        occ[m] = occ.get(m, 0.0) + w
    span = trace.duration
    return {m: w / span for m, w in occ.items()}


@dataclass
class Snapshots:
    times: np.ndarray
    coords: np.ndarray
    mode_index: np.ndarray
    modes: list

    def __len__(self) -> int:
        return len(self.times)

    def mode(self, k: int):
        return self.modes[self.mode_index[k]]


def discretize(trace: EventTrace, n_samples: int) -> Snapshots:
    """States at ``n_samples`` equally spaced times over the trace."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    grid = np.linspace(trace.times[0], trace.times[-1], n_samples)
    idx = np.searchsorted(trace.times, grid, side="right") - 1
    idx = np.clip(idx, 0, len(trace) - 1)
    dt = grid - trace.times[idx]
    coords = trace.coords[idx] + (trace.signs[idx] * trace.speeds) * dt[:, None]
    return Snapshots(grid, coords, idx, trace.modes)


def mode_id(mode) -> str:
    tid = getattr(mode, "topology_id", None)
    return tid if tid is not None else str(mode)


def write_trace_csv(trace: EventTrace, path) -> None:
    """``time,kind,coord_index,mode_id,<coords>,<vels>[,subkind,accepted]``."""
    d = trace.coords.shape[1]
    names = trace.coord_names or [f"x_{j + 1}" for j in range(d)]
    vnames = ["v_" + nm.removeprefix("t_").removeprefix("x_") for nm in names]
    header = ["time", "kind", "coord_index", "mode_id", *names, *vnames]
    mh = trace.subkinds is not None
    if mh:
        header += ["subkind", "accepted"]
    vels = trace.vels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(trace)):
            ci = int(trace.coord_index[k])
            row = [
                repr(float(trace.times[k])),
                EventKind(int(trace.kinds[k])).label,
                "" if ci < 0 else str(ci + 1),
                mode_id(trace.modes[k]),
                *(repr(float(x)) for x in trace.coords[k]),
                *(repr(float(x)) for x in vels[k]),
            ]
            if mh:
                acc = int(trace.accepted[k])
                row += [trace.subkinds[k], "" if acc < 0 else str(acc)]
            w.writerow(row)


def read_trace_csv(path) -> EventTrace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not body:
        raise ValueError(f"{path}: empty trace")
    mh = header[-2:] == ["subkind", "accepted"]
    ncols = len(header) - 4 - (2 if mh else 0)
    d = ncols // 2
    names = header[4 : 4 + d]
    times = np.array([float(r[0]) for r in body])
    kinds = np.array([int(_LABEL_KINDS[r[1]]) for r in body], dtype=np.int8)
    coord = np.array([int(r[2]) - 1 if r[2] else -1 for r in body], dtype=np.intp)
    modes = [r[3] for r in body]
    coords = np.array([[float(x) for x in r[4 : 4 + d]] for r in body])
    vels = np.array([[float(x) for x in r[4 + d : 4 + 2 * d]] for r in body])
    speeds = np.max(np.abs(vels), axis=0)
    signs = np.sign(vels).astype(np.int8)
    sub = acc = None
    if mh:
        sub = [r[-2] for r in body]
        acc = np.array([int(r[-1]) if r[-1] else -1 for r in body], dtype=np.int8)
    return EventTrace(times, kinds, coord, modes, coords, signs, speeds, sub, acc, names, {"source": str(path)})
