"""Batch-means effective sample size and method comparison tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import EventTrace, discretize, path_mean

DEFAULT_SAMPLES = 10_000
MIXING_RATIO = 3.0


@dataclass(frozen=True)
class ESSResult:
    ess: float
    n: int
    variance: float
    degenerate: bool = False
    poor_mixing: bool = False

    @property
    def flagged(self) -> bool:
        return self.degenerate or self.poor_mixing


def _batch_variance(x: np.ndarray, b: int) -> float:
    """``b * var(batch means)``, the batch-means estimate of the asymptotic variance."""
    k = len(x) // b
    means = x[: k * b].reshape(k, b).mean(axis=1)
    return b * float(np.var(means, ddof=1))


def ess_detail(samples) -> ESSResult:
    x = np.asarray(samples, dtype=float)
    n = len(x)
    if n < 100:
        raise ValueError("batch-means ESS needs at least 100 samples")
    var = float(np.var(x, ddof=1))
    if not var > 0:
        return ESSResult(float(n), n, 0.0, degenerate=True)
    b1 = int(math.isqrt(n))
    b2 = int(n ** (2.0 / 3.0))
    s1 = _batch_variance(x, b1)
    s2 = _batch_variance(x, b2)
    if not s1 > 0:
        return ESSResult(float(n), n, var, degenerate=True)
    ratio = max(s1, s2) / max(min(s1, s2), 1e-300)
    return ESSResult(n * var / s1, n, var, poor_mixing=ratio > MIXING_RATIO)


def ess(samples) -> float:
    """Batch-means ESS with batch size ``floor(sqrt(N))``."""
    return ess_detail(samples).ess


def tree_height(coords, n: int | None = None) -> float:
    """Sum of holding times; ``coords`` may carry theta as its last entry when ``n`` is given."""
    c = np.asarray(coords, dtype=float)
    return float(np.sum(c[: n - 1] if n is not None else c))


def functional_weights(trace: EventTrace, name: str) -> np.ndarray:
    """Linear functional over a trace's coordinates: ``theta``, ``H`` or a coordinate name."""
    d = trace.coords.shape[1]
    w = np.zeros(d)
    names = trace.coord_names or [f"x_{i}" for i in range(1, d + 1)]
    if name == "H":
        w[: d - 1] = 1.0
    elif name in names:
        w[names.index(name)] = 1.0
    else:
        raise KeyError(f"unknown functional {name!r}")
    return w


def evaluation_count(trace: EventTrace) -> int:
    """Target evaluations: rate evaluations plus one bound per window, plus MH densities."""
    m = trace.meta
    return int(m.get("rate_evals", 0) + m.get("windows", 0) + m.get("density_evals", 0))


@dataclass(frozen=True)
class FunctionalSummary:
    mean: float
    se: float
    ess: float
    ess_per_sec: float
    ess_per_eval: float
    flagged: bool


@dataclass(frozen=True)
class ReportRow:
    method: str
    run_time: float
    evaluations: int
    events: dict
    stats: dict  # functional name -> FunctionalSummary


@dataclass
class SummaryReport:
    functionals: list[str]
    rows: list[ReportRow] = field(default_factory=list)

    def header(self) -> list[str]:
        cols = ["method"]
        for f in self.functionals:
            cols += [f"mean({f})", f"se({f})", f"ess({f})", f"ess({f})/sec", f"ess({f})/eval"]
        return cols + ["run_time_s", "evaluations"]

    def table(self) -> list[list[str]]:
        out = []
        for r in self.rows:
            cells = [r.method]
            for f in self.functionals:
                s = r.stats[f]
                star = "*" if s.flagged else ""
                cells += [f"{s.mean:.4g}", f"{s.se:.3g}", f"{s.ess:.1f}{star}", f"{s.ess_per_sec:.3g}{star}", f"{s.ess_per_eval:.3g}{star}"]
            cells += [f"{r.run_time:.3g}", str(r.evaluations)]
            out.append(cells)
        return out

    def to_text(self) -> str:
        rows = [self.header()] + self.table()
        widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        if any(s.flagged for r in self.rows for s in r.stats.values()):
            lines.append("* unreliable ESS: chain mixes poorly or is degenerate")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header() + [f"flag({f})" for f in self.functionals])
        for r in self.rows:
            cells = [r.method]
            for f in self.functionals:
                s = r.stats[f]
                cells += [repr(s.mean), repr(s.se), repr(s.ess), repr(s.ess_per_sec), repr(s.ess_per_eval)]
            cells += [repr(r.run_time), r.evaluations]
            w.writerow(cells + [int(r.stats[f].flagged) for f in self.functionals])
        return buf.getvalue()


def summarize(method: str, trace: EventTrace, functionals=("theta", "H"), n_samples: int = DEFAULT_SAMPLES) -> ReportRow:
    snaps = discretize(trace, n_samples)
    wall = float(trace.meta.get("wall_time", float("nan")))
    evals = evaluation_count(trace)
    stats = {}
    for f in functionals:
        w = functional_weights(trace, f)
        xs = snaps.coords @ w
        det = ess_detail(xs)
        e = min(det.ess, det.n)
        stats[f] = FunctionalSummary(
            mean=path_mean(trace, w),
            se=math.sqrt(det.variance / e) if e > 0 else float("nan"),
            ess=e,
            ess_per_sec=e / wall if wall > 0 else float("nan"),
            ess_per_eval=e / evals if evals > 0 else float("nan"),
            flagged=det.flagged,
        )
    return ReportRow(method, wall, evals, trace.kind_counts(), stats)


def compare_report(traces: dict, functionals=("theta", "H"), n_samples: int = DEFAULT_SAMPLES) -> SummaryReport:
    """One row per method, in insertion order."""
    report = SummaryReport(list(functionals))
    for method, trace in traces.items():
        report.rows.append(summarize(method, trace, functionals, n_samples))
    return report
