"""Flat ``key=value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


MODELS = ("ism", "fsm")
SAMPLERS = ("zigzag", "mh", "hybrid")


@dataclass
class RunConfig:
    model: str = "ism"
    sampler: str = "zigzag"
    data: str | None = None
    sim_n: int | None = None
    sim_theta: float | None = None
    sim_sites: int | None = None
    sim_seed: int = 0
    t_end: float | None = None
    iterations: int | None = None
    warmup: int = 0
    seed: int = 0
    c: float = 4.0
    K: float = 1.0
    kappa: float = 10.0
    sigma_theta: float = 1.0
    sigma_t: float = 0.5
    theta_speed: str = "pilot"
    pilot_time: float = 5.0
    prior: str = "default"
    preset: str | None = None
    thin: int = 1
    chains: int = 1
    workers: int = 1
    samples: int = 10000
    trace: str = "trace.csv"
    report: str | None = None

    def validate(self) -> RunConfig:
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}")
        if (self.data is None) == (self.sim_n is None):
            raise ConfigError("give exactly one of data=<path> or sim_n=<int>")
        if self.sim_n is not None:
            if self.sim_n < 2 or self.sim_theta is None or self.sim_theta < 0:
                raise ConfigError("simulation needs sim_n >= 2 and sim_theta >= 0")
            if self.model == "fsm" and (self.sim_sites is None or self.sim_sites < 1):
                raise ConfigError("fsm simulation needs sim_sites >= 1")
        if self.sampler == "mh":
            if self.iterations is None or self.iterations < 1:
                raise ConfigError("mh needs iterations >= 1")
        elif self.t_end is None or not self.t_end > 0:
            raise ConfigError(f"{self.sampler} needs t_end > 0")
        if self.c <= 0 or self.K <= 0 or self.kappa < 0 or self.sigma_theta <= 0 or self.sigma_t <= 0:
            raise ConfigError("c, K, sigma_theta, sigma_t must be positive and kappa non-negative")
        if self.chains < 1 or self.workers < 1:
            raise ConfigError("chains and workers must be >= 1")
        if self.thin < 1 or self.samples < 100 or self.warmup < 0 or self.pilot_time <= 0:
            raise ConfigError("thin >= 1, samples >= 100, warmup >= 0 and pilot_time > 0 required")
        if self.report is not None and Path(self.report).with_suffix(".csv").resolve() == Path(self.trace).resolve():
            raise ConfigError("the report's .csv table would overwrite the trace; rename one of them")
        if self.theta_speed != "pilot":
            try:
                if float(self.theta_speed) < 0:
                    raise ValueError
            except ValueError:
                raise ConfigError("theta_speed must be 'pilot' or a non-negative number") from None
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                lines.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def updated(self, pairs: dict) -> RunConfig:
        types = {f.name: f.type for f in fields(self)}
        vals = {}
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = _convert(key, types[key], raw)
        return dataclasses.replace(self, **vals)

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        pairs = {}
        for num, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {num}: expected key=value")
            k, v = line.split("=", 1)
            pairs[k.strip()] = v.strip()
        return cls().updated(pairs)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(str(exc)) from exc


def _convert(key: str, typ: str, raw):
    if not isinstance(raw, str):
        return raw
    if raw in ("None", "") and "None" in typ:
        return None
    try:
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw
