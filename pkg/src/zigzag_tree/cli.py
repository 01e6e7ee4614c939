"""Command-line entry point: ``simulate-data``, ``run`` and ``report``.

Exit codes: 0 success, 2 data error, 3 config error, 4 runtime invariant
violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .diagnostics import compare_report
from .engine import InvalidInitialState, RateBoundViolation, read_trace_csv, simulate, write_trace_csv
from .fsm import FSMTarget, read_fsm, simulate_fsm_data, write_fsm
from .ism import DataError, ISMDataset, ISMTarget, _parse_header, read_ism, simulate_ism_data, write_ism
from .mh import PRESETS, ZIGZAG_THETA_SPEED, MHConfig, hybrid_run, preset, run_mh
from .targets import FlatPrior, GammaPrior, InconsistentJumpError, pilot_theta_speed
from .tau import RankedTopology, simulate_coalescent

logger = logging.getLogger("zigzag_tree")

EXIT_DATA, EXIT_CONFIG, EXIT_RUNTIME = 2, 3, 4


def read_dataset(path):
    try:
        first = Path(path).read_text().split("\n", 1)[0]
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    model = _parse_header(first).get("model")
    if model == "ism":
        return read_ism(path)
    if model == "fsm":
        return read_fsm(path)
    raise DataError(f"{path}: unknown model {model!r}")


def caterpillar(n: int) -> tuple[RankedTopology, np.ndarray]:
    """Caterpillar topology with prior-mean holding times."""
    pairs = [(1, 2)] + [(list(range(1, i + 1)), i + 1) for i in range(2, n)]
    k = np.arange(n, 1, -1, dtype=float)
    return RankedTopology.from_pairs(n, pairs), 2.0 / (k * (k - 1))


def simulate_dataset(model: str, n: int, theta: float, sites: int | None, seed, tree: str = "random"):
    rng = np.random.default_rng(seed)
    topo, t = caterpillar(n) if tree == "caterpillar" else simulate_coalescent(n, rng)
    if model == "ism":
        return simulate_ism_data(topo, t, theta, rng)
    if sites is None:
        raise ConfigError("fsm simulation needs a site count")
    return simulate_fsm_data(topo, t, theta, sites, rng)


def parse_prior(spec: str, model: str):
    if spec == "default":
        return None
    if spec == "flat":
        return FlatPrior()
    if spec.startswith("gamma:"):
        try:
            a, b = (float(x) for x in spec[6:].split(","))
            return GammaPrior(a, b)
        except ValueError as exc:
            raise ConfigError(f"bad prior {spec!r}: {exc}") from None
    raise ConfigError(f"prior must be default, flat or gamma:<shape>,<rate>; got {spec!r}")


def build_target(cfg: RunConfig, data, theta_speed: float):
    prior = parse_prior(cfg.prior, cfg.model)
    cls = ISMTarget if cfg.model == "ism" else FSMTarget
    return cls(data, prior=prior, c=cfg.c, K=cfg.K, theta_speed=theta_speed)


def cmd_simulate_data(args) -> int:
    data = simulate_dataset(args.model, args.n, args.theta, args.sites, args.seed, args.tree)
    (write_ism if args.model == "ism" else write_fsm)(data, args.out)
    logger.info("wrote %s: %s", args.out, data.summary())
    return 0


def load_run_data(cfg: RunConfig):
    if cfg.data is None:
        return simulate_dataset(cfg.model, cfg.sim_n, cfg.sim_theta, cfg.sim_sites, cfg.sim_seed)
    data = read_dataset(cfg.data)
    if (cfg.model == "ism") != isinstance(data, ISMDataset):
        raise ConfigError(f"dataset {cfg.data} does not match model={cfg.model}")
    return data


def chain_path(path: str, chain: int, chains: int) -> str:
    if chains == 1:
        return path
    p = Path(path)
    return str(p.with_name(f"{p.stem}.chain{chain}{p.suffix}"))


def run_chain(cfg: RunConfig, chain: int = 0):
    """One sampler run; chain ``k`` draws its streams from ``SeedSequence(seed).spawn`` slot ``k``."""
    data = load_run_data(cfg)
    chain_seq = np.random.SeedSequence(cfg.seed).spawn(chain + 1)[chain] if cfg.chains > 1 else np.random.SeedSequence(cfg.seed)
    init_seq, run_seq = chain_seq.spawn(2)
    mh_cfg = MHConfig(cfg.sigma_theta, cfg.sigma_t, cfg.kappa)
    if cfg.preset is not None:
        if cfg.preset not in PRESETS:
            raise ConfigError(f"unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
        mh_cfg = preset(cfg.preset, cfg.sampler)
    if cfg.theta_speed != "pilot":
        theta_speed = float(cfg.theta_speed)
    elif cfg.preset is not None:
        theta_speed = ZIGZAG_THETA_SPEED[cfg.preset]
    elif cfg.sampler == "mh":
        theta_speed = 1.0  # unused by MH; zero would freeze theta
    else:
        theta_speed = pilot_theta_speed(lambda sp: build_target(cfg, data, sp), init_seq, cfg.pilot_time)
    target = build_target(cfg, data, theta_speed)
    init = target.initial_state(np.random.default_rng(init_seq))
    target.counters.clear()
    if cfg.sampler == "zigzag":
        trace = simulate(target, init, cfg.t_end, run_seq)
        trace.meta["sampler"] = "zigzag"
    elif cfg.sampler == "hybrid":
        trace = hybrid_run(target, init, cfg.t_end, mh_cfg, run_seq)
    else:
        trace = run_mh(target, init, cfg.iterations, mh_cfg, run_seq, warmup=cfg.warmup, thin=cfg.thin)
    trace.meta["theta_speed"] = theta_speed
    trace.meta["chain"] = chain
    path = chain_path(cfg.trace, chain, cfg.chains)
    write_trace_csv(trace, path)
    meta = {k: v for k, v in trace.meta.items() if k != "seed"}
    Path(path + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str) + "\n")
    logger.info("chain %d final topology %s", chain, trace.final_state().mode.log_line())
    return path


def cmd_run(cfg: RunConfig) -> list[str]:
    """Run every configured chain, write traces and the summary report, return the trace paths."""
    cfg.validate()
    load_run_data(cfg)  # fail fast on bad data before spawning workers
    if cfg.chains > 1 and cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.chains)) as pool:
            paths = list(pool.map(run_chain, [cfg] * cfg.chains, range(cfg.chains)))
    else:
        paths = [run_chain(cfg, k) for k in range(cfg.chains)]
    traces = {f"{cfg.sampler}" if cfg.chains == 1 else f"{cfg.sampler}.{k}": load_trace(p) for k, p in enumerate(paths)}
    report = compare_report(traces, n_samples=cfg.samples)
    text = report.to_text()
    if cfg.report:
        Path(cfg.report).write_text(text + "\n")
        Path(cfg.report).with_suffix(".csv").write_text(report.to_csv())
    print(text)
    return paths


def load_trace(path):
    try:
        trace = read_trace_csv(path)
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise DataError(f"{path}: not a readable trace ({exc})") from exc
    side = Path(str(path) + ".meta.json")
    if side.exists():
        trace.meta.update(json.loads(side.read_text()))
    return trace


def cmd_report(args) -> int:
    labels = args.labels or [Path(p).stem for p in args.traces]
    if len(labels) != len(args.traces):
        raise ConfigError("need one label per trace")
    traces = {lab: load_trace(p) for lab, p in zip(labels, args.traces)}
    report = compare_report(traces, n_samples=args.samples)
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zigzag-tree", description="Zig-zag and Metropolis-Hastings samplers for coalescent trees.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate-data", help="simulate a dataset from the coalescent")
    s.add_argument("--model", choices=("ism", "fsm"), default="ism")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--theta", type=float, required=True)
    s.add_argument("--sites", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tree", choices=("random", "caterpillar"), default="random")
    s.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run a sampler and write a trace")
    r.add_argument("--config", help="key=value configuration file")
    for f in fields(RunConfig):
        r.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None)
    r.add_argument("--save-config", help="write the effective configuration here")

    q = sub.add_parser("report", help="compare traces")
    q.add_argument("traces", nargs="+")
    q.add_argument("--labels", nargs="*")
    q.add_argument("--samples", type=int, default=10000)
    q.add_argument("--csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate-data":
            return cmd_simulate_data(args)
        if args.command == "report":
            return cmd_report(args)
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
        cfg = cfg.updated(overrides).validate()
        if args.save_config:
            cfg.save(args.save_config)
        cmd_run(cfg)
        return 0
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (RateBoundViolation, InconsistentJumpError, InvalidInitialState) as exc:
        logger.error("invariant violation: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
