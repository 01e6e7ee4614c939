"""Zig-zag process samplers for coalescent trees on the space of ranked topologies."""

from .config import ConfigError, RunConfig
from .diagnostics import compare_report, ess, ess_detail, summarize
from .engine import (
    EventKind,
    EventTrace,
    HybridState,
    InvalidInitialState,
    RateBoundViolation,
    discretize,
    path_mean,
    read_trace_csv,
    simulate,
    write_trace_csv,
)
from .fsm import FSMDataset, FSMTarget, read_fsm, simulate_fsm_data, write_fsm
from .ism import DataError, ISMDataset, ISMTarget, read_ism, simulate_ism_data, write_ism
from .mh import MHConfig, hybrid_run, run_mh
from .targets import FlatPrior, GammaPrior, InconsistentJumpError, KingmanTarget
from .tau import RankedTopology, enumerate_topologies, simulate_coalescent

__version__ = "0.1.0"
