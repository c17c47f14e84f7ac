"""Slotted-time simulator and analytic toolkit for diversity backpressure
routing with mutual information accumulation (REP / RMIA / MIA)."""

from .channel import (
    CdfTable,
    ChannelModel,
    DiscreteTest,
    RayleighFading,
    build_cdf_table,
    rate_cdf,
    sample_rate,
)
from .engine import RunResult, SimConfig, run
from .errors import ConfigError, IntegrityError, TruncationWarning
from .policy import (
    DIVBAR_MIA,
    DIVBAR_REP,
    DIVBAR_RMIA,
    DivbarPolicy,
    EpochDecision,
    StationaryPolicy,
    choose_commodity,
    choose_forwarder,
    differential_backlog,
    phi,
    phi_rep,
    priority_sets,
)
from .queueing import BacklogSnapshot, NodeState, Packet, Scheme
from .topology import Scenario, Topology, load_scenario, make_scenario, validate

__all__ = [
    "BacklogSnapshot",
    "CdfTable",
    "ChannelModel",
    "ConfigError",
    "DIVBAR_MIA",
    "DIVBAR_REP",
    "DIVBAR_RMIA",
    "DiscreteTest",
    "DivbarPolicy",
    "EpochDecision",
    "IntegrityError",
    "NodeState",
    "Packet",
    "RayleighFading",
    "RunResult",
    "Scenario",
    "Scheme",
    "SimConfig",
    "StationaryPolicy",
    "Topology",
    "TruncationWarning",
    "build_cdf_table",
    "choose_commodity",
    "choose_forwarder",
    "differential_backlog",
    "load_scenario",
    "make_scenario",
    "phi",
    "phi_rep",
    "priority_sets",
    "rate_cdf",
    "run",
    "sample_rate",
    "validate",
]

__version__ = "0.1.0"
