"""Measure-valued coalescent with recombination: simulation, exact sampling
probabilities and strong-recombination asymptotics."""

from .types import (
    DELTA,
    Cemetery,
    CountingMeasure,
    EMPTY,
    compatible,
    exact_type,
    join,
    make_type,
    marginal,
)
from .partitions import Partition, RecombinationSpec, single_crossover
from .mutation import MutationKernel, MutationModel, mutation_preimage, root_weight, stationary_distribution
from .model import ConfigError, LoadedConfig, Model, load_config, parse_config
from .dynamics import (
    CoupledState,
    EventKind,
    RunOutcome,
    Simulator,
    cmarg_transitions,
    marg_transitions,
    simulate,
    smarg_transitions,
)
from .exact import AbsorptionSolution, StateCapError, absorption_value, build_state_graph, single_site_q, solve_q
from .asymptotics import (
    SingleSiteQ,
    moebius_invert,
    pim_single_site_q,
    prob_bad1_total,
    prob_bad1_witness,
    prob_bad2_total,
    prob_bad2_witness,
    q1,
    q1_via_decomposition,
    q_infty,
    superset_sum,
)
from .montecarlo import CouplingStats, Estimate, estimate_coupling, estimate_q, rho_sweep

__version__ = "0.1.0"

__all__ = [
    "DELTA",
    "EMPTY",
    "AbsorptionSolution",
    "Cemetery",
    "ConfigError",
    "CountingMeasure",
    "CoupledState",
    "CouplingStats",
    "Estimate",
    "EventKind",
    "LoadedConfig",
    "Model",
    "MutationKernel",
    "MutationModel",
    "Partition",
    "RecombinationSpec",
    "RunOutcome",
    "Simulator",
    "SingleSiteQ",
    "StateCapError",
    "absorption_value",
    "build_state_graph",
    "cmarg_transitions",
    "compatible",
    "estimate_coupling",
    "estimate_q",
    "exact_type",
    "join",
    "load_config",
    "make_type",
    "marg_transitions",
    "marginal",
    "moebius_invert",
    "mutation_preimage",
    "parse_config",
    "pim_single_site_q",
    "prob_bad1_total",
    "prob_bad1_witness",
    "prob_bad2_total",
    "prob_bad2_witness",
    "q1",
    "q1_via_decomposition",
    "q_infty",
    "rho_sweep",
    "root_weight",
    "simulate",
    "single_crossover",
    "single_site_q",
    "smarg_transitions",
    "solve_q",
    "stationary_distribution",
    "superset_sum",
]
