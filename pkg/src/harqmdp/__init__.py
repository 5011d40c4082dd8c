"""Multi-packet HARQ over Rayleigh block fading, optimized as an average-reward MDP."""

from .channel import ChannelModel, capacity, db_to_linear, linear_to_db
from .dynamics import LawStructure, TransitionLaw, TransitionRow, build_law, normalize, transition_row
from .errors import (
    ConfigurationError,
    ContractViolation,
    DomainError,
    HarqError,
    SolverError,
    UndefinedConditionalError,
)
from .lattice import (
    Action,
    AmiGrid,
    Mode,
    ModeSet,
    State,
    StateSpace,
    allowed_actions,
    build_ami_grid,
    build_p_grid,
    enumerate_states,
)
from .montecarlo import InfoModel, SimReport, simulate
from .onebit import Belief, BeliefCase, belief_density, prob_nack_sc, solve_onebit_k2, unique_action_search
from .solver import (
    SolveOutput,
    action_statistics,
    conventional_throughput,
    evaluate_policy,
    improve_policy,
    outage,
    policy_iteration,
    stationary_distribution,
)

__all__ = [
    "ChannelModel",
    "capacity",
    "db_to_linear",
    "linear_to_db",
    "LawStructure",
    "TransitionLaw",
    "TransitionRow",
    "build_law",
    "normalize",
    "transition_row",
    "ConfigurationError",
    "ContractViolation",
    "DomainError",
    "HarqError",
    "SolverError",
    "UndefinedConditionalError",
    "Action",
    "AmiGrid",
    "Mode",
    "ModeSet",
    "State",
    "StateSpace",
    "allowed_actions",
    "build_ami_grid",
    "build_p_grid",
    "enumerate_states",
    "InfoModel",
    "SimReport",
    "simulate",
    "Belief",
    "BeliefCase",
    "belief_density",
    "prob_nack_sc",
    "solve_onebit_k2",
    "unique_action_search",
    "SolveOutput",
    "action_statistics",
    "conventional_throughput",
    "evaluate_policy",
    "improve_policy",
    "outage",
    "policy_iteration",
    "stationary_distribution",
]

__version__ = "0.1.0"
