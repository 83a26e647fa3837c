"""Simulation of electric-vehicle charging on radial distribution networks
under conic congestion control (max-flow and proportional fairness)."""

from .netmodel import (
    EdgeSpec,
    NetworkSpec,
    RootedTree,
    SubtreeIndex,
    load_network,
    parse_network,
    prune_nodes,
    serialize_network,
    subtree_index,
    validate_tree,
)
from .conic import ConicProblem, Solution, SolverConfig, check_feasible, solve
from .allocation import (
    AllocationResult,
    ExactnessCertificate,
    Occupancy,
    build_maxflow,
    build_propfair,
    certify_exactness,
    certify_proportional_fairness,
    recover,
    solve_allocation,
    subtree_expressions,
)
from .simulate import RunOutput, SimulationConfig, SystemState, VehicleRecord, run, step
from .stats import (
    GiniEstimate,
    StatRecord,
    charging_time_gini,
    ensemble,
    gini,
    order_parameter,
    susceptibility,
)

__version__ = "0.1.0"
