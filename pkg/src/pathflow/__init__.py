"""Traffic assignment by convex optimization plus a transformer surrogate.

The package solves multi-class user equilibrium over fixed k-shortest path
sets, generates labelled what-if datasets from the solver, trains an
encoder-decoder attention model that predicts equilibrium path flows in one
pass, and evaluates predictions with delay- and flow-based quality metrics.
"""

from .errors import (
    ConfigError,
    ContractError,
    InfeasibleInstanceError,
    InfeasiblePathError,
    NetworkValidationError,
    NoFeasiblePathError,
    ParseError,
    PathflowError,
    ScenarioInfeasibleError,
    SizeError,
    UndefinedMetricError,
)
from .network import (
    Link,
    LinkFlows,
    Network,
    ODMatrix,
    Units,
    VehicleClass,
    aggregate_link_flows,
    bpr_cost,
    default_classes,
    dump_tntp_network,
    dump_tntp_trips,
    generate_manhattan,
    load_tntp_network,
    load_tntp_trips,
    min_path_cost,
    path_cost,
)
from .paths import (
    Path,
    PathSet,
    PathSetCollection,
    build_path_sets,
    k_shortest,
    rebuild_after_removal,
)
from .equilibrium import (
    SolverConfig,
    UESolution,
    average_delay,
    kkt_residual,
    link_aggregation_residual,
    od_conservation_residual,
    relative_gap,
    solve_ue,
)

__version__ = "0.1.0"
