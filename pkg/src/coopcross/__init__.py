"""Cooperative pass-order decision pipeline for unsignalized intersections.

Layers: kinematic influence quantification, motif-based spectral grouping,
intra-/inter-group pass-order negotiation with pluggable backends, safety-gap
crossing-time scheduling, and a deterministic closed-loop simulator with
metrics and a CLI on top.
"""

from .core import (
    ConflictPoint,
    MethodKind,
    Route,
    ScenarioConfig,
    VehicleState,
    seeded_rng,
)
from .influence import (
    FollowingRelation,
    augment_following,
    cumulative_influence_matrix,
    direct_influence,
    direct_influence_matrix,
    following_relations,
    normalize_influence,
)
from .grouping import (
    GroupPartition,
    MOTIF_CATALOG,
    Motif,
    divide_groups,
    motif_adjacency,
)
from .negotiation import (
    ConsensusLevel,
    NegotiationContext,
    PassOrder,
    RuleBackend,
    inter_group_order,
    intra_group_order,
)
from .llm_backend import FixtureBackend, LlmBackend, LlmConfig
from .planning import (
    CrossingSchedule,
    acceleration_command,
    earliest_arrival,
    latest_arrival,
    schedule_times,
)
from .sim import (
    Geometry,
    SimTrace,
    World,
    build_intersection,
    detect_collisions,
    generate_scenario,
    run,
    step,
)
from .metrics import RunSummary, aggregate, delay, pet_values, summarize

__version__ = "0.1.0"

__all__ = [
    "ConflictPoint",
    "ConsensusLevel",
    "CrossingSchedule",
    "FixtureBackend",
    "FollowingRelation",
    "Geometry",
    "GroupPartition",
    "LlmBackend",
    "LlmConfig",
    "MOTIF_CATALOG",
    "MethodKind",
    "Motif",
    "NegotiationContext",
    "PassOrder",
    "Route",
    "RuleBackend",
    "RunSummary",
    "ScenarioConfig",
    "SimTrace",
    "VehicleState",
    "World",
    "acceleration_command",
    "aggregate",
    "augment_following",
    "build_intersection",
    "cumulative_influence_matrix",
    "delay",
    "detect_collisions",
    "direct_influence",
    "direct_influence_matrix",
    "divide_groups",
    "earliest_arrival",
    "following_relations",
    "generate_scenario",
    "inter_group_order",
    "intra_group_order",
    "latest_arrival",
    "motif_adjacency",
    "normalize_influence",
    "pet_values",
    "run",
    "schedule_times",
    "seeded_rng",
    "step",
    "summarize",
    "__version__",
]
