"""Object-level imitation planner: tokenized scenes, transformer, benchmark."""

from .geom import (
    FovConfig,
    InvalidInputError,
    ObjectToken,
    OrientedBox,
    Pose2,
    RoutePolyline,
    TokenKind,
    tokenize_scene,
)
from .model import (
    PlanTConfig,
    RelevanceRanking,
    attention_relevance,
    compute_loss,
    forward,
    forward_numpy,
    init_params,
)
from .pilot import (
    ExpertConfig,
    PidConfig,
    PidController,
    WaypointPlan,
    expert_decide,
    forecast_constant_speed,
    forecast_privileged,
)

__version__ = "0.1.0"

__all__ = [
    "FovConfig",
    "InvalidInputError",
    "ObjectToken",
    "OrientedBox",
    "Pose2",
    "RoutePolyline",
    "TokenKind",
    "tokenize_scene",
    "PlanTConfig",
    "RelevanceRanking",
    "attention_relevance",
    "compute_loss",
    "forward",
    "forward_numpy",
    "init_params",
    "ExpertConfig",
    "PidConfig",
    "PidController",
    "WaypointPlan",
    "expert_decide",
    "forecast_constant_speed",
    "forecast_privileged",
    "__version__",
]
