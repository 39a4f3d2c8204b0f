"""Multi-agent debate orchestration, trace extraction and a toy GRPO core for debate-train-evolve loops."""

from .domain import (
    AgentConfig,
    AgentTurn,
    DebateRecord,
    EvolutionState,
    GrpoParams,
    MetricsReport,
    Query,
    RewardParams,
    Termination,
    TrainingExample,
    validate,
)
from .errors import ConfigurationError, DivergenceError, TrainingError, TransportError

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "AgentTurn",
    "ConfigurationError",
    "DebateRecord",
    "DivergenceError",
    "EvolutionState",
    "GrpoParams",
    "MetricsReport",
    "Query",
    "RewardParams",
    "Termination",
    "TrainingError",
    "TrainingExample",
    "TransportError",
    "validate",
]
