"""Cooperative multi-UAV terrain monitoring simulator and training engine."""

__version__ = "0.1.0"

from .gridmap import (
    GroundTruthMap,
    ImportanceWeights,
    Measurement,
    OccupancyGrid,
    SensorModel,
    footprint,
    fuse_measurement,
    map_entropy,
    simulate_measurement,
    weighted_cell_entropy,
)
from .environment import (
    Action,
    AgentLocalState,
    CommMessage,
    EnvConfig,
    GlobalState,
    NoiseStreams,
    TerrainEnv,
    exchange_messages,
    generate_terrain,
    initial_state,
    reward,
    step,
    valid_actions,
)

__all__ = [
    "Action",
    "AgentLocalState",
    "CommMessage",
    "EnvConfig",
    "GlobalState",
    "GroundTruthMap",
    "ImportanceWeights",
    "Measurement",
    "NoiseStreams",
    "OccupancyGrid",
    "SensorModel",
    "TerrainEnv",
    "exchange_messages",
    "footprint",
    "fuse_measurement",
    "generate_terrain",
    "initial_state",
    "map_entropy",
    "reward",
    "simulate_measurement",
    "step",
    "valid_actions",
    "weighted_cell_entropy",
]
