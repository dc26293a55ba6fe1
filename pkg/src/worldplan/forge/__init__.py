from .types import (
    EGO_LENGTH,
    EGO_WIDTH,
    NUM_WAYPOINTS,
    SIM_DT,
    SIM_TIMES,
    WAYPOINT_DT,
    WAYPOINT_TIMES,
    AgentTrack,
    EgoStatus,
    Scenario,
)
from .generate import GENERATOR_VERSION, GenerationError, GeneratorConfig, generate_scenario
