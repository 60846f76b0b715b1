"""Guideline-driven agent runtime for simulated robotic ultrasound scanning."""

from .agent import EpisodeConfig, Trace, build_context, parse_response, replay, run_episode
from .guidelines import Guideline, load_store, parse_guideline, retrieve
from .rewards import RewardBreakdown, aggregate, score_tool_call, score_trace
from .tools import ToolCall, canonicalize, default_registry, validate_call
from .world import init_world

__version__ = "0.1.0"

__all__ = [
    "EpisodeConfig",
    "Guideline",
    "RewardBreakdown",
    "ToolCall",
    "Trace",
    "aggregate",
    "build_context",
    "canonicalize",
    "default_registry",
    "init_world",
    "load_store",
    "parse_guideline",
    "parse_response",
    "replay",
    "retrieve",
    "run_episode",
    "score_tool_call",
    "score_trace",
    "validate_call",
]
