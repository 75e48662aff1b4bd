"""Sandbox trajectory synthesis: model clients, the staged pipeline, mock scripts."""

from .clients import ChatCompletionClient, ClientError, ClientTimeout, ModelClient, ScriptedClient
from .mock import MOCK_SCRIPTS, mock_client, mock_script, solve_count
from .pipeline import (
    Candidate, SynthConfig, SynthItem, SynthReport, adjudicate, curate_difficulty,
    filter_necessity, generate_trajectory, predict_order, replay, rewrite_prompt, run_pipeline,
    write_outputs,
)

__all__ = [
    "Candidate", "ChatCompletionClient", "ClientError", "ClientTimeout", "MOCK_SCRIPTS",
    "ModelClient", "ScriptedClient", "SynthConfig", "SynthItem", "SynthReport", "adjudicate",
    "curate_difficulty", "filter_necessity", "generate_trajectory", "mock_client", "mock_script",
    "predict_order", "replay", "rewrite_prompt", "run_pipeline", "solve_count", "write_outputs",
]
