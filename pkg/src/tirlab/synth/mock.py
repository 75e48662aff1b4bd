"""Built-in scripts for the table-driven mock client.

Each script answers every pipeline stage deterministically from the request
context (the sandbox item, turn number, trial index) and a seed.
"""

from __future__ import annotations

import zlib
from typing import Any, Callable, Mapping

from ..core import Answer, Invoke, ToolArgs, ToolKind
from ..sandbox import Granularity, SandboxItem
from ..toolparse import serialize
from .clients import ScriptedClient
from .pipeline import BASE_PROMPT

MOCK_SCRIPTS = ("optimal", "wasteful", "chain-violating")

_CHAINS = {
    Granularity.GLOBAL: (ToolKind.BROWSE,),
    Granularity.SEGMENT: (ToolKind.SEGMENT_RETRIEVE,),
    Granularity.FRAME: (ToolKind.SEGMENT_RETRIEVE, ToolKind.FRAME_PICK),
    Granularity.REGION: (ToolKind.SEGMENT_RETRIEVE, ToolKind.FRAME_PICK, ToolKind.ZOOM_IN),
}
_EXTRA = {
    Granularity.GLOBAL: ToolKind.SEGMENT_RETRIEVE,
    Granularity.SEGMENT: ToolKind.FRAME_PICK,
    Granularity.FRAME: ToolKind.ZOOM_IN,
    Granularity.REGION: ToolKind.ZOOM_IN,
}


def minimal_chain(item: SandboxItem) -> tuple[ToolKind, ...]:
    return _CHAINS[item.video.evidence.granularity]


def _invoke(item: SandboxItem, tool: ToolKind) -> str:
    args = ToolArgs(tuple(item.question.query.tolist())) if tool is ToolKind.SEGMENT_RETRIEVE else ToolArgs()
    return serialize(Invoke(tool, args))


def _wrong(item: SandboxItem) -> int:
    return (item.video.evidence.correct_choice + 1) % item.question.choices


def solve_count(question_id: str, seed: int, trials: int = 10) -> int:
    """How many of ``trials`` curation answers the mock gets right for a question."""
    return zlib.crc32(f"{seed}:{question_id}".encode("utf-8")) % (trials + 1)


def _generate(wasteful: bool) -> Callable[[Mapping[str, Any]], str]:
    def respond(ctx: Mapping[str, Any]) -> str:
        item = ctx["item"]
        plan = minimal_chain(item)
        if wasteful:
            plan = plan + (_EXTRA[item.video.evidence.granularity],)
        turn = ctx["turn"]
        if turn < len(plan):
            tool = plan[turn]
            return f"The evidence is not visible yet; calling {tool.wire_name}.\n" + _invoke(item, tool)
        return "The evidence is visible now.\n" + serialize(Answer(item.video.evidence.correct_choice))

    return respond


def _order(chain_violating: bool) -> Callable[[Mapping[str, Any]], str]:
    def respond(ctx: Mapping[str, Any]) -> str:
        if chain_violating:
            return "zoom, segment"
        return ", ".join(t.wire_name for t in minimal_chain(ctx["item"]))

    return respond


def _curate(seed: int) -> Callable[[Mapping[str, Any]], str]:
    def respond(ctx: Mapping[str, Any]) -> str:
        item = ctx["item"]
        trials = ctx.get("trials", 10)
        right = ctx["trial"] < solve_count(item.question.id, seed, trials)
        choice = item.video.evidence.correct_choice if right else _wrong(item)
        return serialize(Answer(choice))

    return respond


def _adjudicate(ctx: Mapping[str, Any]) -> str:
    return "scores: " + ", ".join("8" for _ in ctx["candidates"])


def mock_script(name: str, seed: int = 0) -> dict[str, Any]:
    if name not in MOCK_SCRIPTS:
        raise ValueError(f"unknown mock script {name!r}; expected one of {', '.join(MOCK_SCRIPTS)}")
    return {
        "necessity": lambda ctx: serialize(Answer(_wrong(ctx["item"]))),
        "order": _order(name == "chain-violating"),
        "rewrite": "You are a careful video analyst.\n" + BASE_PROMPT,
        "generate": _generate(name == "wasteful"),
        "adjudicate": _adjudicate,
        "curate": _curate(seed),
    }


def mock_client(name: str = "optimal", seed: int = 0) -> ScriptedClient:
    return ScriptedClient(mock_script(name, seed))
