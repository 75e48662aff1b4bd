"""Executable tool semantics: browse, segment retrieval, frame pick, zoom-in.

Every ``execute_*`` returns a fresh observation state and ledger plus a
``ToolResult``. Chain-order violations and budget overflows are soft errors:
the call is recorded as precondition-invalid and the episode goes on.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import Invoke, ToolArgs, ToolKind
from .sandbox import ObservationState, Reached, SyntheticVideo, reveal_rule

TIE_TOL = 1e-12


@dataclass(frozen=True)
class BudgetConfig:
    total_budget: int = 1960
    frame_tokens: int = 196
    browse_frame_tokens: int = 49
    initial_frames: int = 8
    max_frames: int = 32


@dataclass(frozen=True)
class BudgetLedger:
    total_budget: int = 1960
    frame_tokens: int = 196
    browse_frame_tokens: int = 49
    max_frames: int = 32
    consumed: int = 0
    level: int = 0
    frames_loaded: int = 8

    @classmethod
    def from_config(cls, cfg: BudgetConfig | None = None) -> "BudgetLedger":
        cfg = cfg or BudgetConfig()
        return cls(
            total_budget=cfg.total_budget,
            frame_tokens=cfg.frame_tokens,
            browse_frame_tokens=cfg.browse_frame_tokens,
            max_frames=cfg.max_frames,
            frames_loaded=cfg.initial_frames,
        )

    @property
    def remaining(self) -> int:
        return self.total_budget - self.consumed

    def browse_cost(self) -> int:
        # Each level doubles frames (capped) and doubles both spatial sides,
        # so per-frame tokens grow x4 per level.
        frames = min(2 * self.frames_loaded, self.max_frames)
        return frames * self.browse_frame_tokens * 4 ** self.level


class ToolError(Exception):
    kind = "tool-error"


class BudgetExceeded(ToolError):
    kind = "budget-exceeded"


class ChainOrderViolation(ToolError):
    kind = "chain-order-violation"


@dataclass(frozen=True)
class ToolResult:
    observation: str
    valid: bool
    error: str | None = None


def _cos(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=-1)
    return (matrix @ query) / (norms * np.linalg.norm(query))


def _argmax_low(sims: np.ndarray) -> int:
    best = sims.max()
    return int(np.flatnonzero(sims >= best - TIE_TOL)[0])


def select_segment(video: SyntheticVideo, query: np.ndarray) -> int:
    return _argmax_low(_cos(video.segment_means, np.asarray(query, dtype=float)))


def select_frame(video: SyntheticVideo, segment: int, query: np.ndarray) -> int:
    size = video.config.segment_size
    lo = segment * size
    return lo + _argmax_low(_cos(video.frames[lo:lo + size], query))


def select_region(video: SyntheticVideo, frame: int, query: np.ndarray) -> int:
    return _argmax_low(_cos(video.regions[frame], query))


def validate_args(tool: ToolKind, args: ToolArgs, dim: int | None = None) -> None:
    if tool is ToolKind.SEGMENT_RETRIEVE:
        if args.query is None:
            raise ValueError("segment_retrieve needs a query")
        q = np.asarray(args.query, dtype=float)
        if dim is not None and q.shape != (dim,):
            raise ValueError(f"query has dimension {q.shape[0]}, expected {dim}")
        if not np.all(np.isfinite(q)) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("query must be a finite unit vector")
    elif args.query is not None:
        raise ValueError(f"{tool.wire_name} takes no arguments")


def _latch(video: SyntheticVideo, obs: ObservationState) -> ObservationState:
    if not obs.evidence_visible and reveal_rule(video.evidence, obs):
        obs.evidence_visible = True
    return obs


def _evidence_note(video: SyntheticVideo, obs: ObservationState) -> str:
    if obs.evidence_visible:
        return f"evidence=visible choice={video.evidence.correct_choice}"
    return "evidence=hidden"


def _reject(obs: ObservationState, ledger: BudgetLedger, tool: ToolKind, err: ToolError):
    return obs.copy(), ledger, ToolResult(f"{tool.wire_name}: error={err.kind} ({err})", False, err.kind)


def _charge(ledger: BudgetLedger, cost: int) -> BudgetLedger:
    if cost > ledger.remaining:
        raise BudgetExceeded(f"cost {cost} > remaining {ledger.remaining}")
    return replace(ledger, consumed=ledger.consumed + cost)


def execute_browse(video: SyntheticVideo, obs: ObservationState, ledger: BudgetLedger):
    try:
        cost = ledger.browse_cost()
        new_ledger = _charge(ledger, cost)
    except BudgetExceeded as err:
        return _reject(obs, ledger, ToolKind.BROWSE, err)
    new_ledger = replace(
        new_ledger,
        level=ledger.level + 1,
        frames_loaded=min(2 * ledger.frames_loaded, ledger.max_frames),
    )
    new = obs.copy()
    redundant = obs.reached is not Reached.COARSE
    new.reached = Reached.BROWSED
    new.tokens = new_ledger.consumed
    _latch(video, new)
    note = " redundant" if redundant else ""
    text = (
        f"browse: level={new_ledger.level} frames={new_ledger.frames_loaded} "
        f"tokens={cost}{note} {_evidence_note(video, new)}"
    )
    return new, new_ledger, ToolResult(text, True)


def execute_segment_retrieve(
    video: SyntheticVideo, args: ToolArgs, obs: ObservationState, ledger: BudgetLedger
):
    validate_args(ToolKind.SEGMENT_RETRIEVE, args, video.config.dim)
    cost = video.config.segment_size * ledger.frame_tokens
    try:
        new_ledger = _charge(ledger, cost)
    except BudgetExceeded as err:
        return _reject(obs, ledger, ToolKind.SEGMENT_RETRIEVE, err)
    seg = select_segment(video, np.asarray(args.query))
    new = obs.copy()
    new.reached = Reached.SEGMENT_SELECTED
    new.segment, new.frame, new.region = seg, None, None
    new.tokens = new_ledger.consumed
    _latch(video, new)
    text = f"segment_retrieve: segment={seg} tokens={cost} {_evidence_note(video, new)}"
    return new, new_ledger, ToolResult(text, True)


def execute_frame_pick(
    video: SyntheticVideo, obs: ObservationState, ledger: BudgetLedger, query: np.ndarray
):
    """Pick the best frame inside the selected segment.

    ``query`` is the question embedding; with no natural-language retrieving
    sentence the frame retriever has nothing else to condition on.
    """
    if obs.segment is None:
        return _reject(obs, ledger, ToolKind.FRAME_PICK, ChainOrderViolation("no segment selected"))
    try:
        new_ledger = _charge(ledger, ledger.frame_tokens)
    except BudgetExceeded as err:
        return _reject(obs, ledger, ToolKind.FRAME_PICK, err)
    frame = select_frame(video, obs.segment, query)
    new = obs.copy()
    new.reached = Reached.FRAME_SELECTED
    new.frame, new.region = frame, None
    new.tokens = new_ledger.consumed
    _latch(video, new)
    text = f"frame_pick: frame={frame} tokens={ledger.frame_tokens} {_evidence_note(video, new)}"
    return new, new_ledger, ToolResult(text, True)


def execute_zoom_in(
    video: SyntheticVideo, obs: ObservationState, ledger: BudgetLedger, query: np.ndarray
):
    if obs.frame is None:
        return _reject(obs, ledger, ToolKind.ZOOM_IN, ChainOrderViolation("no frame selected"))
    try:
        new_ledger = _charge(ledger, ledger.frame_tokens)
    except BudgetExceeded as err:
        return _reject(obs, ledger, ToolKind.ZOOM_IN, err)
    region = select_region(video, obs.frame, query)
    new = obs.copy()
    new.reached = Reached.REGION_SELECTED
    new.region = region
    new.tokens = new_ledger.consumed
    _latch(video, new)
    text = f"zoom_in: region={region} tokens={ledger.frame_tokens} {_evidence_note(video, new)}"
    return new, new_ledger, ToolResult(text, True)


def execute(
    video: SyntheticVideo,
    action: Invoke,
    obs: ObservationState,
    ledger: BudgetLedger,
    question_query: np.ndarray,
):
    """Dispatch one tool invocation."""
    tool = action.tool
    if tool is ToolKind.BROWSE:
        return execute_browse(video, obs, ledger)
    if tool is ToolKind.SEGMENT_RETRIEVE:
        return execute_segment_retrieve(video, action.args, obs, ledger)
    if tool is ToolKind.FRAME_PICK:
        return execute_frame_pick(video, obs, ledger, question_query)
    return execute_zoom_in(video, obs, ledger, question_query)
