"""Five-stage sandbox trajectory synthesis with adjudication and difficulty curation.

Stages per item: tool-necessity filtering, tool-order prediction, system-prompt
rewriting, trajectory generation inside the sandbox, adjudication. Curation
then keeps items whose correct count over repeated answering lies strictly
between 3 and 7 (of 10 by default).
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable

from ..core import Answer, Invoke, ParseStatus, ToolCall, ToolKind, Trajectory, Turn
from ..rewards import RewardConfig, episode_reward
from ..sandbox import ObservationState, SandboxItem, judge_answer
from ..toolkit import BudgetConfig, BudgetLedger, execute
from ..toolparse import ANSWER_CLOSE, ANSWER_OPEN, TOOL_CLOSE, TOOL_OPEN, parse_strict, parse_with_repair
from .clients import ClientError, ModelClient

STAGES = ("necessity", "order", "rewrite", "generate", "adjudicate", "curate")

BASE_PROMPT = (
    "You answer multiple-choice questions about a long video. Think step by step, then "
    "emit exactly one action per turn.\n"
    "Tools (call as <tool_call>{\"name\": NAME, \"arguments\": {...}}</tool_call>):\n"
    "- browse: re-watch the whole video at higher resolution and frame rate\n"
    "- segment_retrieve: {\"query\": [...]} select the segment closest to the query\n"
    "- frame_pick: pick the key frame inside the selected segment\n"
    "- zoom_in: crop the most relevant region of the selected frame\n"
    "Answer with <answer>K</answer>."
)
REQUIRED_MARKERS = (
    TOOL_OPEN, TOOL_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, *(k.wire_name for k in ToolKind),
)

_ORDER_ALIASES = {
    "browse": ToolKind.BROWSE,
    "browsing": ToolKind.BROWSE,
    "segment": ToolKind.SEGMENT_RETRIEVE,
    "segment_retrieve": ToolKind.SEGMENT_RETRIEVE,
    "seg": ToolKind.SEGMENT_RETRIEVE,
    "frame": ToolKind.FRAME_PICK,
    "frame_pick": ToolKind.FRAME_PICK,
    "zoom": ToolKind.ZOOM_IN,
    "zoom_in": ToolKind.ZOOM_IN,
}


@dataclass(frozen=True)
class SynthConfig:
    client: str = "mock"
    mock_script: str = "optimal"
    endpoint: str = ""
    model: str = "glm-4.5v"
    temperature: float = 0.0
    token_env: str = "TIRLAB_API_TOKEN"
    timeout: float = 30.0
    retries: int = 2
    retry_cap: int = 2
    candidates: int = 2
    keep_top: int = 1
    trials: int = 10
    workers: int = 1

    def validate(self) -> None:
        if self.client not in ("mock", "remote"):
            raise ValueError(f"client must be 'mock' or 'remote', got {self.client!r}")
        for name in ("retry_cap", "candidates", "keep_top", "trials", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class Candidate:
    trajectory: Trajectory
    reasoning: list[str] = field(default_factory=list)
    repairs: list[tuple[int, tuple[str, ...]]] = field(default_factory=list)
    score: float | None = None


@dataclass
class SynthItem:
    item: SandboxItem
    status: dict[str, str] = field(default_factory=dict)
    necessity: str | None = None
    order: list[ToolKind] | None = None
    prompt: str = BASE_PROMPT
    prompt_flagged: bool = False
    candidates: list[Candidate] = field(default_factory=list)
    discarded: int = 0
    ranked: list[Candidate] = field(default_factory=list)
    correct_count: int | None = None
    adjudicated: bool = False
    curated: bool = False
    retry: bool = False

    @property
    def question_id(self) -> str:
        return self.item.question.id

    @property
    def kept(self) -> bool:
        return self.adjudicated and self.curated

    @property
    def exemplars(self) -> list[Candidate]:
        return self.ranked if self.kept else []


def _ctx(si: SynthItem, stage: str, **extra: Any) -> dict[str, Any]:
    return {"stage": stage, "question_id": si.question_id, "item": si.item, **extra}


def _question_text(si: SynthItem) -> str:
    q = si.item.question
    cue = "global" if q.cue.name == "GLOBAL_CUE" else "local"
    return f"Question {q.id} ({cue} intent, {q.choices} choices)."


# -- stage 1 -------------------------------------------------------------------------


def filter_necessity(si: SynthItem, client: ModelClient) -> str:
    """Ask for a tool-free answer; a correct one sets the item aside."""
    prompt = _question_text(si) + " Answer directly without tools."
    try:
        text = client.submit(prompt, _ctx(si, "necessity"))
    except ClientError as err:
        si.status["necessity"] = f"failed: {err}"
        si.retry = True
        return "failed"
    out = parse_strict(_extract_action(text))
    correct = si.item.video.evidence.correct_choice
    if out.ok and isinstance(out.action, Answer) and out.action.choice == correct:
        si.necessity = "direct-answerable"
    else:
        si.necessity = "needs-tools"
    si.status["necessity"] = si.necessity
    return si.necessity


# -- stage 2 -------------------------------------------------------------------------


def parse_order(text: str) -> list[ToolKind]:
    tokens = [t for t in re.split(r"[\s,;>\-\[\]\"'→]+", text.strip().lower()) if t]
    if not tokens:
        raise ValueError("empty tool order")
    try:
        return [_ORDER_ALIASES[t] for t in tokens]
    except KeyError as err:
        raise ValueError(f"unknown tool {err.args[0]!r}") from None


def chain_legal(order: Iterable[ToolKind]) -> bool:
    seen_seg = seen_frame = False
    for k in order:
        if k is ToolKind.SEGMENT_RETRIEVE:
            seen_seg = True
        elif k is ToolKind.FRAME_PICK:
            if not seen_seg:
                return False
            seen_frame = True
        elif k is ToolKind.ZOOM_IN and not seen_frame:
            return False
    return True


def predict_order(si: SynthItem, client: ModelClient, retry_cap: int = 2) -> list[ToolKind] | None:
    prompt = (
        _question_text(si)
        + " Given the toolkit below, list the tools you would call, in order, comma separated.\n"
        + BASE_PROMPT
    )
    problems = []
    for attempt in range(retry_cap):
        try:
            text = client.submit(prompt, _ctx(si, "order", attempt=attempt))
            order = parse_order(text)
        except (ClientError, ValueError) as err:
            problems.append(str(err))
            continue
        if not chain_legal(order):
            problems.append(f"chain-order violation: {text.strip()}")
            continue
        si.order = order
        si.status["order"] = "ok" if attempt == 0 else f"ok after {attempt + 1} attempts"
        return order
    si.status["order"] = "failed: " + "; ".join(problems)
    return None


# -- stage 3 -------------------------------------------------------------------------


def missing_markers(prompt: str) -> list[str]:
    return [m for m in REQUIRED_MARKERS if m not in prompt]


def rewrite_prompt(si: SynthItem, client: ModelClient) -> str:
    request = "Rewrite this system prompt in your own words. Keep every tool name and tag.\n" + BASE_PROMPT
    try:
        text = client.submit(request, _ctx(si, "rewrite"))
    except ClientError as err:
        text, reason = "", str(err)
    else:
        reason = ""
    missing = missing_markers(text) if text.strip() else ["<empty>"]
    if missing or reason:
        si.prompt = BASE_PROMPT
        si.prompt_flagged = True
        si.status["rewrite"] = "kept original: " + (reason or "missing " + ", ".join(missing))
    else:
        si.prompt = text
        si.status["rewrite"] = "ok"
    return si.prompt


# -- stage 4 -------------------------------------------------------------------------

_ACTION_SPAN = re.compile(
    r"(<tool_call>.*?</tool_call>|<answer>.*?</answer>)", re.DOTALL
)


def _extract_action(text: str) -> str:
    """The last complete action span of a turn, or its unterminated tail."""
    spans = _ACTION_SPAN.findall(text)
    if spans:
        return spans[-1]
    starts = [i for i in (text.rfind(TOOL_OPEN), text.rfind(ANSWER_OPEN)) if i >= 0]
    if starts:
        return text[max(starts):].strip()
    return text.strip()


def generate_trajectory(
    si: SynthItem,
    client: ModelClient,
    index: int = 0,
    max_turns: int = 4,
    budget: BudgetConfig | None = None,
    reward_cfg: RewardConfig | None = None,
) -> Candidate | None:
    """Let the client drive one episode in the sandbox; None when discarded."""
    video, q = si.item.video, si.item.question
    obs = ObservationState()
    ledger = BudgetLedger.from_config(budget)
    traj = Trajectory(f"{q.id}/c{index}", q.id)
    cand = Candidate(traj)
    history: list[dict[str, str]] = []
    prompt = _question_text(si) + " Predicted tool order: " + ", ".join(k.wire_name for k in si.order or [])
    for turn in range(max_turns):
        obs.turn = turn
        try:
            text = client.submit(
                prompt,
                _ctx(si, "generate", candidate=index, turn=turn, system=si.prompt,
                     history=list(history), order=list(si.order or [])),
            )
        except ClientError as err:
            si.status[f"generate/c{index}"] = f"failed: {err}"
            return None
        raw = _extract_action(text)
        outcome = parse_with_repair(raw, video.config.dim)
        if not outcome.ok:
            si.status[f"generate/c{index}"] = f"discarded: unparseable ({outcome.reason})"
            return None
        if outcome.passes:
            cand.repairs.append((turn, outcome.passes))
        cand.reasoning.append(text)
        snapshot = obs.snapshot()
        action = outcome.action
        if isinstance(action, Answer):
            if not 0 <= action.choice < q.choices:
                si.status[f"generate/c{index}"] = "discarded: answer out of range"
                return None
            traj.acc = judge_answer(video.evidence, q.choices, action.choice, obs)
            traj.final_answer = action.choice
            traj.turns.append(Turn(snapshot, -1, raw, outcome.status, action, "final"))
            break
        obs, ledger, result = execute(video, action, obs, ledger, q.query)
        traj.tool_calls.append(
            ToolCall(action.tool, len(traj.tool_calls) + 1, action.args,
                     outcome.status is ParseStatus.PARSED, result.valid, f"{traj.id}/t{turn}")
        )
        traj.turns.append(Turn(snapshot, -1, raw, outcome.status, action, result.observation))
        history.append({"role": "assistant", "content": text})
        history.append({"role": "user", "content": result.observation})
        prompt = "Observation: " + result.observation
    else:
        traj.truncated = True
    traj.rewards = episode_reward(traj, reward_cfg)
    si.status[f"generate/c{index}"] = "ok"
    return cand


# -- stage 5 -------------------------------------------------------------------------


def post_visibility_calls(t: Trajectory) -> int:
    """Tool calls issued while the evidence was already visible."""
    return sum(
        1 for turn in t.turns
        if isinstance(turn.action, Invoke) and turn.state.get("evidence_visible")
    )


def minimal(t: Trajectory) -> bool:
    return (
        t.acc == 1
        and not t.truncated
        and post_visibility_calls(t) == 0
        and all(c.precondition_valid for c in t.tool_calls)
    )


def _parse_scores(text: str, n: int) -> list[float]:
    nums = re.findall(r"-?\d+(?:\.\d+)?", text.split(":", 1)[-1] if ":" in text else text)
    if len(nums) != n:
        raise ValueError(f"expected {n} scores, got {len(nums)}")
    return [float(x) for x in nums]


def adjudicate(
    candidates: list[Candidate], client: ModelClient, si: SynthItem | None = None, retry_cap: int = 2
) -> list[Candidate]:
    """Rule-based minimality filter, then client scores (higher is better).

    Ties fall back to fewer tool calls, then fewer turns, then generation order.
    """
    if not candidates:
        raise ValueError("adjudicate needs at least one candidate")
    survivors = [c for c in candidates if minimal(c.trajectory)]
    if not survivors:
        if si is not None:
            si.status["adjudicate"] = "no candidate passed the minimality filter"
        return []
    listing = "\n".join(
        f"[{i}] calls={c.trajectory.num_calls} turns={len(c.trajectory.turns)} "
        + " | ".join(turn.raw for turn in c.trajectory.turns)
        for i, c in enumerate(survivors)
    )
    prompt = "Score each trajectory for conciseness and precision (0-10), as 'scores: a, b, ...'.\n" + listing
    scores = None
    problems = []
    for attempt in range(retry_cap):
        ctx = {"stage": "adjudicate", "candidates": survivors, "attempt": attempt}
        if si is not None:
            ctx.update(question_id=si.question_id, item=si.item)
        try:
            scores = _parse_scores(client.submit(prompt, ctx), len(survivors))
            break
        except (ClientError, ValueError) as err:
            problems.append(str(err))
    if scores is None:
        if si is not None:
            si.status["adjudicate"] = "failed: " + "; ".join(problems)
        return []
    for c, s in zip(survivors, scores):
        c.score = s
    order = sorted(
        range(len(survivors)),
        key=lambda i: (-survivors[i].score, survivors[i].trajectory.num_calls,
                       len(survivors[i].trajectory.turns), i),
    )
    if si is not None:
        si.status["adjudicate"] = f"ranked {len(survivors)} of {len(candidates)}"
    return [survivors[i] for i in order]


# -- curation ------------------------------------------------------------------------


def count_correct(si: SynthItem, client: ModelClient, trials: int = 10) -> int:
    correct = 0
    target = si.item.video.evidence.correct_choice
    for k in range(trials):
        try:
            text = client.submit(_question_text(si) + " Answer.", _ctx(si, "curate", trial=k, trials=trials))
        except ClientError:
            continue
        out = parse_strict(_extract_action(text))
        correct += int(out.ok and isinstance(out.action, Answer) and out.action.choice == target)
    return correct


def in_band(correct: int, lo: int = 3, hi: int = 7) -> bool:
    return lo < correct < hi


def curate_difficulty(items: list[SynthItem], client: ModelClient, trials: int = 10) -> list[SynthItem]:
    """Keep items answered correctly strictly between 3 and 7 times out of ``trials``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    kept = []
    for si in items:
        si.correct_count = count_correct(si, client, trials)
        si.curated = in_band(si.correct_count)
        si.status["curate"] = f"{si.correct_count}/{trials} -> {'kept' if si.curated else 'dropped'}"
        if si.curated:
            kept.append(si)
    return kept


# -- driver --------------------------------------------------------------------------


def process_item(
    si: SynthItem,
    client: ModelClient,
    cfg: SynthConfig,
    budget: BudgetConfig | None = None,
    max_turns: int = 4,
) -> SynthItem:
    """Stages 1-5 for one item."""
    if filter_necessity(si, client) != "needs-tools":
        return si
    if predict_order(si, client, cfg.retry_cap) is None:
        return si
    rewrite_prompt(si, client)
    for k in range(cfg.candidates):
        cand = generate_trajectory(si, client, k, max_turns, budget)
        if cand is None:
            si.discarded += 1
        else:
            si.candidates.append(cand)
    if not si.candidates:
        si.status["adjudicate"] = "no candidates"
        return si
    ranked = adjudicate(si.candidates, client, si, cfg.retry_cap)
    si.ranked = ranked[: cfg.keep_top]
    si.adjudicated = bool(si.ranked)
    return si


@dataclass
class SynthReport:
    items: list[SynthItem]

    def stage_counts(self) -> dict[str, dict[str, int]]:
        def tally(pred) -> int:
            return sum(1 for si in self.items if pred(si))

        return {
            "necessity": {
                "direct_answerable": tally(lambda s: s.necessity == "direct-answerable"),
                "needs_tools": tally(lambda s: s.necessity == "needs-tools"),
                "failed": tally(lambda s: s.status.get("necessity", "").startswith("failed")),
            },
            "order": {
                "ok": tally(lambda s: s.order is not None),
                "failed": tally(lambda s: s.status.get("order", "").startswith("failed")),
            },
            "rewrite": {
                "ok": tally(lambda s: s.status.get("rewrite") == "ok"),
                "kept_original": tally(lambda s: s.prompt_flagged),
            },
            "generate": {
                "candidates": sum(len(s.candidates) for s in self.items),
                "discarded": sum(s.discarded for s in self.items),
            },
            "adjudicate": {
                "passed": tally(lambda s: s.adjudicated),
                "rejected": tally(lambda s: s.order is not None and not s.adjudicated),
            },
            "curate": {
                "kept": tally(lambda s: s.curated),
                "dropped": tally(lambda s: s.correct_count is not None and not s.curated),
            },
            "kept": {"items": tally(lambda s: s.kept)},
        }

    @property
    def exemplars(self) -> list[Candidate]:
        return [c for si in self.items for c in si.exemplars]


def run_pipeline(
    corpus: list[SandboxItem],
    client: ModelClient,
    cfg: SynthConfig | None = None,
    curate_client: ModelClient | None = None,
    budget: BudgetConfig | None = None,
    max_turns: int = 4,
) -> SynthReport:
    cfg = cfg or SynthConfig()
    items = [SynthItem(it) for it in corpus]
    if cfg.workers > 1 and not getattr(client, "single_flight", True):
        with ThreadPoolExecutor(cfg.workers) as pool:
            items = list(pool.map(lambda si: process_item(si, client, cfg, budget, max_turns), items))
    else:
        items = [process_item(si, client, cfg, budget, max_turns) for si in items]
    curate_difficulty([si for si in items if si.adjudicated], curate_client or client, cfg.trials)
    return SynthReport(items)


# -- replay and persistence ------------------------------------------------------------


def replay(t: Trajectory, item: SandboxItem, budget: BudgetConfig | None = None) -> list[str]:
    """Re-run a logged trajectory's action strings through the toolkit."""
    video, q = item.video, item.question
    obs = ObservationState()
    ledger = BudgetLedger.from_config(budget)
    out = []
    for turn_no, turn in enumerate(t.turns):
        obs.turn = turn_no
        outcome = parse_with_repair(turn.raw, video.config.dim)
        if not outcome.ok:
            raise ValueError(f"{t.id}: turn {turn_no} no longer parses")
        if isinstance(outcome.action, Answer):
            out.append("final")
            break
        obs, ledger, result = execute(video, outcome.action, obs, ledger, q.query)
        out.append(result.observation)
    return out


def provenance_record(si: SynthItem) -> dict[str, Any]:
    return {
        "question_id": si.question_id,
        "status": si.status,
        "necessity": si.necessity,
        "order": None if si.order is None else [k.wire_name for k in si.order],
        "prompt_flagged": si.prompt_flagged,
        "candidates": [
            {
                "trajectory_id": c.trajectory.id,
                "acc": c.trajectory.acc,
                "tool_calls": c.trajectory.num_calls,
                "repairs": [[turn, list(p)] for turn, p in c.repairs],
                "score": c.score,
            }
            for c in si.candidates
        ],
        "ranks": [c.trajectory.id for c in si.ranked],
        "correct_count": si.correct_count,
        "kept": si.kept,
    }


def write_outputs(report: SynthReport, exemplar_path, provenance_path) -> None:
    with open(exemplar_path, "w", encoding="utf-8") as fh:
        for c in report.exemplars:
            fh.write(c.trajectory.dumps() + "\n")
    with open(provenance_path, "w", encoding="utf-8") as fh:
        for si in report.items:
            fh.write(json.dumps(provenance_record(si), separators=(",", ":"), sort_keys=True) + "\n")
