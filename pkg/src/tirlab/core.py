"""Shared domain types: actions, tool calls, rewards, advantages, trajectories.

Trajectories persist as JSON lines (one record per line). Floats are written
with ``repr`` precision, so a dump/load cycle is bit-exact.
"""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator


class ToolKind(enum.IntEnum):
    BROWSE = 0
    SEGMENT_RETRIEVE = 1
    FRAME_PICK = 2
    ZOOM_IN = 3

    @property
    def wire_name(self) -> str:
        return _WIRE_NAMES[self]

    @classmethod
    def from_wire(cls, name: str) -> "ToolKind":
        return _FROM_WIRE[name]

    @property
    def chain_rank(self) -> int | None:
        """Position in the grounding chain (segment < frame < zoom); None for browse."""
        return None if self is ToolKind.BROWSE else int(self)


_WIRE_NAMES = {
    ToolKind.BROWSE: "browse",
    ToolKind.SEGMENT_RETRIEVE: "segment_retrieve",
    ToolKind.FRAME_PICK: "frame_pick",
    ToolKind.ZOOM_IN: "zoom_in",
}
_FROM_WIRE = {v: k for k, v in _WIRE_NAMES.items()}

NUM_TOOLS = len(ToolKind)


@dataclass(frozen=True)
class ToolArgs:
    """Tool arguments. Only segment retrieval carries a payload (its query)."""

    query: tuple[float, ...] | None = None

    def to_json(self) -> dict[str, Any]:
        return {} if self.query is None else {"query": list(self.query)}


@dataclass(frozen=True)
class Answer:
    choice: int


@dataclass(frozen=True)
class Invoke:
    tool: ToolKind
    args: ToolArgs = ToolArgs()


AgentAction = Answer | Invoke


def action_to_json(action: AgentAction | None) -> dict[str, Any] | None:
    if action is None:
        return None
    if isinstance(action, Answer):
        return {"answer": action.choice}
    return {"tool": action.tool.wire_name, "arguments": action.args.to_json()}


def action_from_json(data: dict[str, Any] | None) -> AgentAction | None:
    if data is None:
        return None
    if "answer" in data:
        return Answer(int(data["answer"]))
    query = data["arguments"].get("query")
    return Invoke(
        ToolKind.from_wire(data["tool"]),
        ToolArgs(None if query is None else tuple(float(x) for x in query)),
    )


@dataclass(frozen=True)
class ToolCall:
    tool: ToolKind
    step: int  # 1-based index within the trajectory's tool-call sequence
    args: ToolArgs
    parse_valid: bool
    precondition_valid: bool
    observation_id: str

    def to_json(self) -> dict[str, Any]:
        return {
            "tool": self.tool.wire_name,
            "step": self.step,
            "arguments": self.args.to_json(),
            "parse_valid": self.parse_valid,
            "precondition_valid": self.precondition_valid,
            "observation_id": self.observation_id,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ToolCall":
        query = data["arguments"].get("query")
        return cls(
            tool=ToolKind.from_wire(data["tool"]),
            step=int(data["step"]),
            args=ToolArgs(None if query is None else tuple(float(x) for x in query)),
            parse_valid=bool(data["parse_valid"]),
            precondition_valid=bool(data["precondition_valid"]),
            observation_id=data["observation_id"],
        )


@dataclass(frozen=True)
class RewardBreakdown:
    acc: int
    fmt: int
    tool_bonus: float
    reward: float

    @classmethod
    def compose(
        cls,
        acc: int,
        fmt: int,
        bonus_value: float,
        n_calls: int,
        acc_coef: float = 1.0,
        fmt_coef: float = 1.0,
    ) -> "RewardBreakdown":
        bonus = bonus_value if n_calls > 0 else 0.0
        gated = bonus if acc > 0 else 0.0
        return cls(acc, fmt, bonus, acc_coef * acc + fmt_coef * fmt + gated)


@dataclass(frozen=True)
class PerCallAdvantage:
    step: int
    tool: ToolKind
    advantage: float


@dataclass(frozen=True)
class AdvantageBreakdown:
    grpo: float
    tagpo: float
    per_call: tuple[PerCallAdvantage, ...]
    weight: float

    def to_json(self) -> dict[str, Any]:
        return {
            "grpo": self.grpo,
            "tagpo": self.tagpo,
            "per_call": [[p.step, p.tool.wire_name, p.advantage] for p in self.per_call],
            "weight": self.weight,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "AdvantageBreakdown":
        return cls(
            grpo=data["grpo"],
            tagpo=data["tagpo"],
            per_call=tuple(
                PerCallAdvantage(int(s), ToolKind.from_wire(k), a) for s, k, a in data["per_call"]
            ),
            weight=data["weight"],
        )


class ParseStatus(str, enum.Enum):
    PARSED = "parsed"
    REPAIRED = "repaired"
    FAILED = "failed"


@dataclass
class Turn:
    """One agent turn: the state it acted from, what it emitted, and what came back."""

    state: dict[str, Any]
    head: int  # policy action head index, -1 when not policy-driven
    raw: str
    parse_status: ParseStatus
    action: AgentAction | None
    observation: str

    def to_json(self) -> dict[str, Any]:
        return {
            "state": self.state,
            "head": self.head,
            "raw": self.raw,
            "parse_status": self.parse_status.value,
            "action": action_to_json(self.action),
            "observation": self.observation,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Turn":
        return cls(
            state=data["state"],
            head=int(data["head"]),
            raw=data["raw"],
            parse_status=ParseStatus(data["parse_status"]),
            action=action_from_json(data["action"]),
            observation=data["observation"],
        )


@dataclass
class Trajectory:
    id: str
    question_id: str
    turns: list[Turn] = field(default_factory=list)
    tool_calls: list[ToolCall] = field(default_factory=list)
    final_answer: int | None = None
    truncated: bool = False
    acc: int = 0
    rewards: RewardBreakdown | None = None
    advantage: AdvantageBreakdown | None = None

    @property
    def finalized(self) -> bool:
        return self.final_answer is not None or self.truncated

    @property
    def num_calls(self) -> int:
        return len(self.tool_calls)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question_id": self.question_id,
            "turns": [t.to_json() for t in self.turns],
            "tool_calls": [c.to_json() for c in self.tool_calls],
            "final_answer": self.final_answer,
            "truncated": self.truncated,
            "acc": self.acc,
            "rewards": None if self.rewards is None else vars(self.rewards).copy(),
            "advantage": None if self.advantage is None else self.advantage.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Trajectory":
        return cls(
            id=data["id"],
            question_id=data["question_id"],
            turns=[Turn.from_json(t) for t in data["turns"]],
            tool_calls=[ToolCall.from_json(c) for c in data["tool_calls"]],
            final_answer=data["final_answer"],
            truncated=data["truncated"],
            acc=data["acc"],
            rewards=None if data["rewards"] is None else RewardBreakdown(**data["rewards"]),
            advantage=(
                None if data["advantage"] is None else AdvantageBreakdown.from_json(data["advantage"])
            ),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def loads(cls, line: str) -> "Trajectory":
        return cls.from_json(json.loads(line))


@dataclass
class RolloutGroup:
    question_id: str
    trajectories: list[Trajectory]

    def __post_init__(self) -> None:
        for t in self.trajectories:
            if t.question_id != self.question_id:
                raise ValueError(
                    f"trajectory {t.id} belongs to {t.question_id}, not {self.question_id}"
                )

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)


@dataclass(frozen=True)
class TrajectorySummary:
    turns: int
    tool_calls: int
    per_tool: dict[str, int]
    reward: float | None
    truncated: bool


def trajectory_summary(t: Trajectory) -> TrajectorySummary:
    if not t.finalized:
        raise ValueError(f"trajectory {t.id} is not finalized")
    invokes = [turn.action for turn in t.turns if isinstance(turn.action, Invoke)]
    if len(invokes) != len(t.tool_calls):
        raise ValueError(f"trajectory {t.id}: tool-call list disagrees with turn log")
    counts = Counter(a.tool.wire_name for a in invokes)
    return TrajectorySummary(
        turns=len(t.turns),
        tool_calls=len(invokes),
        per_tool={k.wire_name: counts.get(k.wire_name, 0) for k in ToolKind},
        reward=None if t.rewards is None else t.rewards.reward,
        truncated=t.truncated,
    )


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(t.dumps())
            fh.write("\n")


def read_trajectories(path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.loads(line) for line in fh if line.strip()]
