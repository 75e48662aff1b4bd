"""Episode rewards and per-call tool rewards."""

from __future__ import annotations

from dataclasses import dataclass

from .core import ParseStatus, RewardBreakdown, RolloutGroup, ToolKind, Trajectory


@dataclass(frozen=True)
class RewardConfig:
    tool_bonus: float = 0.5
    gamma: float = 0.9
    accept_repaired_format: bool = True
    acc_coef: float = 1.0
    fmt_coef: float = 1.0

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.tool_bonus < 0:
            raise ValueError("tool_bonus must be non-negative")


@dataclass(frozen=True)
class CallReward:
    trajectory_id: str
    step: int
    tool: ToolKind
    reward: float


def format_ok(t: Trajectory, accept_repaired: bool = True) -> bool:
    allowed = (ParseStatus.PARSED, ParseStatus.REPAIRED) if accept_repaired else (ParseStatus.PARSED,)
    return all(turn.parse_status in allowed for turn in t.turns)


def episode_reward(t: Trajectory, cfg: RewardConfig | None = None) -> RewardBreakdown:
    cfg = cfg or RewardConfig()
    if not t.finalized:
        raise ValueError(f"trajectory {t.id} is not finalized")
    acc = 0 if t.truncated else int(t.acc)
    fmt = int(format_ok(t, cfg.accept_repaired_format))
    return RewardBreakdown.compose(acc, fmt, cfg.tool_bonus, t.num_calls, cfg.acc_coef, cfg.fmt_coef)


def per_call_rewards(group: RolloutGroup, cfg: RewardConfig | None = None) -> list[CallReward]:
    """Decayed reward for every tool call: ``[acc > 0] * gamma**(L - j) * R``."""
    cfg = cfg or RewardConfig()
    table = []
    for t in group:
        if t.rewards is None:
            raise ValueError(f"trajectory {t.id} has no episode reward")
        L = t.num_calls
        ok = t.rewards.acc > 0
        for call in t.tool_calls:
            r = cfg.gamma ** (L - call.step) * t.rewards.reward if ok else 0.0
            table.append(CallReward(t.id, call.step, call.tool, r))
    return table
