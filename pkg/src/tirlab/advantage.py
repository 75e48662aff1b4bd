"""Group-relative advantages.

GRPO standardizes episode rewards within a rollout group. TAGPO standardizes
each tool call's decayed reward against all calls of the same tool in the
group, then averages a trajectory's per-call advantages. The composite weight
is their sum. Standard deviations are population deviations; a group whose
spread is (numerically) zero yields all-zero advantages.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Literal

from .core import AdvantageBreakdown, PerCallAdvantage, RolloutGroup, ToolKind
from .rewards import CallReward, RewardConfig, per_call_rewards

ZERO_STD = 1e-12

Scope = Literal["group", "batch"]


def _mean_std(xs: list[float]) -> tuple[float, float]:
    n = len(xs)
    mu = math.fsum(xs) / n
    var = math.fsum((x - mu) ** 2 for x in xs) / n
    return mu, math.sqrt(var)


def standardize(xs: list[float]) -> tuple[list[float], bool]:
    """Standard scores of ``xs`` and whether the spread was zero."""
    mu, sd = _mean_std(xs)
    if sd < ZERO_STD:
        return [0.0] * len(xs), True
    return [(x - mu) / sd for x in xs], False


@dataclass(frozen=True)
class GroupStats:
    episode_mean: float
    episode_std: float
    tool_mean: dict[ToolKind, float]
    tool_std: dict[ToolKind, float]


def group_stats(group: RolloutGroup, table: list[CallReward]) -> GroupStats:
    ep_mu, ep_sd = _mean_std([t.rewards.reward for t in group])
    by_tool: dict[ToolKind, list[float]] = defaultdict(list)
    for row in table:
        by_tool[row.tool].append(row.reward)
    means, stds = {}, {}
    for k, xs in by_tool.items():
        means[k], stds[k] = _mean_std(xs)
    return GroupStats(ep_mu, ep_sd, means, stds)


@dataclass(frozen=True)
class GrpoResult:
    advantages: list[float]
    degenerate: bool


def grpo_advantages(group: RolloutGroup) -> GrpoResult:
    if len(group) < 2:
        raise ValueError("GRPO needs at least two rollouts per group")
    adv, degenerate = standardize([t.rewards.reward for t in group])
    return GrpoResult(adv, degenerate)


@dataclass(frozen=True)
class TagpoResult:
    per_call: dict[str, list[PerCallAdvantage]]
    trajectory: list[float]


def _tagpo_from_tables(
    groups: list[RolloutGroup], tables: list[list[CallReward]]
) -> list[TagpoResult]:
    # tables[g] holds rows of group g; statistics pool over every row passed in
    pooled: dict[ToolKind, list[tuple[int, int]]] = defaultdict(list)
    for g, table in enumerate(tables):
        for r, row in enumerate(table):
            pooled[row.tool].append((g, r))
    adv = [[0.0] * len(table) for table in tables]
    for tool, refs in pooled.items():
        scores, _ = standardize([tables[g][r].reward for g, r in refs])
        for (g, r), a in zip(refs, scores):
            adv[g][r] = a
    results = []
    for g, group in enumerate(groups):
        per_call: dict[str, list[PerCallAdvantage]] = {t.id: [] for t in group}
        for row, a in zip(tables[g], adv[g]):
            per_call[row.trajectory_id].append(PerCallAdvantage(row.step, row.tool, a))
        traj = [
            math.fsum(p.advantage for p in per_call[t.id]) / len(per_call[t.id]) if per_call[t.id] else 0.0
            for t in group
        ]
        results.append(TagpoResult(per_call, traj))
    return results


def tagpo_advantages(
    group: RolloutGroup, cfg: RewardConfig | None = None, table: list[CallReward] | None = None
) -> TagpoResult:
    if table is None:
        table = per_call_rewards(group, cfg)
    return _tagpo_from_tables([group], [table])[0]


def composite_weights(
    group: RolloutGroup, cfg: RewardConfig | None = None
) -> tuple[list[float], bool]:
    """Attach an AdvantageBreakdown to every trajectory; returns (weights, degenerate)."""
    grpo = grpo_advantages(group)
    tagpo = tagpo_advantages(group, cfg)
    _attach(group, grpo.advantages, tagpo)
    return [t.advantage.weight for t in group], grpo.degenerate


def _attach(group: RolloutGroup, grpo: list[float], tagpo: TagpoResult) -> None:
    for t, a_g, a_t in zip(group, grpo, tagpo.trajectory):
        t.advantage = AdvantageBreakdown(a_g, a_t, tuple(tagpo.per_call[t.id]), a_g + a_t)


def compute_advantages(
    groups: list[RolloutGroup], cfg: RewardConfig | None = None, scope: Scope = "group"
) -> list[bool]:
    """Advantages for a batch of groups; returns each group's degenerate flag.

    ``scope="batch"`` pools the per-tool statistics across all groups of the
    batch instead of normalizing within each question's rollouts.
    """
    tables = [per_call_rewards(g, cfg) for g in groups]
    if scope == "group":
        tagpo = [_tagpo_from_tables([g], [tab])[0] for g, tab in zip(groups, tables)]
    elif scope == "batch":
        tagpo = _tagpo_from_tables(groups, tables)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    flags = []
    for g, tg in zip(groups, tagpo):
        grpo = grpo_advantages(g)
        _attach(g, grpo.advantages, tg)
        flags.append(grpo.degenerate)
    return flags


def rollout_filter(groups: Iterable[RolloutGroup]) -> list[RolloutGroup]:
    """Drop groups whose episode rewards have zero spread."""
    return [g for g in groups if _mean_std([t.rewards.reward for t in g])[1] >= ZERO_STD]
