"""Multi-turn rollout engine, tabular softmax policy and the advantage-weighted update."""

from __future__ import annotations

import bisect
import csv
import math
import zlib
from dataclasses import dataclass
from typing import Any, Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .advantage import compute_advantages, rollout_filter
from .core import (
    Answer, Invoke, ParseStatus, RolloutGroup, ToolArgs, ToolCall, ToolKind, Trajectory, Turn,
)
from .rewards import RewardConfig, episode_reward
from .sandbox import Cue, Granularity, ObservationState, Reached, SandboxItem, judge_answer
from .toolkit import BudgetConfig, BudgetLedger, execute
from .toolparse import CORRUPTIONS, corrupt_garble, corrupt_truncate, parse_with_repair, serialize
from .toolparse import format_quality

HEADS = ("answer", "browse", "segment_retrieve", "frame_pick", "zoom_in")
ANSWER_HEAD = 0
HEAD_TOOL = {1: ToolKind.BROWSE, 2: ToolKind.SEGMENT_RETRIEVE, 3: ToolKind.FRAME_PICK, 4: ToolKind.ZOOM_IN}
NUM_HEADS = len(HEADS)
ALGOS = ("grpo", "tagpo", "composite")


@dataclass(frozen=True)
class TrainerConfig:
    max_turns: int = 4
    rollouts: int = 8
    lr: float = 0.1
    steps: int = 200
    batch_size: int = 32
    guess_mode: bool = True
    corruption: float = 0.02
    adv_scope: str = "group"
    filter_groups: bool = True

    def validate(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.rollouts < 2:
            raise ValueError("rollouts must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError("corruption must be a probability")
        if self.adv_scope not in ("group", "batch"):
            raise ValueError(f"adv_scope must be 'group' or 'batch', got {self.adv_scope!r}")


# -- policy state ----------------------------------------------------------------


class PolicyState(NamedTuple):
    cue: Cue
    reached: Reached
    visible: bool
    turn: int


def num_states(max_turns: int) -> int:
    return len(Cue) * len(Reached) * 2 * max_turns


def state_index(cue: Cue, reached: Reached, visible: bool, turn: int, max_turns: int) -> int:
    return ((int(cue) * len(Reached) + int(reached)) * 2 + int(visible)) * max_turns + turn


def decode_state(idx: int, max_turns: int) -> PolicyState:
    idx, turn = divmod(idx, max_turns)
    idx, visible = divmod(idx, 2)
    cue, reached = divmod(idx, len(Reached))
    return PolicyState(Cue(cue), Reached(reached), bool(visible), turn)


def state_label(idx: int, max_turns: int) -> str:
    s = decode_state(idx, max_turns)
    return f"{s.cue.name.lower()}|{s.reached.name.lower()}|{int(s.visible)}|{s.turn}"


def parse_state_label(label: str, max_turns: int) -> int:
    cue, reached, visible, turn = label.split("|")
    return state_index(Cue[cue.upper()], Reached[reached.upper()], visible == "1", int(turn), max_turns)


# -- policies ----------------------------------------------------------------------


def softmax_rows(theta: np.ndarray) -> np.ndarray:
    z = theta - theta.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class PolicyTable:
    """Softmax preferences over action heads, one row per discrete state."""

    def __init__(self, max_turns: int = 4, theta: np.ndarray | None = None):
        self.max_turns = max_turns
        shape = (num_states(max_turns), NUM_HEADS)
        self.theta = np.zeros(shape) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != shape:
            raise ValueError(f"theta has shape {self.theta.shape}, expected {shape}")
        self._cum: list[list[float]] | None = None

    def probs(self, state: int | None = None) -> np.ndarray:
        p = softmax_rows(self.theta)
        return p if state is None else p[state]

    def sample(self, state: int, rng: np.random.Generator) -> int:
        if self._cum is None:
            self._cum = np.cumsum(self.probs(), axis=1).tolist()
        row = self._cum[state]
        return min(bisect.bisect_right(row, rng.random() * row[-1]), NUM_HEADS - 1)

    def apply(self, delta: np.ndarray) -> None:
        self.theta = self.theta + delta
        self._cum = None

    def copy(self) -> "PolicyTable":
        return PolicyTable(self.max_turns, self.theta.copy())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("state\thead\tpreference\n")
            for s in range(self.theta.shape[0]):
                label = state_label(s, self.max_turns)
                for h, name in enumerate(HEADS):
                    fh.write(f"{label}\t{name}\t{float(self.theta[s, h])!r}\n")

    @classmethod
    def load(cls, path) -> "PolicyTable":
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if not lines or lines[0].split("\t") != ["state", "head", "preference"]:
            raise ValueError(f"{path}: missing policy header")
        rows = []
        for n, ln in enumerate(lines[1:], start=2):
            parts = ln.split("\t")
            if len(parts) != 3 or parts[1] not in HEADS:
                raise ValueError(f"{path}:{n}: malformed policy row")
            rows.append(parts)
        try:
            max_turns = 1 + max(int(r[0].split("|")[3]) for r in rows)
            policy = cls(max_turns)
            seen = set()
            for label, head, value in rows:
                s = parse_state_label(label, max_turns)
                policy.theta[s, HEADS.index(head)] = float(value)
                seen.add((s, head))
        except (KeyError, ValueError, IndexError) as err:
            raise ValueError(f"{path}: malformed policy row ({err})") from err
        if len(seen) != policy.theta.size:
            raise ValueError(f"{path}: policy table incomplete")
        return policy


class ScriptedPolicy:
    """Deterministic policy driven by a rule over the decoded state."""

    def __init__(self, rule: Callable[[PolicyState], int], max_turns: int = 4):
        self.rule = rule
        self.max_turns = max_turns

    def sample(self, state: int, rng: np.random.Generator) -> int:
        return self.rule(decode_state(state, self.max_turns))


def optimal_rule(s: PolicyState) -> int:
    if s.visible:
        return ANSWER_HEAD
    if s.cue is Cue.GLOBAL_CUE:
        return 1
    return {Reached.COARSE: 2, Reached.SEGMENT_SELECTED: 3, Reached.FRAME_SELECTED: 4}.get(s.reached, 0)


def sequence_policy(heads: Sequence[int], max_turns: int = 4) -> ScriptedPolicy:
    """Plays ``heads`` by turn index, answering once the list runs out."""
    return ScriptedPolicy(lambda s: heads[s.turn] if s.turn < len(heads) else ANSWER_HEAD, max_turns)


# -- episodes ----------------------------------------------------------------------


def _corrupt(raw: str, rng: np.random.Generator) -> str:
    kinds = list(CORRUPTIONS) + ["garble"]
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "garble":
        return corrupt_garble(raw)
    if kind == "balance":
        return corrupt_truncate(raw, int(rng.integers(0, 4)))
    return CORRUPTIONS[kind](raw)


def _make_action(head: int, obs: ObservationState, item: SandboxItem, cfg: TrainerConfig, rng) -> Any:
    if head == ANSWER_HEAD:
        if obs.evidence_visible:
            choice = item.video.evidence.correct_choice
        elif cfg.guess_mode:
            choice = int(rng.integers(item.question.choices))
        else:
            choice = 0
        return Answer(choice)
    tool = HEAD_TOOL[head]
    if tool is ToolKind.SEGMENT_RETRIEVE:
        return Invoke(tool, ToolArgs(tuple(item.question.query.tolist())))
    return Invoke(tool)


def run_episode(
    policy,
    item: SandboxItem,
    cfg: TrainerConfig,
    rng: np.random.Generator,
    reward_cfg: RewardConfig | None = None,
    budget: BudgetConfig | None = None,
    traj_id: str = "t0",
) -> Trajectory:
    """One multi-turn rollout: observe, pick a head, emit a string, parse, act."""
    video, q = item.video, item.question
    dim = video.config.dim
    obs = ObservationState()
    ledger = BudgetLedger.from_config(budget)
    traj = Trajectory(traj_id, q.id)
    for turn in range(cfg.max_turns):
        obs.turn = turn
        s = state_index(q.cue, obs.reached, obs.evidence_visible, turn, cfg.max_turns)
        head = policy.sample(s, rng)
        raw = serialize(_make_action(head, obs, item, cfg, rng))
        if cfg.corruption and rng.random() < cfg.corruption:
            raw = _corrupt(raw, rng)
        outcome = parse_with_repair(raw, dim)
        snapshot = obs.snapshot()
        snapshot["policy_state"] = s
        if not outcome.ok:
            traj.turns.append(Turn(snapshot, head, raw, outcome.status, None, f"error: unparseable ({outcome.reason})"))
            continue
        action = outcome.action
        if isinstance(action, Answer):
            if not 0 <= action.choice < q.choices:
                traj.turns.append(Turn(snapshot, head, raw, outcome.status, action, "error: choice out of range"))
                continue
            traj.acc = judge_answer(video.evidence, q.choices, action.choice, obs, cfg.guess_mode, rng)
            traj.final_answer = action.choice
            traj.turns.append(Turn(snapshot, head, raw, outcome.status, action, "final"))
            break
        obs, ledger, result = execute(video, action, obs, ledger, q.query)
        traj.tool_calls.append(
            ToolCall(
                action.tool, len(traj.tool_calls) + 1, action.args,
                outcome.status is ParseStatus.PARSED, result.valid, f"{traj_id}/t{turn}",
            )
        )
        traj.turns.append(Turn(snapshot, head, raw, outcome.status, action, result.observation))
    else:
        traj.truncated = True
    traj.rewards = episode_reward(traj, reward_cfg)
    return traj


def _episode_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(list(key)))


def question_key(question_id: str) -> int:
    return zlib.crc32(question_id.encode("utf-8"))


def rollout_group(
    policy,
    item: SandboxItem,
    cfg: TrainerConfig,
    seed: int,
    reward_cfg: RewardConfig | None = None,
    budget: BudgetConfig | None = None,
    stream: int = 0,
) -> RolloutGroup:
    """N rollouts of one question, each on its own rng substream.

    Deterministic in (seed, question id, stream).
    """
    qk = question_key(item.question.id)
    trajs = [
        run_episode(
            policy, item, cfg, _episode_rng(seed, stream, qk, i), reward_cfg, budget,
            f"{item.question.id}/s{stream}/r{i}",
        )
        for i in range(cfg.rollouts)
    ]
    return RolloutGroup(item.question.id, trajs)


# -- update ----------------------------------------------------------------------


def trajectory_weight(t: Trajectory, algo: str) -> float:
    adv = t.advantage
    if adv is None:
        raise ValueError(f"trajectory {t.id} has no advantages")
    if algo == "grpo":
        return adv.grpo
    if algo == "tagpo":
        return adv.tagpo
    if algo == "composite":
        return adv.weight
    raise ValueError(f"unknown algo {algo!r}")


def _decisions(groups: Iterable[RolloutGroup], algo: str):
    states, heads, weights = [], [], []
    n = 0
    for g in groups:
        for t in g:
            n += 1
            w = trajectory_weight(t, algo)
            for turn in t.turns:
                if turn.head < 0:
                    continue
                states.append(_turn_state(turn))
                heads.append(turn.head)
                weights.append(w)
    return np.asarray(states, dtype=int), np.asarray(heads, dtype=int), np.asarray(weights), n


def _turn_state(turn: Turn) -> int:
    return turn.state["policy_state"]


def policy_gradient(policy: PolicyTable, groups: list[RolloutGroup], algo: str = "composite") -> np.ndarray:
    """Gradient of (1/M) * sum_i w_i * sum_t log pi(a_t | s_t) w.r.t. theta.

    M is the number of trajectories in ``groups``.
    """
    s, a, w, n = _decisions(groups, algo)
    grad = np.zeros_like(policy.theta)
    if n == 0 or s.size == 0:
        return grad
    pi = policy.probs()
    np.add.at(grad, (s, a), w)
    np.add.at(grad, s, -w[:, None] * pi[s])
    return grad / n


def objective(theta: np.ndarray, groups: list[RolloutGroup], algo: str = "composite") -> float:
    """Advantage-weighted log-likelihood whose gradient ``policy_gradient`` returns."""
    s, a, w, n = _decisions(groups, algo)
    if n == 0:
        return 0.0
    logp = theta - theta.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    return float(np.sum(w * logp[s, a]) / n)


def policy_update(policy: PolicyTable, groups: list[RolloutGroup], lr: float, algo: str = "composite") -> PolicyTable:
    """Synchronous batch step: theta += lr * gradient, applied once."""
    policy.apply(lr * policy_gradient(policy, groups, algo))
    return policy


# -- metrics -----------------------------------------------------------------------

TOOL_COLUMNS = [f"calls_{k.wire_name}" for k in ToolKind]
ROUTE_COLUMNS = [f"route_{c}_{h}" for c in ("global", "local") for h in HEADS]
METRIC_COLUMNS = [
    "step", "mean_reward", "accuracy", "format_quality", "valid_tool_reward",
    "mean_tool_calls", *TOOL_COLUMNS, "truncated_rate", "frame_success_calls",
    *ROUTE_COLUMNS, "groups", "retained_groups", "adv_grpo_abs", "adv_tagpo_abs",
]


def batch_metrics(groups: list[RolloutGroup], items: dict[str, SandboxItem]) -> dict[str, float]:
    trajs = [t for g in groups for t in g]
    n = len(trajs)
    calls = sum(t.num_calls for t in trajs)
    valid = sum(t.num_calls for t in trajs if t.rewards.acc > 0)
    out: dict[str, float] = {
        "mean_reward": math.fsum(t.rewards.reward for t in trajs) / n,
        "accuracy": sum(t.rewards.acc for t in trajs) / n,
        "format_quality": format_quality(trajs),
        "valid_tool_reward": valid / calls if calls else 0.0,
        "mean_tool_calls": calls / n,
        "truncated_rate": sum(t.truncated for t in trajs) / n,
    }
    counts = {k: 0 for k in ToolKind}
    for t in trajs:
        for c in t.tool_calls:
            counts[c.tool] += 1
    for k in ToolKind:
        out[f"calls_{k.wire_name}"] = counts[k]
    frame_ok = [
        t.num_calls for t in trajs
        if t.rewards.acc > 0 and items[t.question_id].video.evidence.granularity is Granularity.FRAME
    ]
    out["frame_success_calls"] = sum(frame_ok) / len(frame_ok) if frame_ok else float("nan")
    routes = {c: [0] * NUM_HEADS for c in ("global", "local")}
    for t in trajs:
        cue = "global" if items[t.question_id].question.cue is Cue.GLOBAL_CUE else "local"
        if t.turns:
            routes[cue][t.turns[0].head] += 1
    for cue, row in routes.items():
        total = sum(row)
        for h, name in enumerate(HEADS):
            out[f"route_{cue}_{name}"] = row[h] / total if total else float("nan")
    with_adv = [t for t in trajs if t.advantage is not None]
    if with_adv:
        out["adv_grpo_abs"] = math.fsum(abs(t.advantage.grpo) for t in with_adv) / len(with_adv)
        out["adv_tagpo_abs"] = math.fsum(abs(t.advantage.tagpo) for t in with_adv) / len(with_adv)
    else:
        out["adv_grpo_abs"] = out["adv_tagpo_abs"] = float("nan")
    return out


@dataclass
class TrainResult:
    metrics: list[dict[str, float]]
    policy: PolicyTable


def train(
    corpus: list[SandboxItem],
    cfg: TrainerConfig | None = None,
    algo: str = "composite",
    seed: int = 0,
    reward_cfg: RewardConfig | None = None,
    budget: BudgetConfig | None = None,
    policy: PolicyTable | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` synchronous steps; bit-identical for identical arguments."""
    cfg = cfg or TrainerConfig()
    cfg.validate()
    reward_cfg = reward_cfg or RewardConfig()
    reward_cfg.validate()
    if algo not in ALGOS:
        raise ValueError(f"algo must be one of {ALGOS}, got {algo!r}")
    if not corpus:
        raise ValueError("empty corpus")
    policy = policy or PolicyTable(cfg.max_turns)
    items = {it.question.id: it for it in corpus}
    history = []
    for step in range(cfg.steps):
        picker = np.random.default_rng([seed, step, 7])
        idx = picker.choice(len(corpus), size=cfg.batch_size, replace=len(corpus) < cfg.batch_size)
        groups = [
            rollout_group(policy, corpus[i], cfg, seed, reward_cfg, budget, stream=step + 1)
            for i in idx
        ]
        compute_advantages(groups, reward_cfg, cfg.adv_scope)
        retained = rollout_filter(groups) if cfg.filter_groups else groups
        row = {"step": step, **batch_metrics(groups, items)}
        row["groups"] = len(groups)
        row["retained_groups"] = len(retained)
        history.append(row)
        policy_update(policy, retained, cfg.lr, algo)
    return TrainResult(history, policy)


def evaluate(
    policy,
    corpus: list[SandboxItem],
    cfg: TrainerConfig | None = None,
    seed: int = 0,
    reward_cfg: RewardConfig | None = None,
    budget: BudgetConfig | None = None,
) -> dict[str, Any]:
    """Roll the (frozen) policy over every corpus question and summarize."""
    cfg = cfg or TrainerConfig()
    items = {it.question.id: it for it in corpus}
    groups = [rollout_group(policy, it, cfg, seed, reward_cfg, budget, stream=0) for it in corpus]
    m = batch_metrics(groups, items)
    trajs = [t for g in groups for t in g]
    per_gran = {}
    for g in Granularity:
        sel = [t for t in trajs if items[t.question_id].video.evidence.granularity is g]
        per_gran[g.name.lower()] = {
            "episodes": len(sel),
            "accuracy": sum(t.rewards.acc for t in sel) / len(sel) if sel else None,
            "mean_tool_calls": sum(t.num_calls for t in sel) / len(sel) if sel else None,
        }
    routing = {}
    for cue in ("global", "local"):
        routing[cue] = {h: m[f"route_{cue}_{h}"] for h in HEADS}
    return {
        "episodes": len(trajs),
        "accuracy": m["accuracy"],
        "format_quality": m["format_quality"],
        "valid_tool_reward": m["valid_tool_reward"],
        "mean_tool_calls": m["mean_tool_calls"],
        "mean_reward": m["mean_reward"],
        "frame_success_calls": m["frame_success_calls"],
        "per_granularity": per_gran,
        "routing": routing,
    }


def write_metrics(path, rows: list[dict[str, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def read_metrics(path) -> tuple[list[str], list[dict[str, float]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [{k: float(v) for k, v in zip(header, line)} for line in reader if line]
    return header, rows
