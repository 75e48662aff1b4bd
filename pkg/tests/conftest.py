import pytest

from tirlab.core import (
    Answer, Invoke, ParseStatus, RolloutGroup, ToolArgs, ToolCall, ToolKind, Trajectory, Turn,
)
from tirlab.rewards import RewardConfig, episode_reward
from tirlab.sandbox import generate_corpus

A, B = ToolKind.BROWSE, ToolKind.SEGMENT_RETRIEVE


def make_traj(tid, tools, acc=1, qid="q", fmt=True, truncated=False, cfg=None):
    """A finalized trajectory with the given tool sequence; rewards attached."""
    status = ParseStatus.PARSED if fmt else ParseStatus.FAILED
    t = Trajectory(tid, qid)
    for j, k in enumerate(tools, start=1):
        k = ToolKind(k)
        t.tool_calls.append(ToolCall(k, j, ToolArgs(), True, True, f"{tid}/t{j - 1}"))
        t.turns.append(Turn({"turn": j - 1}, int(k) + 1, "", status, Invoke(k), "ok"))
    if truncated:
        t.truncated = True
    else:
        t.turns.append(Turn({"turn": len(tools)}, 0, "", status, Answer(0), "final"))
        t.final_answer = 0
        t.acc = acc
    t.rewards = episode_reward(t, cfg or RewardConfig())
    return t


def make_group(specs, qid="q", cfg=None):
    """specs: list of (tools, acc)."""
    return RolloutGroup(qid, [make_traj(f"t{i}", tools, acc, qid, cfg=cfg) for i, (tools, acc) in enumerate(specs)])


@pytest.fixture(scope="session")
def corpus40():
    return generate_corpus(40, 11)


# -- acceptance summary ------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
