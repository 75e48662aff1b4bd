import numpy as np
import pytest
from hypothesis import given, strategies as st

from tirlab.core import Answer, Invoke, ParseStatus, ToolArgs, ToolKind, Trajectory, Turn
from tirlab.toolparse import (
    CORRUPTIONS, REPAIR_PASSES, corrupt_garble, corrupt_truncate, format_quality, format_quality_raw,
    parse_strict, parse_with_repair, serialize,
)

BROWSE = Invoke(ToolKind.BROWSE)


def unit_vectors(dim=16):
    return st.lists(st.floats(-1, 1), min_size=dim, max_size=dim).filter(
        lambda v: np.linalg.norm(v) > 1e-3
    ).map(lambda v: tuple((np.asarray(v) / np.linalg.norm(v)).tolist()))


actions = st.one_of(
    st.builds(Answer, st.integers(0, 99)),
    st.sampled_from([Invoke(k) for k in ToolKind if k is not ToolKind.SEGMENT_RETRIEVE]),
    unit_vectors().map(lambda q: Invoke(ToolKind.SEGMENT_RETRIEVE, ToolArgs(q))),
)


def test_serialize_format():
    assert serialize(BROWSE) == '<tool_call>{"name": "browse", "arguments": {}}</tool_call>'
    assert serialize(Answer(2)) == "<answer>2</answer>"


@given(actions)
def test_round_trip(a):
    out = parse_strict(serialize(a), 16)
    assert out.status is ParseStatus.PARSED and out.action == a


@pytest.mark.parametrize("s, reason", [
    ("", "no-tag"),
    ("hello", "no-tag"),
    ('<tool_call>{"name": "browse",}</tool_call>', "trailing-comma"),
    ("<answer>1</answer><answer>2</answer>", "multiple-tags"),
    ("<answer>x</answer>", "bad-answer"),
    ("<answer>01</answer>", "bad-answer"),
    ('<tool_call>{"name": "browse", "arguments": {}}', "unbalanced-tag"),
    ('note <tool_call>{"name": "browse", "arguments": {}}</tool_call>', "extra-text"),
    ('<tool_call>{"name": "browse", "arguments": {}</tool_call>', "invalid-json"),
    ('<tool_call>{"name": "browse"}</tool_call>', "bad-object"),
    ('<tool_call>{"name": "fly", "arguments": {}}</tool_call>', "unknown-tool"),
    ('<tool_call>{"name": "browse", "arguments": {"query": [1]}}</tool_call>', "bad-arguments"),
    ('<tool_call>{"name": "segment_retrieve", "arguments": {"query": [0.5, 0.5]}}</tool_call>', "bad-arguments"),
    ('<tool_call>{"name": "segment_retrieve", "arguments": {"query": [NaN]}}</tool_call>', "invalid-json"),
])
def test_strict_failures(s, reason):
    out = parse_strict(s)
    assert out.status is ParseStatus.FAILED and out.reason == reason


def test_strict_checks_dimension():
    s = serialize(Invoke(ToolKind.SEGMENT_RETRIEVE, ToolArgs((1.0, 0.0, 0.0, 0.0))))
    assert parse_strict(s).ok and parse_strict(s, 4).ok
    assert parse_strict(s, 16).reason == "bad-arguments"


def test_repair_single_quotes():
    out = parse_with_repair("<tool_call>{'name': 'browse', 'arguments': {}}</tool_call>")
    assert out.status is ParseStatus.REPAIRED and out.action == BROWSE
    assert out.passes == ("quote-normalize",)


def test_repair_truncated():
    out = parse_with_repair('<tool_call>{"name": "browse", "arguments": {')
    assert out.status is ParseStatus.REPAIRED and out.action == BROWSE
    assert out.passes == ("balance",)


def test_valid_string_short_circuits():
    out = parse_with_repair(serialize(Answer(3)))
    assert out.status is ParseStatus.PARSED and out.passes == ()


def test_pass_order_fixed():
    assert [name for name, _ in REPAIR_PASSES] == [
        "strip-fences", "quote-normalize", "quote-keys", "trailing-commas", "balance",
    ]


def test_combined_corruptions():
    s = serialize(Invoke(ToolKind.ZOOM_IN))
    bad = CORRUPTIONS["strip-fences"](CORRUPTIONS["quote-normalize"](CORRUPTIONS["quote-keys"](s)))
    out = parse_with_repair(bad)
    assert out.action == Invoke(ToolKind.ZOOM_IN)
    assert out.passes == ("strip-fences", "quote-normalize", "quote-keys")


@pytest.mark.parametrize("name", list(CORRUPTIONS))
@given(a=actions, keep=st.integers(0, 3))
def test_each_pass_repairs_its_corruption(name, a, keep):
    s = serialize(a)
    bad = corrupt_truncate(s, keep) if name == "balance" else CORRUPTIONS[name](s)
    if isinstance(a, Answer) and name in ("quote-normalize", "quote-keys", "trailing-commas"):
        assert bad == s  # nothing to corrupt
        return
    assert not parse_strict(bad, 16).ok
    out = parse_with_repair(bad, 16)
    assert out.status is ParseStatus.REPAIRED and out.action == a
    assert name in out.passes


@given(st.text(max_size=80))
def test_never_repairs_strict_strings_and_never_raises(s):
    strict = parse_strict(s)
    repaired = parse_with_repair(s)
    if strict.ok:
        assert repaired == strict


@given(actions)
def test_garble_is_unrepairable(a):
    assert parse_with_repair(corrupt_garble(serialize(a))).status is ParseStatus.FAILED


def _episode(*statuses):
    t = Trajectory("t", "q")
    for s in statuses:
        t.turns.append(Turn({}, 0, "", s, None, ""))
    return t


def test_format_quality_fractions():
    P, R, F = ParseStatus.PARSED, ParseStatus.REPAIRED, ParseStatus.FAILED
    assert format_quality([_episode(P, P), _episode(P)]) == 1.0
    assert format_quality([_episode(P, F), _episode(P, P)]) == 0.5
    assert format_quality([_episode(R), _episode(P, R)]) == 0.0
    assert format_quality([_episode(P), _episode(P), _episode(F)]) == 2 / 3
    with pytest.raises(ValueError):
        format_quality([])


def test_format_quality_raw():
    good = serialize(Answer(1))
    fixable = "<tool_call>{'name': 'browse', 'arguments': {}}</tool_call>"
    assert format_quality_raw([[good], [good, good]]) == 1.0
    assert format_quality_raw([[good, "junk"], [good]]) == 0.5
    assert format_quality_raw([[fixable], [good, fixable]]) == 0.0
