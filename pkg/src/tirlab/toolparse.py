"""Tool-call wire format: serializer, strict parser, repair passes, format quality.

Grammar (the whole string, nothing around it)::

    <tool_call>{"name": NAME, "arguments": {...}}</tool_call>
    <answer>K</answer>

NAME is one of browse, segment_retrieve, frame_pick, zoom_in. Only
segment_retrieve takes an argument: ``"query"``, a unit-norm list of numbers.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable

from .core import Answer, AgentAction, Invoke, ParseStatus, ToolArgs, ToolKind, Trajectory

TOOL_OPEN, TOOL_CLOSE = "<tool_call>", "</tool_call>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"

_TOOL_RE = re.compile(r"<tool_call>(.*)</tool_call>", re.DOTALL)
_ANSWER_RE = re.compile(r"<answer>(.*)</answer>", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",\s*([}\]])")


@dataclass(frozen=True)
class ParseOutcome:
    status: ParseStatus
    action: AgentAction | None = None
    passes: tuple[str, ...] = ()
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.status is not ParseStatus.FAILED


def Parsed(action: AgentAction) -> ParseOutcome:
    return ParseOutcome(ParseStatus.PARSED, action)


def Repaired(action: AgentAction, passes: Iterable[str]) -> ParseOutcome:
    return ParseOutcome(ParseStatus.REPAIRED, action, tuple(passes))


def Failed(reason: str) -> ParseOutcome:
    return ParseOutcome(ParseStatus.FAILED, reason=reason)


def serialize(action: AgentAction) -> str:
    if isinstance(action, Answer):
        return f"{ANSWER_OPEN}{action.choice}{ANSWER_CLOSE}"
    body = json.dumps({"name": action.tool.wire_name, "arguments": action.args.to_json()})
    return f"{TOOL_OPEN}{body}{TOOL_CLOSE}"


def _reject_constant(token: str):
    raise ValueError(f"non-finite number {token}")


def parse_strict(s: str, dim: int | None = None) -> ParseOutcome:
    """Parse one action string exactly; never raises."""
    if not isinstance(s, str) or not s:
        return Failed("no-tag")
    n_tool = s.count(TOOL_OPEN) + s.count(ANSWER_OPEN)
    if n_tool == 0:
        return Failed("no-tag")
    if n_tool > 1:
        return Failed("multiple-tags")

    m = _ANSWER_RE.fullmatch(s)
    if m:
        body = m.group(1)
        if not re.fullmatch(r"0|[1-9][0-9]*", body):
            return Failed("bad-answer")
        return Parsed(Answer(int(body)))

    m = _TOOL_RE.fullmatch(s)
    if not m:
        if TOOL_CLOSE in s or ANSWER_CLOSE in s:
            return Failed("extra-text")
        return Failed("unbalanced-tag")
    body = m.group(1)
    try:
        obj = json.loads(body, parse_constant=_reject_constant)
    except ValueError:
        if _TRAILING_COMMA_RE.search(body):
            return Failed("trailing-comma")
        return Failed("invalid-json")
    if not isinstance(obj, dict) or set(obj) != {"name", "arguments"}:
        return Failed("bad-object")
    name, arguments = obj["name"], obj["arguments"]
    if not isinstance(name, str):
        return Failed("bad-object")
    try:
        tool = ToolKind.from_wire(name)
    except KeyError:
        return Failed("unknown-tool")
    if not isinstance(arguments, dict):
        return Failed("bad-arguments")
    if tool is ToolKind.SEGMENT_RETRIEVE:
        query = arguments.get("query")
        if set(arguments) != {"query"} or not isinstance(query, list) or not query:
            return Failed("bad-arguments")
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in query):
            return Failed("bad-arguments")
        vec = tuple(float(x) for x in query)
        if dim is not None and len(vec) != dim:
            return Failed("bad-arguments")
        if abs(math.sqrt(math.fsum(x * x for x in vec)) - 1.0) > 1e-6:
            return Failed("bad-arguments")
        return Parsed(Invoke(tool, ToolArgs(vec)))
    if arguments:
        return Failed("bad-arguments")
    return Parsed(Invoke(tool))


# -- repair passes -------------------------------------------------------------


def strip_fences(s: str) -> str:
    t = s.strip()
    m = re.fullmatch(r"```[A-Za-z0-9_-]*\s*\n?(.*?)\n?\s*```", t, re.DOTALL)
    return m.group(1).strip() if m else s


def normalize_quotes(s: str) -> str:
    return re.sub(r"'([^'\"]*)'", r'"\1"', s)


def quote_keys(s: str) -> str:
    return re.sub(r"([{,]\s*)([A-Za-z_][A-Za-z0-9_]*)(\s*:)", r'\1"\2"\3', s)


def drop_trailing_commas(s: str) -> str:
    return _TRAILING_COMMA_RE.sub(r"\1", s)


def _close_brackets(body: str) -> str:
    stack: list[str] = []
    in_str = esc = False
    for ch in body:
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch in "{[":
            stack.append("}" if ch == "{" else "]")
        elif ch in "}]" and stack and stack[-1] == ch:
            stack.pop()
    if in_str:
        body += '"'
    body = body.rstrip()
    if body.endswith(","):
        body = body[:-1]
    return body + "".join(reversed(stack))


def balance(s: str) -> str:
    """Close braces/brackets and the tag left open by a truncated string."""
    for open_tag, close_tag in ((TOOL_OPEN, TOOL_CLOSE), (ANSWER_OPEN, ANSWER_CLOSE)):
        start = s.find(open_tag)
        if start < 0:
            continue
        rest = s[start + len(open_tag):]
        end = rest.find(close_tag)
        if end >= 0:
            body, after = rest[:end], rest[end + len(close_tag):]
        else:
            body, after = rest, ""
            for k in range(len(close_tag) - 1, 0, -1):
                if body.endswith(close_tag[:k]):
                    body = body[:-k]
                    break
        return s[:start] + open_tag + _close_brackets(body) + close_tag + after
    return s


REPAIR_PASSES: tuple[tuple[str, Callable[[str], str]], ...] = (
    ("strip-fences", strip_fences),
    ("quote-normalize", normalize_quotes),
    ("quote-keys", quote_keys),
    ("trailing-commas", drop_trailing_commas),
    ("balance", balance),
)


def parse_with_repair(s: str, dim: int | None = None) -> ParseOutcome:
    """Strict parse, then the repair passes cumulatively in their fixed order.

    The first prefix of passes that yields a strict parse wins; the outcome
    lists the passes in that prefix that actually changed the string.
    """
    first = parse_strict(s, dim)
    if first.ok or not isinstance(s, str):
        return first
    applied: list[str] = []
    text = s
    for name, fn in REPAIR_PASSES:
        fixed = fn(text)
        if fixed != text:
            applied.append(name)
            text = fixed
            out = parse_strict(text, dim)
            if out.ok:
                return Repaired(out.action, applied)
    return Failed(first.reason or "unrepairable")


def format_quality(episodes: list[Trajectory]) -> float:
    """Fraction of episodes whose every action string strict-parses."""
    if not episodes:
        raise ValueError("format_quality needs at least one episode")
    good = sum(all(t.parse_status is ParseStatus.PARSED for t in ep.turns) for ep in episodes)
    return good / len(episodes)


def format_quality_raw(episodes: list[list[str]]) -> float:
    """Same metric computed straight from raw strings."""
    if not episodes:
        raise ValueError("format_quality needs at least one episode")
    good = sum(all(parse_strict(s).ok for s in strings) for strings in episodes)
    return good / len(episodes)


# -- corruption families (inverse of each repair pass) -----------------------------


def corrupt_fence(s: str) -> str:
    return f"```json\n{s}\n```"


def corrupt_quotes(s: str) -> str:
    return s.replace('"', "'")


def corrupt_keys(s: str) -> str:
    return re.sub(r'"(name|arguments|query)"(\s*:)', r"\1\2", s)


def corrupt_trailing_comma(s: str) -> str:
    j = s.rfind("}")
    return s if j < 0 else s[:j] + "," + s[j:]


def corrupt_truncate(s: str, keep: int = 0) -> str:
    """Drop the tail made of closing braces/brackets/tag characters.

    ``keep`` chooses how much of that closable tail survives.
    """
    tag_close = TOOL_CLOSE if TOOL_OPEN in s else ANSWER_CLOSE
    core = s[: -len(tag_close)]
    tail_start = len(core)
    while tail_start > 0 and core[tail_start - 1] in "}]":
        tail_start -= 1
    tail = s[tail_start:]
    keep = max(0, min(keep, len(tail) - 1))
    return s[:tail_start] + tail[:keep]


def corrupt_garble(s: str) -> str:
    return s.replace("<", "[").replace(">", "]")


CORRUPTIONS: dict[str, Callable[[str], str]] = {
    "strip-fences": corrupt_fence,
    "quote-normalize": corrupt_quotes,
    "quote-keys": corrupt_keys,
    "trailing-commas": corrupt_trailing_comma,
    "balance": corrupt_truncate,
}
