import json

import httpx
import pytest

from tirlab.core import Answer, Invoke, ParseStatus, ToolArgs, ToolKind
from tirlab.sandbox import Granularity, SandboxItem, generate_corpus, generate_video
from tirlab.synth import (
    ChatCompletionClient, ClientError, ClientTimeout, ScriptedClient, SynthConfig, SynthItem, adjudicate,
    curate_difficulty, filter_necessity, generate_trajectory, mock_client, predict_order, replay,
    rewrite_prompt, run_pipeline, solve_count, write_outputs,
)
from tirlab.synth.pipeline import (
    BASE_PROMPT, Candidate, chain_legal, in_band, minimal, parse_order, post_visibility_calls,
)
from tirlab.toolparse import serialize

from conftest import A, B, make_traj

SEG, FRAME, ZOOM = ToolKind.SEGMENT_RETRIEVE, ToolKind.FRAME_PICK, ToolKind.ZOOM_IN


def _si(seed, g):
    return SynthItem(SandboxItem(*generate_video(seed, granularity=g)))


def _call(si, tool):
    args = ToolArgs(tuple(si.item.question.query.tolist())) if tool is SEG else ToolArgs()
    return serialize(Invoke(tool, args))


def _answer(si, right=True):
    ev, n = si.item.video.evidence, si.item.question.choices
    return serialize(Answer(ev.correct_choice if right else (ev.correct_choice + 1) % n))


# -- necessity -------------------------------------------------------------------------


def test_necessity_outcomes():
    si = _si(1, Granularity.FRAME)
    assert filter_necessity(si, ScriptedClient({"necessity": _answer(si)})) == "direct-answerable"
    si = _si(1, Granularity.FRAME)
    assert filter_necessity(si, ScriptedClient({"necessity": _answer(si, False)})) == "needs-tools"
    si = _si(1, Granularity.FRAME)
    assert filter_necessity(si, ScriptedClient({"necessity": "I am not sure."})) == "needs-tools"
    si = _si(1, Granularity.FRAME)
    assert filter_necessity(si, ScriptedClient({"necessity": ClientTimeout("slow")})) == "failed"
    assert si.retry and si.status["necessity"].startswith("failed")


# -- order -----------------------------------------------------------------------------


def test_parse_order_forms():
    assert parse_order("segment, frame") == [SEG, FRAME]
    assert parse_order("segment_retrieve -> frame_pick -> zoom_in") == [SEG, FRAME, ZOOM]
    assert parse_order("Browse") == [A]
    for bad in ("", "teleport", "segment, fly"):
        with pytest.raises(ValueError):
            parse_order(bad)


def test_chain_legality():
    assert chain_legal([SEG, FRAME, ZOOM]) and chain_legal([A]) and chain_legal([])
    assert not chain_legal([ZOOM, SEG]) and not chain_legal([FRAME]) and not chain_legal([SEG, ZOOM])


def test_order_retry_then_success():
    si = _si(2, Granularity.FRAME)
    client = ScriptedClient({"order": ["zoom, segment", "segment, frame"]})
    assert predict_order(si, client) == [SEG, FRAME]
    assert si.status["order"] == "ok after 2 attempts"


def test_order_fails_after_cap():
    si = _si(2, Granularity.FRAME)
    client = ScriptedClient({"order": "no idea"})
    assert predict_order(si, client, retry_cap=2) is None
    assert si.status["order"].startswith("failed") and len(client.calls) == 2


# -- rewrite ---------------------------------------------------------------------------


@pytest.mark.parametrize("reply, accepted", [
    ("Be precise.\n" + BASE_PROMPT, True),
    (BASE_PROMPT.replace("<tool_call>", "[call]"), False),
    ("   ", False),
    (ClientError("down"), False),
])
def test_rewrite(reply, accepted):
    si = _si(3, Granularity.SEGMENT)
    prompt = rewrite_prompt(si, ScriptedClient({"rewrite": reply}))
    assert si.prompt_flagged is not accepted
    assert prompt == (reply if accepted else BASE_PROMPT)


# -- generate --------------------------------------------------------------------------


def test_generate_optimal_chain():
    si = _si(4, Granularity.REGION)
    si.order = [SEG, FRAME, ZOOM]
    turns = [_call(si, SEG), _call(si, FRAME), _call(si, ZOOM), _answer(si)]
    cand = generate_trajectory(si, ScriptedClient({"generate": turns}))
    t = cand.trajectory
    assert t.acc == 1 and t.num_calls == 3 and not t.truncated and minimal(t)
    assert [c.tool for c in t.tool_calls] == [SEG, FRAME, ZOOM]
    assert t.id == f"{si.question_id}/c0" and cand.repairs == []


def test_generate_immediate_answer_is_wrong():
    si = _si(4, Granularity.REGION)
    cand = generate_trajectory(si, ScriptedClient({"generate": _answer(si)}))
    assert cand.trajectory.acc == 0 and cand.trajectory.num_calls == 0


def test_generate_logs_repairs():
    si = _si(5, Granularity.GLOBAL)
    turns = ["Let me look.\n<tool_call>{'name': 'browse', 'arguments': {}}</tool_call>", _answer(si)]
    cand = generate_trajectory(si, ScriptedClient({"generate": turns}))
    assert cand.trajectory.acc == 1
    assert cand.repairs == [(0, ("quote-normalize",))]
    assert cand.trajectory.turns[0].parse_status is ParseStatus.REPAIRED


@pytest.mark.parametrize("reply", ["<tool_call>%%%</tool_call>", "<answer>9</answer>", ClientError("x")])
def test_generate_discards(reply):
    si = _si(5, Granularity.GLOBAL)
    assert generate_trajectory(si, ScriptedClient({"generate": reply})) is None


def test_generate_truncates_at_turn_cap():
    si = _si(5, Granularity.GLOBAL)
    cand = generate_trajectory(si, ScriptedClient({"generate": _call(si, ZOOM)}), max_turns=3)
    assert cand.trajectory.truncated and cand.trajectory.num_calls == 3 and cand.trajectory.acc == 0


# -- adjudication ----------------------------------------------------------------------


def test_post_visibility_call_filtered():
    si = _si(6, Granularity.FRAME)
    turns = [_call(si, SEG), _call(si, FRAME), _call(si, ZOOM), _answer(si)]
    cand = generate_trajectory(si, ScriptedClient({"generate": turns}))
    assert cand.trajectory.acc == 1 and post_visibility_calls(cand.trajectory) == 1
    assert adjudicate([cand], ScriptedClient({"adjudicate": "scores: 9"}), si) == []


def test_single_survivor_kept():
    c = Candidate(make_traj("a", [A]))
    assert adjudicate([c], ScriptedClient({"adjudicate": "scores: 5"})) == [c]
    assert c.score == 5.0


def test_ties_prefer_fewer_calls_then_fewer_turns():
    long_ = Candidate(make_traj("long", [A, B]))
    short = Candidate(make_traj("short", [A]))
    ranked = adjudicate([long_, short], ScriptedClient({"adjudicate": "scores: 7, 7"}))
    assert [c.trajectory.id for c in ranked] == ["short", "long"]
    wordy = Candidate(make_traj("wordy", [A]))
    wordy.trajectory.turns.insert(1, wordy.trajectory.turns[0])
    ranked = adjudicate([wordy, Candidate(make_traj("tight", [A]))], ScriptedClient({"adjudicate": "7 7"}))
    assert [c.trajectory.id for c in ranked] == ["tight", "wordy"]


def test_higher_score_wins():
    ranked = adjudicate(
        [Candidate(make_traj("a", [A])), Candidate(make_traj("b", [A, B]))],
        ScriptedClient({"adjudicate": "scores: 3, 9"}),
    )
    assert [c.trajectory.id for c in ranked] == ["b", "a"]


def test_adjudicate_unparseable_scores():
    si = _si(6, Granularity.FRAME)
    out = adjudicate([Candidate(make_traj("a", [A]))], ScriptedClient({"adjudicate": "great"}), si)
    assert out == [] and si.status["adjudicate"].startswith("failed")


# -- curation --------------------------------------------------------------------------


def _curate_client(counts):
    def respond(ctx):
        item = ctx["item"]
        right = ctx["trial"] < counts[item.question.id]
        choice = item.video.evidence.correct_choice if right else (item.video.evidence.correct_choice + 1) % 4
        return serialize(Answer(choice))

    return ScriptedClient({"curate": respond})


def test_curation_band():
    items = [_si(10 + c, Granularity.SEGMENT) for c in range(11)]
    counts = {si.question_id: c for c, si in enumerate(items)}
    kept = curate_difficulty(items, _curate_client(counts))
    assert sorted(si.correct_count for si in kept) == [4, 5, 6]
    assert [in_band(c) for c in (3, 4, 5, 6, 7, 10)] == [False, True, True, True, False, False]


# -- pipeline --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(30, 5)


def test_pipeline_optimal_replays(corpus):
    report = run_pipeline(corpus, mock_client("optimal", 5))
    by_id = {it.question.id: it for it in corpus}
    kept = [si for si in report.items if si.kept]
    assert kept and all(3 < si.correct_count < 7 for si in kept)
    assert {si.question_id for si in kept} == {
        si.question_id for si in report.items if si.adjudicated and 3 < solve_count(si.question_id, 5) < 7
    }
    for c in report.exemplars:
        t = c.trajectory
        assert minimal(t)
        assert replay(t, by_id[t.question_id]) == [turn.observation for turn in t.turns]


def test_pipeline_bad_scripts(corpus):
    wasteful = run_pipeline(corpus, mock_client("wasteful", 5))
    assert not wasteful.exemplars and wasteful.stage_counts()["adjudicate"]["passed"] == 0
    violating = run_pipeline(corpus, mock_client("chain-violating", 5))
    assert violating.stage_counts()["order"]["failed"] == len(corpus)


def test_pipeline_deterministic(corpus, tmp_path):
    for tag in ("a", "b"):
        report = run_pipeline(corpus, mock_client("optimal", 5))
        write_outputs(report, tmp_path / f"ex_{tag}.jsonl", tmp_path / f"prov_{tag}.jsonl")
    for name in ("ex", "prov"):
        assert (tmp_path / f"{name}_a.jsonl").read_bytes() == (tmp_path / f"{name}_b.jsonl").read_bytes()
    rows = [json.loads(line) for line in (tmp_path / "prov_a.jsonl").read_text().splitlines()]
    assert len(rows) == len(corpus)


def test_synth_config_validation():
    for kw in ({"client": "other"}, {"trials": 0}, {"candidates": 0}):
        with pytest.raises(ValueError):
            SynthConfig(**kw).validate()


# -- remote client -----------------------------------------------------------------------


def _remote(monkeypatch, handler, **kw):
    monkeypatch.setenv("TIRLAB_API_TOKEN", "sekret")
    return ChatCompletionClient(
        "https://example.invalid/v1/chat/completions", "m1", temperature=0.2, backoff=0,
        transport=httpx.MockTransport(handler), **kw,
    )


def test_remote_request_shape(monkeypatch):
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={"choices": [{"message": {"content": "<answer>1</answer>"}}]})

    client = _remote(monkeypatch, handler)
    ctx = {"stage": "generate", "system": "sys", "history": [{"role": "assistant", "content": "hi"}]}
    assert client.submit("what?", ctx) == "<answer>1</answer>"
    req = seen[0]
    assert req.headers["authorization"] == "Bearer sekret"
    body = json.loads(req.content)
    assert body["model"] == "m1" and body["temperature"] == 0.2
    assert body["messages"] == [
        {"role": "system", "content": "sys"},
        {"role": "assistant", "content": "hi"},
        {"role": "user", "content": "what?"},
    ]


def test_remote_retries_then_succeeds(monkeypatch):
    replies = iter([httpx.Response(503), httpx.Response(200, json={"completion": "ok"})])
    client = _remote(monkeypatch, lambda request: next(replies))
    assert client.submit("p", {"stage": "order"}) == "ok"


def test_remote_timeout_exhausts_retries(monkeypatch):
    attempts = []

    def handler(request):
        attempts.append(1)
        raise httpx.ReadTimeout("slow", request=request)

    client = _remote(monkeypatch, handler, retries=2)
    with pytest.raises(ClientTimeout):
        client.submit("p", {"stage": "order"})
    assert len(attempts) == 3


def test_remote_bad_payload(monkeypatch):
    client = _remote(monkeypatch, lambda request: httpx.Response(200, json={"nothing": 1}), retries=0)
    with pytest.raises(ClientError):
        client.submit("p", {"stage": "order"})


def test_remote_needs_token_and_endpoint(monkeypatch):
    monkeypatch.delenv("TIRLAB_API_TOKEN", raising=False)
    with pytest.raises(ClientError, match="TIRLAB_API_TOKEN"):
        ChatCompletionClient("https://example.invalid", "m")
    monkeypatch.setenv("TIRLAB_API_TOKEN", "x")
    with pytest.raises(ClientError):
        ChatCompletionClient("", "m")
