import json
import math
import os
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowagent.agent import (
    CRITIC_MARKER,
    SECTION_HEADERS,
    ActionParseError,
    ContextChunk,
    EpisodeConfig,
    EpisodeInputs,
    FaultInjector,
    PolicyTransportError,
    RemotePolicy,
    ScriptedPolicy,
    active_path_clean,
    assemble_prompt,
    format_action,
    new_episode,
    parse_action,
    react_step,
    run_episode,
    uncertainty_gate,
)
from flowagent.fields import GridSpec, ScalarField
from flowagent.knowledge import HashingEmbedder, default_store
from flowagent.simulator import SimulatorConfig, random_vorticity
from flowagent.weather import derive_weather_channels

EMB = HashingEmbedder()
STORE = default_store(EMB)


def inputs(fault=None, grid=32):
    g = GridSpec(grid, grid)
    return EpisodeInputs(random_vorticity(g, 0), SimulatorConfig(nu=1e-3, dt=0.01), STORE, EMB,
                         derive_weather_channels, fault)


def script(*steps):
    return ScriptedPolicy([(k, a, "because") for k, a in steps])


SIM_SMALL = {"mode": "ensemble", "K": 3, "lambda": 0.03, "steps": 5, "n_outputs": 2}


# -- action grammar ------------------------------------------------------------


def test_parse_round_trip():
    raw = format_action("retrieve", {"query": "q", "partition": "phy"}, "need facts")
    a = parse_action(raw)
    assert (a.kind, a.args, a.rationale) == ("retrieve", {"query": "q", "partition": "phy"}, "need facts")
    assert parse_action(format_action("finalize")).terminal


@pytest.mark.parametrize("raw", [
    "no block here",
    '```action\n{"action": "reason"}\n```\n```action\n{"action": "reason"}\n```',
    "```action\n{not json}\n```",
    '```action\n{"args": {}}\n```',
    '```action\n{"action": "dance"}\n```',
    '```action\n{"action": "reason", "args": [1]}\n```',
])
def test_parse_failures_are_errors(raw):
    with pytest.raises(ActionParseError):
        parse_action(raw)


# -- prompt assembly -------------------------------------------------------------


def test_prompt_two_sections_when_empty():
    p = assemble_prompt("sys", [], "tokens", [])
    assert SECTION_HEADERS["system"] in p and SECTION_HEADERS["tokens"] in p
    assert SECTION_HEADERS["context"] not in p and SECTION_HEADERS["history"] not in p


def test_prompt_chunks_between_system_and_tokens_in_score_order():
    chunks = [ContextChunk("b", "phy", 0.9, "B text"), ContextChunk("a", "prot", 0.5, "A text"),
              ContextChunk("c", "hist", 0.1, "C text")]
    p = assemble_prompt("sys", chunks, "tokens", [])
    positions = [p.index(t) for t in ("sys", "B text", "A text", "C text", SECTION_HEADERS["tokens"])]
    assert positions == sorted(positions)


def test_history_budget_elides_oldest():
    history = [f"entry {i} " + "word " * 20 for i in range(10)]
    p = assemble_prompt("sys", [], "t", history, history_budget=70)
    assert "[... 7 earlier steps elided ...]" in p
    assert "entry 0 " not in p and "entry 6 " not in p
    assert all(f"entry {i} " in p for i in (7, 8, 9))


@settings(max_examples=50, deadline=None)
@given(st.text(min_size=1, max_size=40), st.integers(0, 4), st.integers(0, 5), st.integers(5, 200))
def test_section_order_property(system, n_chunks, n_hist, budget):
    chunks = [ContextChunk(f"id{i}", "phy", 1.0 - i / 10, f"chunk {i}") for i in range(n_chunks)]
    hist = [f"step {i} observation" for i in range(n_hist)]
    p = assemble_prompt(system, chunks, "visual", hist, budget)
    order = [p.find(SECTION_HEADERS[k]) for k in ("system", "context", "tokens", "history")]
    present = [i for i in order if i >= 0]
    assert present == sorted(present)
    assert (order[1] >= 0) == bool(chunks) and (order[3] >= 0) == bool(hist)
    assert p == assemble_prompt(system, chunks, "visual", hist, budget)


# -- uncertainty gate --------------------------------------------------------------


def test_uncertainty_gate():
    g = GridSpec(8, 8)
    mean = ScalarField(g, np.linspace(-2, 2, 64).reshape(8, 8))
    scale = np.mean(np.abs(mean.values))
    delta = 0.1
    assert not uncertainty_gate(ScalarField(g, np.zeros((8, 8))), mean, delta)
    assert uncertainty_gate(ScalarField(g, np.full((8, 8), 2 * delta * scale)), mean, delta)
    assert not uncertainty_gate(ScalarField(g, np.full((8, 8), 1e6)), mean, math.inf)
    assert not uncertainty_gate(ScalarField(g, np.zeros((8, 8))), ScalarField(g, np.zeros((8, 8))), 0.0)


def test_episode_config_validation():
    with pytest.raises(ValueError):
        EpisodeConfig(max_steps=0)
    with pytest.raises(ValueError):
        EpisodeConfig(max_rollbacks=-1)
    assert EpisodeConfig(delta=0.1, delta_decay=0.5).threshold(2) == pytest.approx(0.025)


# -- react step ------------------------------------------------------------------


def test_retrieve_adds_mips_topk():
    state = new_episode(inputs(), EpisodeConfig())
    react_step(state, script(("retrieve", {"query": "mass conservation", "partition": "phy", "k": 2})))
    expected = STORE.mips_topk(EMB.embed("mass conservation"), 2, ["phy"]).ids
    assert [c.id for c in state.context()] == expected
    assert state.trace.steps[0].data["hits"][0][0] == expected[0]


def test_simulate_records_spread_and_advisory():
    state = new_episode(inputs(), EpisodeConfig(delta=0.0))
    react_step(state, script(("simulate", SIM_SMALL)))
    step = state.trace.steps[0]
    assert step.verdict["passed"]
    assert "spread mean" in step.observation and step.data["spread_mean"] > 0
    assert step.data["probe_recommended"] and "ADVISORY" in state.prompt()
    assert "wave_height" in state.forecast_states[-1]


def test_finalize_is_terminal():
    state = new_episode(inputs(), EpisodeConfig())
    react_step(state, script(("finalize", {})))
    assert state.terminal and state.trace.status == "finalized"
    with pytest.raises(RuntimeError):
        react_step(state, script(("finalize", {})))


def test_tool_failure_is_observation():
    state = new_episode(inputs(), EpisodeConfig())
    react_step(state, script(("simulate", {"mode": "teleport"})))
    assert state.trace.steps[0].observation.startswith("TOOL ERROR")
    assert not state.terminal


def test_unparseable_policy_output_raises():
    class Garbled:
        name = "garbled"

        def propose(self, prompt):
            return parse_action("I think we should simulate")

    with pytest.raises(ActionParseError):
        run_episode(inputs(), EpisodeConfig(), Garbled())


# -- rollback --------------------------------------------------------------------


GOLDEN_SMALL = [("retrieve", {"query": "mass conservation", "partition": "phy", "k": 2}),
                ("simulate", SIM_SMALL), ("reason", {"text": "ok"}), ("finalize", {})]


def test_fault_injection_single_rollback():
    res = run_episode(inputs(FaultInjector(count=1)), EpisodeConfig(), script(*GOLDEN_SMALL))
    t = res.trace
    assert res.status == "finalized" and res.report is not None
    assert len(t.rollbacks) == 1
    pruned = t.step(t.rollbacks[0].pruned_step)
    assert pruned.pruned and pruned.id not in t.active and not pruned.verdict["passed"]
    feedback = t.step(t.rollbacks[0].feedback_step)
    assert feedback.kind == "feedback" and CRITIC_MARKER in feedback.observation
    assert "mass conservation" in feedback.observation
    assert active_path_clean(t)
    kinds = [s.action["kind"] for s in t.active_steps() if s.action]
    assert kinds == ["retrieve", "simulate", "reason", "finalize"]


def test_rmax_zero_fails_immediately():
    res = run_episode(inputs(FaultInjector(count=1)), EpisodeConfig(max_rollbacks=0), script(*GOLDEN_SMALL))
    assert res.status == "failed" and res.report is None
    assert res.trace.rollbacks == [] and res.trace.failure is not None
    assert active_path_clean(res.trace)


def test_persistent_fault_exhausts_retries():
    res = run_episode(inputs(FaultInjector(count=99)), EpisodeConfig(max_rollbacks=2), script(*GOLDEN_SMALL))
    assert res.status == "failed"
    assert len(res.trace.rollbacks) == 2 <= 2
    assert active_path_clean(res.trace)


def test_clean_run_has_no_rollbacks():
    res = run_episode(inputs(), EpisodeConfig(), script(*GOLDEN_SMALL))
    assert res.status == "finalized" and res.trace.rollbacks == []


def test_truncation():
    res = run_episode(inputs(), EpisodeConfig(max_steps=1), ScriptedPolicy.named("loop"))
    assert res.status == "truncated" and len(res.trace.steps) == 1


def test_audit_ids_and_determinism():
    a = run_episode(inputs(FaultInjector(count=1)), EpisodeConfig(), script(*GOLDEN_SMALL))
    b = run_episode(inputs(FaultInjector(count=1)), EpisodeConfig(), script(*GOLDEN_SMALL))
    assert a.trace.to_json() == b.trace.to_json()
    ids = [s.tool_call_id for s in a.trace.steps]
    assert all(ids) and len(set(ids)) == len(ids)
    assert all(s.observation for s in a.trace.steps)
    d = json.loads(a.trace.to_json())
    assert list(d) == sorted(d)


# -- remote policy -----------------------------------------------------------------


def test_remote_offline_transport_error():
    policy = RemotePolicy(url="http://127.0.0.1:9/v1/chat", retries=0, timeout=2)
    with pytest.raises(PolicyTransportError, match="127.0.0.1:9"):
        run_episode(inputs(), EpisodeConfig(), policy)


def test_remote_without_url(monkeypatch):
    monkeypatch.delenv("FLOWAGENT_POLICY_URL", raising=False)
    with pytest.raises(PolicyTransportError):
        RemotePolicy().propose("hi")


def test_remote_wire_format(monkeypatch):
    seen = {}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            seen["body"] = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen["auth"] = self.headers.get("Authorization")
            reply = {"choices": [{"message": {"content": format_action("finalize", {}, "done")}}]}
            data = json.dumps(reply).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        monkeypatch.setenv("FLOWAGENT_API_KEY", "secret")
        policy = RemotePolicy(url=f"http://127.0.0.1:{server.server_port}/chat", temperature=0.0, max_tokens=64)
        prop = policy.propose("prompt text")
    finally:
        server.shutdown()
    assert prop.action.kind == "finalize"
    body = seen["body"]
    assert set(body) >= {"messages", "temperature", "max_tokens"}
    assert body["messages"][-1] == {"role": "user", "content": "prompt text"}
    assert body["temperature"] == 0.0 and body["max_tokens"] == 64
    assert seen["auth"] == "Bearer secret"


@pytest.mark.remote
@pytest.mark.skipif(os.environ.get("FLOWAGENT_REMOTE_TESTS") != "1", reason="set FLOWAGENT_REMOTE_TESTS=1 and FLOWAGENT_POLICY_URL")
def test_remote_live_episode():
    res = run_episode(inputs(), EpisodeConfig(max_steps=6), RemotePolicy())
    assert res.status in ("finalized", "truncated", "failed")
    assert all(s.tool_call_id for s in res.trace.steps)
