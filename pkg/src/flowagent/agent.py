"""Critic-gated reasoning loop over Retrieve / Simulate / Reason / Finalize actions.

The policy replies with free-text rationale plus exactly one fenced block::

    ```action
    {"action": "simulate", "args": {"mode": "ensemble", "K": 8}}
    ```

Every physical output is checked by the critic before it joins the active
path; a failed check prunes the step, injects a corrective observation and
re-prompts the policy, up to ``max_rollbacks`` times.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .critic import DIV_TOL_SIMULATED, ConsistencyVerdict, ConstraintSpec, validate_trajectory
from .fields import FlowState, ScalarField, field_stats
from .knowledge import Embedder, KnowledgeStore, PARTITIONS
from .probe import CounterfactualResult, Intervention, counterfactual_rollout
from .projector import extract_topology, project, render_descriptors
from .report import AnalysisReport, extremal_stats, narrative_sections, trigger_alerts
from .simulator import EnsembleForecast, SimulatorConfig, ensemble_rollout, ensemble_spread

logger = logging.getLogger(__name__)

ACTION_KINDS = ("retrieve", "simulate", "reason", "finalize")
CRITIC_MARKER = "CRITIC REJECTED"
_FENCE = re.compile(r"```action\s*\n(.*?)\n\s*```", re.S)

DEFAULT_SYSTEM_INSTRUCTION = """You are a physics-grounded flow analyst. Work step by step.
Choose exactly one action per reply and put it in a fenced block tagged `action`
holding a JSON object {"action": <kind>, "args": {...}}. Text outside the block is your rationale.
Actions:
- retrieve: {"query": str, "partition": "phy"|"prot"|"hist"|"all", "k": int}
- simulate: {"mode": "ensemble", "K": int, "lambda": float, "steps": int, "n_outputs": int}
            or {"mode": "counterfactual", "intervention": {"channel", "op", "value", "region", "label"}, ...}
- reason: {"text": str}
- finalize: {"request": str}
Simulation results that violate conservation laws are rejected by the critic; re-plan when that happens."""


class ActionParseError(ValueError):
    pass


class PolicyTransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentAction:
    kind: str
    args: dict = field(default_factory=dict)
    rationale: str = ""

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ActionParseError(f"unknown action {self.kind!r}; expected one of {ACTION_KINDS}")

    @property
    def terminal(self) -> bool:
        return self.kind == "finalize"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "args": self.args}


def format_action(kind: str, args: dict | None = None, rationale: str = "") -> str:
    """Render a completion in the action grammar."""
    block = json.dumps({"action": kind, "args": args or {}}, sort_keys=True)
    return f"{rationale}\n```action\n{block}\n```".lstrip("\n")


def parse_action(raw: str) -> AgentAction:
    blocks = _FENCE.findall(raw)
    if len(blocks) != 1:
        raise ActionParseError(f"expected exactly one ```action block, found {len(blocks)}")
    try:
        payload = json.loads(blocks[0])
    except json.JSONDecodeError as exc:
        raise ActionParseError(f"action block is not valid JSON: {exc}") from None
    if not isinstance(payload, dict) or "action" not in payload:
        raise ActionParseError("action block must be an object with an 'action' key")
    args = payload.get("args", {})
    if not isinstance(args, dict):
        raise ActionParseError("'args' must be an object")
    rationale = _FENCE.sub("", raw).strip()
    return AgentAction(str(payload["action"]).lower(), args, rationale)


@dataclass(frozen=True)
class Proposal:
    action: AgentAction
    raw: str


class PolicyBackend(Protocol):
    name: str

    def propose(self, prompt: str) -> Proposal: ...

    def narrate(self, prompt: str) -> str: ...


# -- policies ----------------------------------------------------------------

SCRIPTS: dict[str, list[tuple[str, dict, str]]] = {
    "golden": [
        ("retrieve", {"query": "mass conservation divergence free velocity", "partition": "phy", "k": 2},
         "Ground the analysis in the governing conservation law first."),
        ("simulate", {"mode": "ensemble", "K": 8, "lambda": 0.03, "steps": 20, "n_outputs": 3},
         "Run a perturbed ensemble to estimate forecast uncertainty."),
        ("reason", {"text": "The ensemble passed the consistency check; summarise the dominant structures "
                            "and check protocol thresholds for the forecast."},
         "Consolidate the evidence before reporting."),
        ("finalize", {"request": "analysis report"}, "Evidence is sufficient for a report."),
    ],
    "probe": [
        ("retrieve", {"query": "mass conservation divergence free velocity", "partition": "phy", "k": 2},
         "Ground the analysis in the governing conservation law first."),
        ("simulate", {"mode": "ensemble", "K": 8, "lambda": 0.03, "steps": 20, "n_outputs": 3},
         "Run a perturbed ensemble to estimate forecast uncertainty."),
        ("simulate", {"mode": "counterfactual", "K": 8, "lambda": 0.03, "steps": 20, "n_outputs": 3,
                      "intervention": {"channel": "vorticity", "op": "scale", "value": 0.8, "label": "weak_core"}},
         "Test whether the outcome hinges on core intensity."),
        ("retrieve", {"query": "wave height protocol suspend flight routes", "partition": "prot", "k": 2},
         "Check operational protocols for the forecast sea state."),
        ("reason", {"text": "Compare factual and counterfactual outcomes and weigh them against protocol limits."},
         "Consolidate the evidence before reporting."),
        ("finalize", {"request": "analysis report"}, "Evidence is sufficient for a report."),
    ],
    "loop": [
        ("reason", {"text": "Still gathering evidence."}, "Keep thinking."),
    ],
}


class ScriptedPolicy:
    """Deterministic policy replaying a fixed action script.

    When the newest history entry is a critic rejection, the previously
    proposed action is re-issued instead of advancing the script. A script
    that runs out repeats its last entry.
    """

    def __init__(self, script: Sequence[tuple[str, dict, str]], name: str = "scripted"):
        if not script:
            raise ValueError("empty script")
        self.script = list(script)
        self.name = name
        self.cursor = 0
        self._last: str | None = None

    @classmethod
    def named(cls, name: str) -> "ScriptedPolicy":
        if name not in SCRIPTS:
            raise ValueError(f"unknown script {name!r}; available: {sorted(SCRIPTS)}")
        return cls(SCRIPTS[name], f"scripted:{name}")

    def propose(self, prompt: str) -> Proposal:
        history = prompt.rsplit(SECTION_HEADERS["history"], 1)[-1] if SECTION_HEADERS["history"] in prompt else ""
        entries = [e for e in history.strip().split("\n\n") if e.strip()]
        if self._last is not None and entries and CRITIC_MARKER in entries[-1]:
            raw = self._last.replace(self._last.split("\n```action")[0],
                                     "Retrying after the critic rejected the previous result.", 1)
        else:
            kind, args, rationale = self.script[min(self.cursor, len(self.script) - 1)]
            self.cursor += 1
            raw = format_action(kind, args, rationale)
        self._last = raw
        return Proposal(parse_action(raw), raw)

    def narrate(self, prompt: str) -> str:
        structures = prompt.split("STRUCTURES:", 1)[-1].split("REFERENCES:", 1)[0]
        refs = prompt.split("REFERENCES:", 1)[-1]
        cyc = "cyclonic vortex" in structures
        anti = "anticyclonic vortex" in structures
        shear = "shear line" in structures
        stag = "stagnation point" in structures
        if cyc and anti:
            core = "a mix of cyclonic and anticyclonic vortices"
        elif cyc or anti:
            core = "cyclonic vortices" if cyc and not anti else "anticyclonic vortices"
        else:
            core = "weak, disorganised vorticity"
        extras = [w for flag, w in ((shear, "shear lines between counter-rotating cores"),
                                    (stag, "stagnation points in the gaps between eddies")) if flag]
        summary = (f"The forecast describes a two-dimensional incompressible flow organised into {core}"
                   + (f", with {' and '.join(extras)}" if extras else "") + ". "
                   "The ensemble mean is divergence free and its statistics are listed below.")
        insights = ("Coherent vortices dominate the evolution and viscous decay slowly removes enstrophy. ")
        if "prot" in refs or "protocol" in refs.lower():
            insights += "Operational protocols were consulted; any exceeded thresholds appear as alerts. "
        if "hist" in refs:
            insights += "Historical analogs suggest the outcome is sensitive to the steering flow. "
        insights += "Conclusions rest on the critic-verified trajectory only."
        return f"SUMMARY: {summary}\nINSIGHTS: {insights}"


class RemotePolicy:
    """Chat-completion client: POSTs ``{messages, temperature, max_tokens}`` as JSON.

    Configuration via ``FLOWAGENT_POLICY_URL``, ``FLOWAGENT_API_KEY`` and
    ``FLOWAGENT_POLICY_MODEL``. Transport failures are retried ``retries``
    times with exponential backoff (0.5 s, 1 s, ...); each attempt times out
    after ``timeout`` seconds.
    """

    def __init__(self, url: str | None = None, model: str | None = None, temperature: float = 0.2,
                 max_tokens: int = 1024, timeout: float = 30.0, retries: int = 2,
                 system_instruction: str = DEFAULT_SYSTEM_INSTRUCTION):
        self.url = url or os.environ.get("FLOWAGENT_POLICY_URL", "")
        self.model = model or os.environ.get("FLOWAGENT_POLICY_MODEL", "")
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.retries = retries
        self.system_instruction = system_instruction
        self.name = "remote"

    def _complete(self, prompt: str) -> str:
        if not self.url:
            raise PolicyTransportError("remote policy has no endpoint (set FLOWAGENT_POLICY_URL)")
        body = {
            "messages": [{"role": "system", "content": self.system_instruction},
                         {"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.model:
            body["model"] = self.model
        headers = {"Content-Type": "application/json"}
        if key := os.environ.get("FLOWAGENT_API_KEY"):
            headers["Authorization"] = f"Bearer {key}"
        errors = []
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, json.dumps(body).encode(), headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.load(resp)
                return payload["choices"][0]["message"]["content"]
            except urllib.error.HTTPError as exc:
                errors.append(f"attempt {attempt + 1}: HTTP {exc.code} {exc.reason}")
                if exc.code < 500 and exc.code != 429:
                    break
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                errors.append(f"attempt {attempt + 1}: {type(exc).__name__}: {exc}")
            except (KeyError, IndexError, json.JSONDecodeError) as exc:
                errors.append(f"attempt {attempt + 1}: malformed response ({exc})")
                break
            if attempt < self.retries:
                time.sleep(0.5 * 2**attempt)
        raise PolicyTransportError(f"policy endpoint {self.url} unreachable: " + "; ".join(errors))

    def propose(self, prompt: str) -> Proposal:
        raw = self._complete(prompt)
        return Proposal(parse_action(raw), raw)

    def narrate(self, prompt: str) -> str:
        return self._complete(prompt)


def make_policy(spec: str) -> PolicyBackend:
    """``scripted:<name>``, ``remote`` or ``remote:<url>``."""
    scheme, _, rest = spec.partition(":")
    if scheme == "scripted":
        return ScriptedPolicy.named(rest or "golden")
    if scheme == "remote":
        return RemotePolicy(url=rest or None)
    raise ValueError(f"unknown policy spec {spec!r}")


# -- trace -------------------------------------------------------------------


@dataclass
class StepRecord:
    id: str
    parent: str | None
    index: int
    kind: str  # "action" or "feedback"
    tool_call_id: str
    observation: str
    action: dict | None = None
    rationale: str = ""
    raw: str = ""
    data: dict = field(default_factory=dict)
    verdict: dict | None = None
    pruned: bool = False

    def to_dict(self) -> dict:
        return {
            "id": self.id, "parent": self.parent, "index": self.index, "kind": self.kind,
            "tool_call_id": self.tool_call_id, "action": self.action, "rationale": self.rationale,
            "raw": self.raw, "observation": self.observation, "data": self.data,
            "verdict": self.verdict, "pruned": self.pruned,
        }


@dataclass
class RollbackEvent:
    pruned_step: str
    cause: dict
    retry: int
    feedback_step: str | None

    def to_dict(self) -> dict:
        return {"pruned_step": self.pruned_step, "cause": self.cause, "retry": self.retry,
                "feedback_step": self.feedback_step}


@dataclass
class ReasoningTrace:
    episode_id: str
    steps: list[StepRecord] = field(default_factory=list)
    active: list[str] = field(default_factory=list)
    rollbacks: list[RollbackEvent] = field(default_factory=list)
    status: str = "running"
    error: str = ""
    failure: dict | None = None

    def step(self, step_id: str) -> StepRecord:
        return next(s for s in self.steps if s.id == step_id)

    def active_steps(self) -> list[StepRecord]:
        by_id = {s.id: s for s in self.steps}
        return [by_id[i] for i in self.active]

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "status": self.status,
            "error": self.error,
            "failure": self.failure,
            "active_path": list(self.active),
            "steps": [s.to_dict() for s in self.steps],
            "rollbacks": [r.to_dict() for r in self.rollbacks],
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


# -- prompt ------------------------------------------------------------------

SECTION_HEADERS = {
    "system": "=== SYSTEM INSTRUCTION ===",
    "context": "=== RETRIEVED CONTEXT ===",
    "tokens": "=== VISUAL TOKENS ===",
    "history": "=== HISTORY ===",
}


@dataclass(frozen=True)
class ContextChunk:
    id: str
    partition: str
    score: float
    text: str


def render_history_entry(s: StepRecord) -> str:
    if s.kind == "feedback":
        return f"[{s.id} | {s.tool_call_id}] {s.observation}"
    args = json.dumps(s.action["args"], sort_keys=True) if s.action else "{}"
    kind = s.action["kind"] if s.action else "?"
    return f"[{s.id} | {s.tool_call_id}] ACTION {kind} {args}\nOBSERVATION: {s.observation}"


def assemble_prompt(system: str, chunks: Sequence[ContextChunk], tokens_text: str, history: Sequence[str],
                    history_budget: int = 600) -> str:
    """Concatenate ``[system, retrieved chunks, visual tokens, history]`` under labelled headers.

    Empty retrieval or history sections are omitted. History is trimmed to
    ``history_budget`` whitespace tokens by eliding the oldest entries first.
    """
    parts = [SECTION_HEADERS["system"], system.strip()]
    if chunks:
        parts.append(SECTION_HEADERS["context"])
        for c in chunks:
            parts.append(f"[{c.id} | {c.partition} | score {c.score:.4f}]\n{c.text.strip()}")
    parts += [SECTION_HEADERS["tokens"], tokens_text.strip() or "no observation yet"]
    if history:
        kept = list(history)
        elided = 0
        while len(kept) > 1 and sum(len(h.split()) for h in kept) > history_budget:
            kept.pop(0)
            elided += 1
        parts.append(SECTION_HEADERS["history"])
        if elided:
            parts.append(f"[... {elided} earlier step{'s' if elided > 1 else ''} elided ...]")
        parts += kept
    return "\n\n".join(parts) + "\n"


def uncertainty_ratio(spread: ScalarField, mean_field: ScalarField) -> float:
    s = float(np.mean(spread.values))
    m = float(np.mean(np.abs(mean_field.values)))
    if s == 0:
        return 0.0
    return math.inf if m == 0 else s / m


def uncertainty_gate(spread: ScalarField, mean_field: ScalarField, delta: float) -> bool:
    """True iff ``mean(spread) / mean(|ensemble mean|)`` exceeds ``delta``."""
    return uncertainty_ratio(spread, mean_field) > delta


# -- episode -----------------------------------------------------------------


@dataclass
class EpisodeConfig:
    delta: float = 0.02
    delta_decay: float = 1.0
    max_steps: int = 12
    max_rollbacks: int = 3
    system_instruction: str = DEFAULT_SYSTEM_INSTRUCTION
    constraints: ConstraintSpec = field(default_factory=lambda: ConstraintSpec(div_tol=DIV_TOL_SIMULATED))
    history_budget: int = 600
    retrieve_k: int = 3

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.max_rollbacks < 0:
            raise ValueError("max_rollbacks must be >= 0")

    def threshold(self, step: int) -> float:
        return self.delta * self.delta_decay**step

    def to_dict(self) -> dict:
        return {"delta": self.delta, "delta_decay": self.delta_decay, "max_steps": self.max_steps,
                "max_rollbacks": self.max_rollbacks, "history_budget": self.history_budget,
                "retrieve_k": self.retrieve_k, "constraints": self.constraints.to_dict(),
                "system_instruction_sha256": hashlib.sha256(self.system_instruction.encode()).hexdigest()}


class FaultInjector:
    """Corrupts the first ``count`` simulation results with a divergent velocity component."""

    def __init__(self, kind: str = "divergence", count: int = 1, amplitude: float = 0.5):
        if kind != "divergence":
            raise ValueError(f"unknown fault kind {kind!r}")
        self.kind = kind
        self.remaining = count
        self.amplitude = amplitude

    def __call__(self, states: list[list[FlowState]]) -> list[list[FlowState]]:
        if self.remaining <= 0:
            return states
        self.remaining -= 1
        out = []
        for traj in states:
            new = []
            for s in traj:
                X, _ = s.grid.coords()
                u = s["u"].values + self.amplitude * np.sin(X)
                new.append(s.with_channels(u=s["u"].replace(values=u)))
            out.append(new)
        return out


@dataclass
class EpisodeInputs:
    x_init: FlowState
    sim_config: SimulatorConfig
    store: KnowledgeStore
    embedder: Embedder
    derive: Callable[[FlowState], FlowState] | None = None
    fault: FaultInjector | None = None


@dataclass
class EpisodeState:
    inputs: EpisodeInputs
    cfg: EpisodeConfig
    trace: ReasoningTrace
    chunks: dict[str, ContextChunk] = field(default_factory=dict)
    forecast_states: list[FlowState] = field(default_factory=list)
    spread: dict[str, float] = field(default_factory=dict)
    counterfactual: dict | None = None
    advisory: bool = False
    step_count: int = 0
    retries: int = 0
    call_count: int = 0
    terminal: bool = False

    def context(self) -> list[ContextChunk]:
        return sorted(self.chunks.values(), key=lambda c: (-c.score, c.id))

    def current_state(self) -> FlowState:
        return self.forecast_states[-1] if self.forecast_states else self.inputs.x_init

    def tokens_text(self) -> str:
        state = self.current_state()
        tokens = project(state)
        lines = [f"Observed state at t={state.t:.4f}:"]
        for name in sorted(state.channels):
            s = field_stats(state[name])
            lines.append(f"- {name} [{state[name].unit}]: mean {s.mean:.4f}, min {s.min:.4f}, "
                         f"max {s.max:.4f}, std {s.std:.4f}")
        lines += ["Structures:", tokens.rendered_text]
        if self.advisory:
            lines.append("ADVISORY: ensemble spread exceeds the uncertainty threshold; a counterfactual probe is recommended.")
        return "\n".join(lines)

    def history(self) -> list[str]:
        return [render_history_entry(s) for s in self.trace.active_steps()]

    def prompt(self) -> str:
        return assemble_prompt(self.cfg.system_instruction, self.context(), self.tokens_text(), self.history(),
                               self.cfg.history_budget)

    def next_call_id(self, prefix: str = "call") -> str:
        self.call_count += 1
        return f"{prefix}-{self.call_count:04d}"


def new_episode(inputs: EpisodeInputs, cfg: EpisodeConfig, episode_id: str = "episode") -> EpisodeState:
    return EpisodeState(inputs, cfg, ReasoningTrace(episode_id))


def _summarise_ensemble(forecast: EnsembleForecast) -> tuple[dict, ScalarField, ScalarField]:
    spread = ensemble_spread(forecast, "vorticity")[-1]
    mean = forecast.mean_trajectory()[-1]["vorticity"]
    s = field_stats(spread)
    return {"K": forecast.K, "lambda": forecast.lam, "steps_per_output": forecast.steps_per_output,
            "n_outputs": forecast.n_outputs, "spread_mean": s.mean, "spread_max": s.max,
            "member_seeds": [str(x) for x in forecast.seeds]}, spread, mean


def _run_simulation(state: EpisodeState, args: dict):
    """Returns ``(member trajectories, mean trajectory, observation, data)``."""
    inp = state.inputs
    cfg = inp.sim_config
    K = int(args.get("K", 8))
    lam = float(args.get("lambda", 0.03))
    steps = int(args.get("steps", cfg.steps_per_output))
    n_out = int(args.get("n_outputs", cfg.n_outputs))
    mode = args.get("mode", "ensemble")
    if mode == "ensemble":
        forecast = ensemble_rollout(inp.x_init, K, lam, steps, cfg, n_out)
        cf = None
    elif mode == "counterfactual":
        if "intervention" not in args:
            raise ValueError("counterfactual simulation needs an 'intervention'")
        cf: CounterfactualResult | None = counterfactual_rollout(
            inp.x_init, Intervention.from_dict(args["intervention"]), K, lam, steps, cfg, n_out)
        forecast = cf.counterfactual
    else:
        raise ValueError(f"unknown simulate mode {mode!r}")
    members = [list(m) for m in forecast.members]
    if inp.fault is not None:
        members = inp.fault(members)
    data, spread, mean = _summarise_ensemble(forecast)
    data["mode"] = mode
    ratio = uncertainty_ratio(spread, mean)
    gate = ratio > state.cfg.threshold(state.step_count)
    data["uncertainty_ratio"] = ratio
    data["probe_recommended"] = gate
    obs = (f"{mode} ensemble K={K}, lambda={lam:.4f}, {n_out} outputs of {steps} steps; "
           f"final vorticity spread mean {data['spread_mean']:.4f}, max {data['spread_max']:.4f}; "
           f"spread/mean ratio {ratio:.4f} vs threshold {state.cfg.threshold(state.step_count):.4f}")
    if cf is not None:
        data["counterfactual"] = cf.to_dict()
        obs += (f"; intervention {cf.intervention.label or cf.intervention.op} gives causal sensitivity "
                f"{cf.sensitivity:.4f}")
    if gate:
        obs += "; ADVISORY: high ensemble uncertainty, consider a counterfactual probe"
    return members, forecast, obs, data, gate, cf


def _mean_states(members: list[list[FlowState]]) -> list[FlowState]:
    out = []
    for j in range(len(members[0])):
        ref = members[0][j]
        chans = {n: ref[n].replace(values=np.mean([m[j][n].values for m in members], axis=0)) for n in ref.channels}
        out.append(FlowState(ref.grid, chans, ref.t))
    return out


def react_step(state: EpisodeState, policy: PolicyBackend) -> EpisodeState:
    """Ask the policy for one action, execute it, and critic-check any physical output."""
    if state.terminal:
        raise RuntimeError("episode already finished")
    prompt = state.prompt()
    proposal = policy.propose(prompt)
    action = proposal.action
    state.step_count += 1
    trace = state.trace
    parent = trace.active[-1] if trace.active else None
    step_id = f"step-{len(trace.steps) + 1:04d}"
    call_id = state.next_call_id()
    record = StepRecord(step_id, parent, state.step_count, "action", call_id, "", action.to_dict(),
                        action.rationale, proposal.raw)
    verdict: ConsistencyVerdict | None = None
    pending = None

    try:
        if action.kind == "retrieve":
            query = str(action.args.get("query", ""))
            part = action.args.get("partition", "all")
            parts = None if part in (None, "all") else [part]
            if parts and parts[0] not in PARTITIONS:
                raise ValueError(f"unknown partition {part!r}")
            k = int(action.args.get("k", state.cfg.retrieve_k))
            res = state.inputs.store.search(query, state.inputs.embedder, k, parts)
            for cid, score in res.hits:
                ch = state.inputs.store.get(cid)
                old = state.chunks.get(cid)
                if old is None or score > old.score:
                    state.chunks[cid] = ContextChunk(cid, ch.partition, score, ch.text)
            record.data = {"hits": [[cid, score] for cid, score in res.hits]}
            record.observation = ("retrieved " + ", ".join(f"{cid} ({score:.4f})" for cid, score in res.hits)
                                  if res.hits else "no matching chunks")
        elif action.kind == "simulate":
            members, forecast, obs, data, gate, cf = _run_simulation(state, action.args)
            member_verdicts = [validate_trajectory(traj, state.cfg.constraints) for traj in members]
            failed = [(k, v) for k, v in enumerate(member_verdicts) if not v.passed]
            if failed:
                k0, v0 = failed[0]
                verdict = v0
                data["failed_members"] = [k for k, _ in failed]
            else:
                verdict = ConsistencyVerdict()
            record.data = data
            record.observation = obs
            pending = (members, gate, cf)
        elif action.kind == "reason":
            record.observation = "noted: " + str(action.args.get("text", "")).strip()
        else:
            record.observation = "finalizing: " + str(action.args.get("request", "report"))
    except Exception as exc:  # tool failures become observations
        logger.info("tool failure in %s: %s", action.kind, exc)
        record.observation = f"TOOL ERROR ({type(exc).__name__}): {exc}"
        record.data = {"error": str(exc)}
        pending = None
        verdict = None

    if verdict is not None:
        record.verdict = verdict.to_dict()
    trace.steps.append(record)
    trace.active.append(step_id)

    if verdict is not None and not verdict.passed:
        return rollback_on_violation(state, verdict)

    if pending is not None:
        members, gate, cf = pending
        means = _mean_states(members)
        if state.inputs.derive is not None:
            means = [state.inputs.derive(s) for s in means]
        state.forecast_states = means
        state.advisory = gate
        state.spread = {"spread_mean": record.data["spread_mean"], "uncertainty_ratio": record.data["uncertainty_ratio"]}
        if cf is not None:
            state.counterfactual = cf.to_dict()
    if action.terminal:
        state.terminal = True
        trace.status = "finalized"
    elif state.step_count >= state.cfg.max_steps:
        state.terminal = True
        trace.status = "truncated"
    return state


def rollback_on_violation(state: EpisodeState, verdict: ConsistencyVerdict) -> EpisodeState:
    """Prune the newest active step, inject corrective feedback and count the retry.

    A violation arriving after ``max_rollbacks`` retries have been spent ends
    the episode as ``failed``; the pruned step and its verdict are kept as the
    trace's ``failure`` record, so ``len(trace.rollbacks) <= max_rollbacks``.
    """
    trace = state.trace
    pruned_id = trace.active.pop()
    trace.step(pruned_id).pruned = True
    if state.retries >= state.cfg.max_rollbacks:
        trace.failure = {"pruned_step": pruned_id, "cause": verdict.to_dict()}
        trace.status = "failed"
        trace.error = f"rollback limit {state.cfg.max_rollbacks} exceeded: {verdict.summary()}"
        state.terminal = True
        return state
    state.retries += 1
    parent = trace.active[-1] if trace.active else None
    fb_id = f"step-{len(trace.steps) + 1:04d}"
    message = (f"{CRITIC_MARKER} the result of {pruned_id}: {verdict.summary()}. "
               f"The branch was pruned (retry {state.retries} of {state.cfg.max_rollbacks}); "
               "propose a physically consistent alternative.")
    trace.steps.append(StepRecord(fb_id, parent, state.step_count, "feedback", state.next_call_id("critic"),
                                  message, verdict=None, data={"cause": verdict.to_dict()}))
    trace.active.append(fb_id)
    trace.rollbacks.append(RollbackEvent(pruned_id, verdict.to_dict(), state.retries, fb_id))
    if state.step_count >= state.cfg.max_steps:
        state.terminal = True
        trace.status = "truncated"
    return state


@dataclass
class EpisodeResult:
    trace: ReasoningTrace
    status: str
    report: AnalysisReport | None


def build_report(state: EpisodeState, policy: PolicyBackend, provenance: dict) -> AnalysisReport:
    final = state.current_state()
    if state.inputs.derive is not None and not state.forecast_states:
        final = state.inputs.derive(final)
    stats = extremal_stats([final])
    rules = state.inputs.store.rules()
    descriptors = extract_topology(final)
    structures = render_descriptors(descriptors, per_kind=3)
    chunk_texts = [f"{c.id} ({c.partition}): {c.text}" for c in state.context()]
    summary, insights = narrative_sections(policy, stats, structures, chunk_texts)
    findings = dict(state.spread)
    if state.counterfactual is not None:
        findings["causal_sensitivity"] = state.counterfactual["sensitivity"]
        findings["counterfactual_mean_abs_delta"] = state.counterfactual["mean_abs_delta"]
    return AnalysisReport(
        executive_summary=summary,
        statistics=stats,
        spatial_pattern_analysis=structures,
        insights_conclusion=insights,
        alerts=trigger_alerts([final], rules),
        provenance=provenance,
        rules=rules,
        findings=findings,
        descriptors=[d.to_dict() for d in descriptors],
    )


def run_episode(inputs: EpisodeInputs, cfg: EpisodeConfig, policy: PolicyBackend, episode_id: str = "episode",
                provenance: dict | None = None) -> EpisodeResult:
    """Loop ``react_step`` until finalize, failure or ``max_steps``.

    Policy transport errors and unparseable actions propagate to the caller.
    """
    state = new_episode(inputs, cfg, episode_id)
    while not state.terminal:
        react_step(state, policy)
    report = None
    if state.trace.status == "finalized":
        prov = {"episode_id": episode_id, "policy": policy.name, **(provenance or {})}
        report = build_report(state, policy, prov)
    return EpisodeResult(state.trace, state.trace.status, report)


def active_path_clean(trace: ReasoningTrace) -> bool:
    """No step on the active path carries a failed verdict."""
    return all(s.verdict is None or s.verdict["passed"] for s in trace.active_steps())
