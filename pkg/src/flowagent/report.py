"""Structured analysis reports with protocol-driven alert boxes.

Every number that appears in the markdown comes from computed statistics and
is printed with exactly four decimals; identifiers, units and hashes are set
in code spans. Narrative prose from the policy backend is stripped of digits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .fields import FieldStats, FlowState, UnitError, can_convert, canonical_unit, convert_value, field_stats
from .knowledge import ThresholdRule

DEFAULT_UNIT_PREFERENCES = {"Pa": "hPa", "K": "°C"}
SECTION_TITLES = (
    "Executive Summary",
    "Statistical Overview",
    "Spatial Pattern Analysis",
    "Physical Insights & Conclusion",
)
INSUFFICIENT = "insufficient data"
_NUMBER = re.compile(r"[-+]?\d+(?:[.,]\d+)*(?:[eE][-+]?\d+)?")


@dataclass(frozen=True)
class AlertBox:
    chunk_id: str
    variable: str
    observed: float
    unit: str
    op: str
    threshold: float
    directive: str

    def rule(self) -> ThresholdRule:
        return ThresholdRule(self.variable, self.op, self.threshold, self.unit, self.directive)

    def to_dict(self) -> dict:
        return {"chunk_id": self.chunk_id, "variable": self.variable, "observed": self.observed,
                "unit": self.unit, "op": self.op, "threshold": self.threshold, "directive": self.directive}


@dataclass(frozen=True)
class VariableStats:
    stats: FieldStats
    unit: str

    def to_dict(self) -> dict:
        return {"unit": self.unit, **self.stats.to_dict()}


def extremal_stats(states: Sequence[FlowState], variables: Iterable[str] | None = None) -> dict[str, VariableStats]:
    """Per-variable statistics pooled over all states (mean/std averaged, min/max extremal)."""
    out: dict[str, VariableStats] = {}
    names = sorted(variables) if variables is not None else sorted({n for s in states for n in s.channels})
    for name in names:
        per = [field_stats(s[name]) for s in states if name in s]
        if not per:
            continue
        unit = next(s[name].unit for s in states if name in s)
        lo = min(p.min for p in per)
        hi = max(p.max for p in per)
        mean = min(max(sum(p.mean for p in per) / len(per), lo), hi)
        out[name] = VariableStats(FieldStats(mean, lo, hi, sum(p.std for p in per) / len(per)), unit)
    return out


def trigger_from_stats(stats: Mapping[str, VariableStats], rules: Sequence[tuple[str, ThresholdRule]]) -> list[AlertBox]:
    """Evaluate each rule against the variable's max (for ``>``) or min (for ``<``), strictly."""
    alerts = []
    for chunk_id, rule in rules:
        vs = stats.get(rule.variable)
        if vs is None:
            continue
        if not can_convert(vs.unit, rule.unit):
            raise UnitError(f"rule {chunk_id}: cannot compare {rule.variable} in {vs.unit!r} with {rule.unit!r}")
        raw = vs.stats.max if rule.op == ">" else vs.stats.min
        observed = float(convert_value(raw, vs.unit, rule.unit))
        if rule.violated_by(observed):
            alerts.append(AlertBox(chunk_id, rule.variable, observed, canonical_unit(rule.unit), rule.op,
                                   rule.value, rule.directive))
    return alerts


def trigger_alerts(states: Sequence[FlowState], rules: Sequence[tuple[str, ThresholdRule]]) -> list[AlertBox]:
    return trigger_from_stats(extremal_stats(states, {r.variable for _, r in rules}), rules)


def convert_stats(vs: VariableStats, target: str) -> VariableStats:
    s = vs.stats
    scale = abs(convert_value(1.0, vs.unit, target) - convert_value(0.0, vs.unit, target))
    return VariableStats(
        FieldStats(
            float(convert_value(s.mean, vs.unit, target)),
            float(convert_value(s.min, vs.unit, target)),
            float(convert_value(s.max, vs.unit, target)),
            float(s.std * scale),
        ),
        canonical_unit(target),
    )


@dataclass
class AnalysisReport:
    executive_summary: str = ""
    statistics: dict[str, VariableStats] = field(default_factory=dict)
    spatial_pattern_analysis: str = ""
    insights_conclusion: str = ""
    alerts: list[AlertBox] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    rules: list[tuple[str, ThresholdRule]] = field(default_factory=list)
    findings: dict[str, float] = field(default_factory=dict)
    descriptors: list[dict] = field(default_factory=list)
    title: str = "Flow Analysis Report"


def fmt(x: float) -> str:
    if x != x:
        return "nan"
    return f"{x:.4f}"


def _code(text) -> str:
    return f"`{text}`"


def render_report(report: AnalysisReport, unit_preferences: Mapping[str, str] | None = None) -> tuple[str, dict]:
    """Markdown text and a JSON-ready sidecar holding every number at full precision."""
    prefs = DEFAULT_UNIT_PREFERENCES if unit_preferences is None else unit_preferences
    lines = [f"# {report.title}", ""]

    lines += [f"## {SECTION_TITLES[0]}", "", report.executive_summary.strip() or "n/a", ""]

    lines += [f"## {SECTION_TITLES[1]}", ""]
    if report.statistics:
        lines += ["| Variable | Unit | Global Mean | Minimum | Maximum | Std Dev |",
                  "|---|---|---|---|---|---|"]
        for name in sorted(report.statistics):
            vs = report.statistics[name]
            target = prefs.get(canonical_unit(vs.unit))
            if target and can_convert(vs.unit, target):
                vs = convert_stats(vs, target)
            s = vs.stats
            lines.append(f"| {_code(name)} | {_code(vs.unit)} | {fmt(s.mean)} | {fmt(s.min)} | {fmt(s.max)} | {fmt(s.std)} |")
    else:
        lines.append("n/a")
    if report.findings:
        lines.append("")
        for key in sorted(report.findings):
            lines.append(f"- {_code(key)}: {fmt(report.findings[key])}")
    lines.append("")

    lines += [f"## {SECTION_TITLES[2]}", "", report.spatial_pattern_analysis.strip() or "n/a", ""]
    lines += [f"## {SECTION_TITLES[3]}", "", report.insights_conclusion.strip() or "n/a", ""]

    lines += ["## Alerts", ""]
    if report.alerts:
        for a in report.alerts:
            lines += [
                f"> **ALERT** {_code(a.chunk_id)}: {_code(a.variable)} observed {fmt(a.observed)} {_code(a.unit)} "
                f"{a.op} threshold {fmt(a.threshold)} {_code(a.unit)}",
                f"> **Directive:** {a.directive}",
                "",
            ]
    else:
        lines += ["No protocol thresholds exceeded.", ""]

    lines += ["## Provenance", ""]
    for key in sorted(report.provenance):
        lines.append(f"- {key}: {_code(report.provenance[key])}")
    markdown = "\n".join(lines).rstrip() + "\n"

    sidecar = {
        "title": report.title,
        "sections": {
            "executive_summary": report.executive_summary,
            "spatial_pattern_analysis": report.spatial_pattern_analysis,
            "insights_conclusion": report.insights_conclusion,
        },
        "statistics": {k: report.statistics[k].to_dict() for k in sorted(report.statistics)},
        "findings": dict(sorted(report.findings.items())),
        "descriptors": report.descriptors,
        "rules": [{"chunk_id": cid, **r.to_dict()} for cid, r in report.rules],
        "alerts": [a.to_dict() for a in report.alerts],
        "provenance": report.provenance,
    }
    return markdown, sidecar


def stats_from_sidecar(sidecar: Mapping) -> dict[str, VariableStats]:
    return {
        name: VariableStats(FieldStats(d["mean"], d["min"], d["max"], d["std"]), d["unit"])
        for name, d in sidecar["statistics"].items()
    }


def rules_from_sidecar(sidecar: Mapping) -> list[tuple[str, ThresholdRule]]:
    return [(r["chunk_id"], ThresholdRule(r["variable"], r["op"], r["value"], r["unit"], r["directive"]))
            for r in sidecar["rules"]]


def strip_numbers(text: str) -> str:
    """Remove numeric literals from generated prose; figures come from the tables only."""
    return _NUMBER.sub("[see statistics]", text)


def narrative_prompt(stats: Mapping[str, VariableStats], structures: str, chunks: Sequence[str]) -> str:
    parts = ["Write two short sections for a flow analysis report.",
             "Reply with 'SUMMARY:' followed by an executive summary, then 'INSIGHTS:' followed by physical "
             "insights and conclusions. Do not quote numbers; the report tables carry them.", "", "STATISTICS:"]
    for name in sorted(stats):
        s = stats[name].stats
        parts.append(f"- {name} [{stats[name].unit}]: mean {fmt(s.mean)}, min {fmt(s.min)}, "
                     f"max {fmt(s.max)}, std {fmt(s.std)}")
    parts += ["", "STRUCTURES:", structures or "none", "", "REFERENCES:"]
    parts += [f"- {c}" for c in chunks] or ["none"]
    return "\n".join(parts)


def parse_narrative(raw: str) -> tuple[str, str]:
    m = re.search(r"SUMMARY:\s*(.*?)\s*INSIGHTS:\s*(.*)\Z", raw, flags=re.S)
    if not m:
        return raw.strip(), ""
    return m.group(1).strip(), m.group(2).strip()


def narrative_sections(policy, stats: Mapping[str, VariableStats], structures: str,
                       chunks: Sequence[str]) -> tuple[str, str]:
    """Executive summary and insights text from the policy backend.

    With nothing to describe, returns an "insufficient data" stub without
    calling the backend. Backend errors propagate.
    """
    if not stats and not structures and not chunks:
        return INSUFFICIENT, INSUFFICIENT
    summary, insights = parse_narrative(policy.narrate(narrative_prompt(stats, structures, chunks)))
    return strip_numbers(summary), strip_numbers(insights)
