"""Physics consistency checks on decoded states and trajectories."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fields import FlowState, divergence, enstrophy

DIV_TOL_EXTERNAL = 1e-6
DIV_TOL_SIMULATED = 1e-8


@dataclass(frozen=True)
class ConstraintSpec:
    div_tol: float = DIV_TOL_EXTERNAL
    enstrophy_monotone: bool = False
    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    finite_required: bool = True
    # Relative slack on enstrophy growth between consecutive states.
    enstrophy_rtol: float = 1e-12

    def __post_init__(self):
        if not self.div_tol > 0:
            raise ValueError("div_tol must be positive")
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ValueError(f"bounds for {name!r} need lo < hi, got ({lo}, {hi})")

    def to_dict(self) -> dict:
        return {
            "div_tol": self.div_tol,
            "enstrophy_monotone": self.enstrophy_monotone,
            "bounds": {k: list(v) for k, v in sorted(self.bounds.items())},
            "finite_required": self.finite_required,
        }


@dataclass(frozen=True)
class Violation:
    constraint: str
    step: int
    measured: float
    threshold: float
    channel: str = ""

    def to_dict(self) -> dict:
        measured = self.measured if math.isfinite(self.measured) else str(self.measured)
        return {"constraint": self.constraint, "step": self.step, "channel": self.channel,
                "measured": measured, "threshold": self.threshold}

    def describe(self) -> str:
        label = {
            "divergence": "mass conservation (div v = 0)",
            "finite": "finiteness",
            "bounds": f"bounds on {self.channel}",
            "enstrophy_monotone": "enstrophy decay",
        }.get(self.constraint, self.constraint)
        return f"{label} violated at step {self.step}: measured {self.measured:.4e}, threshold {self.threshold:.4e}"


@dataclass(frozen=True)
class ConsistencyVerdict:
    violations: tuple[Violation, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def first_violation_step(self) -> int | None:
        return min((v.step for v in self.violations), default=None)

    def summary(self) -> str:
        if self.passed:
            return "all physical constraints satisfied"
        return "; ".join(v.describe() for v in self.violations)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "first_violation_step": self.first_violation_step,
                "violations": [v.to_dict() for v in self.violations]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _state_violations(x: FlowState, spec: ConstraintSpec, step: int) -> list[Violation]:
    out: list[Violation] = []
    if spec.finite_required:
        for name in sorted(x.channels):
            bad = int(np.count_nonzero(~np.isfinite(x[name].values)))
            if bad:
                out.append(Violation("finite", step, float(bad), 0.0, name))
    if x.has_velocity():
        vel = x.velocity()
        if vel.is_finite():
            measured = float(np.abs(divergence(vel).values).max())
            if measured > spec.div_tol:
                out.append(Violation("divergence", step, measured, spec.div_tol, "u,v"))
    for name, (lo, hi) in sorted(spec.bounds.items()):
        if name not in x:
            continue
        vals = x[name].values[np.isfinite(x[name].values)]
        if vals.size == 0:
            continue
        vmin, vmax = float(vals.min()), float(vals.max())
        if vmin < lo:
            out.append(Violation("bounds", step, vmin, lo, name))
        if vmax > hi:
            out.append(Violation("bounds", step, vmax, hi, name))
    return out


def _vorticity_if_finite(x: FlowState):
    if "vorticity" in x:
        omega = x["vorticity"]
    elif x.has_velocity() and x.velocity().is_finite():
        omega = x.vorticity_field()
    else:
        return None
    return omega if omega.is_finite() else None


def check_state(x: FlowState, spec: ConstraintSpec, step: int = 0) -> ConsistencyVerdict:
    """Divergence (when a velocity pair exists), bounds and finiteness of one state."""
    return ConsistencyVerdict(tuple(_state_violations(x, spec, step)))


def validate_trajectory(traj: Sequence[FlowState], spec: ConstraintSpec) -> ConsistencyVerdict:
    """Per-state checks plus cross-step enstrophy monotonicity when requested.

    Every violation is reported; checking never stops at the first failure.
    """
    violations: list[Violation] = []
    prev = None
    for i, x in enumerate(traj):
        violations += _state_violations(x, spec, i)
        if spec.enstrophy_monotone:
            omega = _vorticity_if_finite(x)
            if omega is not None:
                z = enstrophy(omega)
                if prev is not None and z > prev * (1 + spec.enstrophy_rtol):
                    violations.append(Violation("enstrophy_monotone", i, z, prev, "vorticity"))
                prev = z
    violations.sort(key=lambda v: v.step)
    return ConsistencyVerdict(tuple(violations))
