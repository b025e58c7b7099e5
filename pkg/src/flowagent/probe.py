"""Counterfactual probing: do-interventions on initial conditions, paired-seed
re-simulation, and a bounded causal sensitivity score."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .fields import FlowState, ScalarField
from .simulator import EnsembleForecast, SimulatorConfig, ensemble_rollout, ensemble_spread, member_seed

OPERATORS = ("scale", "add", "zero")
SENSITIVITY_EPS = 1e-12


class InterventionError(ValueError):
    pass


@dataclass(frozen=True)
class Intervention:
    channel: str
    op: str
    value: float = 0.0
    region: tuple[int, int, int, int] | None = None  # (row0, row1, col0, col1), half-open
    label: str = ""

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise InterventionError(f"unknown operator {self.op!r}; expected one of {OPERATORS}")
        if self.op == "scale" and self.value < 0:
            raise InterventionError("scale factor must be non-negative")
        if self.region is not None:
            r0, r1, c0, c1 = self.region
            if not (0 <= r0 < r1 and 0 <= c0 < c1):
                raise InterventionError(f"empty or negative region {self.region}")

    @classmethod
    def identity(cls, channel: str = "vorticity") -> "Intervention":
        return cls(channel, "scale", 1.0, None, "identity")

    @classmethod
    def from_dict(cls, d: dict) -> "Intervention":
        region = d.get("region")
        if region in (None, "full"):
            region = None
        else:
            region = tuple(int(v) for v in region)
            if len(region) != 4:
                raise InterventionError("region must be 'full' or [row0, row1, col0, col1]")
        try:
            return cls(d["channel"], d["op"], float(d.get("value", 0.0)), region, d.get("label", ""))
        except KeyError as exc:
            raise InterventionError(f"intervention is missing key {exc}") from None

    @classmethod
    def from_json(cls, path_or_text: str) -> "Intervention":
        p = Path(path_or_text)
        text = p.read_text(encoding="utf-8") if p.is_file() else path_or_text
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_flag(cls, flag: str) -> "Intervention":
        """Parse ``channel:op[:value[:r0,r1,c0,c1]]``, e.g. ``vorticity:scale:1.5``."""
        parts = flag.split(":")
        if len(parts) < 2:
            raise InterventionError(f"cannot parse intervention {flag!r}")
        value = float(parts[2]) if len(parts) > 2 and parts[2] else 0.0
        region = tuple(int(v) for v in parts[3].split(",")) if len(parts) > 3 else None
        if region is not None and len(region) != 4:
            raise InterventionError("region must have four comma-separated integers")
        return cls(parts[0], parts[1], value, region, flag)

    def to_dict(self) -> dict:
        return {"channel": self.channel, "op": self.op, "value": self.value,
                "region": list(self.region) if self.region else "full", "label": self.label}

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        if self.region is None:
            m[:] = True
            return m
        r0, r1, c0, c1 = self.region
        if r1 > shape[0] or c1 > shape[1]:
            raise InterventionError(f"region {self.region} exceeds grid {shape}")
        m[r0:r1, c0:c1] = True
        return m


def apply_intervention(x_init: FlowState, i: Intervention) -> FlowState:
    """Apply the operator on the masked cells of one channel.

    Cells outside the mask are left bit-identical. Intervening on vorticity
    refreshes ``u``/``v``; intervening on ``u`` or ``v`` drops the stored
    vorticity so it is re-derived from the modified velocity.
    """
    if i.channel not in x_init:
        raise InterventionError(f"state has no channel {i.channel!r} (has {sorted(x_init.channels)})")
    f = x_init[i.channel]
    mask = i.mask(x_init.grid.shape)
    vals = np.array(f.values)
    if i.op == "scale":
        vals[mask] = vals[mask] * i.value
    elif i.op == "add":
        vals[mask] = vals[mask] + i.value
    else:
        vals[mask] = 0.0
    new = f.replace(values=vals)
    if i.channel == "vorticity":
        refreshed = FlowState.from_vorticity(new, x_init.t)
        return x_init.with_channels(vorticity=new, u=refreshed["u"], v=refreshed["v"])
    out = x_init.with_channels(**{i.channel: new})
    if i.channel in ("u", "v"):
        out = out.without("vorticity")
    return out


@dataclass(frozen=True)
class CounterfactualResult:
    factual: EnsembleForecast
    counterfactual: EnsembleForecast
    intervention: Intervention
    delta: tuple[ScalarField, ...]
    sensitivity: float
    channel: str = "vorticity"

    def to_dict(self) -> dict:
        return {
            "intervention": self.intervention.to_dict(),
            "channel": self.channel,
            "sensitivity": self.sensitivity,
            "mean_abs_delta": mean_abs_delta(self.delta),
            "mean_factual_spread": pooled_spread(self.factual, self.channel),
            "K": self.factual.K,
            "lambda": self.factual.lam,
            "member_seeds": list(self.factual.seeds),
        }


def mean_abs_delta(delta: Sequence[ScalarField]) -> float:
    return float(np.mean([np.abs(d.values) for d in delta]))


def pooled_spread(e: EnsembleForecast, channel: str = "vorticity") -> float:
    return float(np.mean([s.values for s in ensemble_spread(e, channel)]))


def sensitivity_score(delta_bar: float, sigma_bar: float, eps: float = SENSITIVITY_EPS) -> float:
    """``delta_bar / (delta_bar + sigma_bar + eps)``, clipped to ``[0, 1]``."""
    if delta_bar < 0 or sigma_bar < 0:
        raise ValueError("magnitudes must be non-negative")
    return float(min(max(delta_bar / (delta_bar + sigma_bar + eps), 0.0), 1.0))


def causal_sensitivity(result: CounterfactualResult) -> float:
    return sensitivity_score(mean_abs_delta(result.delta), pooled_spread(result.factual, result.channel))


def ensemble_delta(factual: EnsembleForecast, counter: EnsembleForecast, channel: str = "vorticity") -> tuple[ScalarField, ...]:
    if factual.K != counter.K or factual.n_outputs != counter.n_outputs:
        raise ValueError("factual and counterfactual ensembles must have matching shapes")
    d = counter.stack(channel).mean(axis=0) - factual.stack(channel).mean(axis=0)
    unit = factual.members[0][0][channel].unit
    return tuple(ScalarField(factual.grid, dj, f"{channel}_delta", unit) for dj in d)


def counterfactual_rollout(
    x_init: FlowState,
    intervention: Intervention,
    K: int,
    lam: float,
    steps_per_output: int,
    cfg: SimulatorConfig,
    n_outputs: int | None = None,
    member_seeds: Sequence[int] | None = None,
    channel: str = "vorticity",
    workers: int = 1,
) -> CounterfactualResult:
    """Factual and intervened ensembles with identical member seeds."""
    seeds = tuple(member_seeds) if member_seeds is not None else tuple(member_seed(cfg.seed, k) for k in range(K))
    x_cf = apply_intervention(x_init, intervention)
    factual = ensemble_rollout(x_init, K, lam, steps_per_output, cfg, n_outputs, seeds, workers)
    counter = ensemble_rollout(x_cf, K, lam, steps_per_output, cfg, n_outputs, seeds, workers)
    delta = ensemble_delta(factual, counter, channel)
    s = sensitivity_score(mean_abs_delta(delta), pooled_spread(factual, channel))
    return CounterfactualResult(factual, counter, intervention, delta, s, channel)
