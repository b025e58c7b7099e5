"""Gridded fields on a doubly periodic domain and spectral operators on them.

Rows index ``y`` (axis 0, ``height`` cells) and columns index ``x``
(axis 1, ``width`` cells). All derivatives are taken with FFTs, so they are
exact for band-limited data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

TWO_PI = 2.0 * math.pi


class UnitError(ValueError):
    """Raised for an unsupported or incomparable unit pair."""


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    lx: float = TWO_PI
    ly: float = TWO_PI
    periodic: bool = True

    def __post_init__(self):
        for n in (self.height, self.width):
            if n < 8 or n % 2:
                raise ValueError(f"grid dimensions must be even and >= 8, got {self.height}x{self.width}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain lengths must be positive")
        if not self.periodic:
            raise ValueError("only periodic grids are supported")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def dx(self) -> float:
        return self.lx / self.width

    @property
    def dy(self) -> float:
        return self.ly / self.height

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-corner coordinates ``(X, Y)`` as ``(H, W)`` arrays."""
        x = np.arange(self.width) * self.dx
        y = np.arange(self.height) * self.dy
        return np.meshgrid(x, y)

    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray]:
        """Angular wavenumbers ``(kx, ky)`` broadcastable to the full FFT layout."""
        kx = TWO_PI / self.lx * np.fft.fftfreq(self.width, 1.0 / self.width)
        ky = TWO_PI / self.ly * np.fft.fftfreq(self.height, 1.0 / self.height)
        return kx[None, :], ky[:, None]

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width, "lx": self.lx, "ly": self.ly}


def _frozen(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ValueError(f"expected shape {tuple(shape)}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField:
    grid: GridSpec
    values: np.ndarray
    variable: str = "field"
    unit: str = "1"

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.grid.shape))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def replace(self, values=None, variable=None, unit=None) -> "ScalarField":
        return ScalarField(
            self.grid,
            self.values if values is None else values,
            self.variable if variable is None else variable,
            self.unit if unit is None else unit,
        )


@dataclass(frozen=True)
class VectorField:
    grid: GridSpec
    u: np.ndarray
    v: np.ndarray
    unit: str = "1"

    def __post_init__(self):
        object.__setattr__(self, "u", _frozen(self.u, self.grid.shape))
        object.__setattr__(self, "v", _frozen(self.v, self.grid.shape))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v)))

    def speed(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True)
class FieldStats:
    mean: float
    min: float
    max: float
    std: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "min": self.min, "max": self.max, "std": self.std}


@dataclass(frozen=True)
class FlowState:
    """A multi-channel physical state: named scalar channels on one grid.

    Velocity lives in the ``u``/``v`` channels and vorticity in ``vorticity``
    when present. Extra channels (``forcing``, ``wave_height``...) ride along.
    """

    grid: GridSpec
    channels: Mapping[str, ScalarField] = field(default_factory=dict)
    t: float = 0.0

    def __post_init__(self):
        for name, f in self.channels.items():
            if f.grid != self.grid:
                raise ValueError(f"channel {name!r} is on a different grid")
        object.__setattr__(self, "channels", dict(self.channels))

    def __getitem__(self, name: str) -> ScalarField:
        return self.channels[name]

    def __contains__(self, name: str) -> bool:
        return name in self.channels

    def has_velocity(self) -> bool:
        return "u" in self.channels and "v" in self.channels

    def velocity(self) -> VectorField:
        if self.has_velocity():
            return VectorField(self.grid, self["u"].values, self["v"].values, self["u"].unit)
        if "vorticity" in self.channels:
            return velocity_from_vorticity(self["vorticity"])
        raise KeyError("state has neither velocity nor vorticity channels")

    def vorticity_field(self) -> ScalarField:
        if "vorticity" in self.channels:
            return self["vorticity"]
        return vorticity(self.velocity())

    def with_channels(self, **updates: ScalarField) -> "FlowState":
        merged = dict(self.channels)
        merged.update(updates)
        return FlowState(self.grid, merged, self.t)

    def without(self, *names: str) -> "FlowState":
        return FlowState(self.grid, {k: f for k, f in self.channels.items() if k not in names}, self.t)

    @classmethod
    def from_vorticity(cls, omega: ScalarField, t: float = 0.0) -> "FlowState":
        vel = velocity_from_vorticity(omega)
        return cls(
            omega.grid,
            {
                "vorticity": omega,
                "u": ScalarField(omega.grid, vel.u, "u", vel.unit),
                "v": ScalarField(omega.grid, vel.v, "v", vel.unit),
            },
            t,
        )


# -- spectral operators ------------------------------------------------------


def _require_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite values in input field")


def _deriv_multipliers(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    # Nyquist modes are dropped for odd derivatives so results stay real.
    kx, ky = grid.wavenumbers()
    kx = kx.copy()
    ky = ky.copy()
    kx[0, grid.width // 2] = 0.0
    ky[grid.height // 2, 0] = 0.0
    return 1j * kx, 1j * ky


def ddx(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    ikx, _ = _deriv_multipliers(grid)
    return np.fft.ifft2(ikx * np.fft.fft2(values)).real


def ddy(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    _, iky = _deriv_multipliers(grid)
    return np.fft.ifft2(iky * np.fft.fft2(values)).real


def divergence(f: VectorField) -> ScalarField:
    _require_finite(f.u, f.v)
    ikx, iky = _deriv_multipliers(f.grid)
    div_hat = ikx * np.fft.fft2(f.u) + iky * np.fft.fft2(f.v)
    unit = "1" if f.unit == "1" else f"{f.unit}/m"
    return ScalarField(f.grid, np.fft.ifft2(div_hat).real, "divergence", unit)


def vorticity(f: VectorField) -> ScalarField:
    _require_finite(f.u, f.v)
    ikx, iky = _deriv_multipliers(f.grid)
    curl_hat = ikx * np.fft.fft2(f.v) - iky * np.fft.fft2(f.u)
    unit = "1" if f.unit == "1" else "1/s"
    return ScalarField(f.grid, np.fft.ifft2(curl_hat).real, "vorticity", unit)


def velocity_from_vorticity(omega: ScalarField) -> VectorField:
    """Invert ``laplacian(psi) = -omega`` and return ``(dpsi/dy, -dpsi/dx)``.

    The mean of ``omega`` is discarded (the k=0 mode carries no velocity).
    """
    _require_finite(omega.values)
    grid = omega.grid
    kx, ky = grid.wavenumbers()
    k2 = kx**2 + ky**2
    k2[0, 0] = 1.0
    psi_hat = np.fft.fft2(omega.values) / k2
    psi_hat[0, 0] = 0.0
    ikx, iky = _deriv_multipliers(grid)
    u = np.fft.ifft2(iky * psi_hat).real
    v = np.fft.ifft2(-ikx * psi_hat).real
    unit = "1" if omega.unit == "1" else "m/s"
    return VectorField(grid, u, v, unit)


def kinetic_energy(f: VectorField) -> float:
    """``0.5 * sum(u^2 + v^2) * cell_area``."""
    return float(0.5 * np.sum(f.u**2 + f.v**2) * f.grid.cell_area)


def enstrophy(omega: ScalarField) -> float:
    """``0.5 * sum(omega^2) * cell_area``."""
    return float(0.5 * np.sum(omega.values**2) * omega.grid.cell_area)


def field_stats(f: ScalarField) -> FieldStats:
    vals = f.values
    # Clamp guards the min <= mean <= max invariant against summation round-off.
    lo, hi = float(vals.min()), float(vals.max())
    mean = min(max(float(vals.mean()), lo), hi)
    return FieldStats(mean=mean, min=lo, max=hi, std=float(vals.std()))


# -- units -------------------------------------------------------------------

_UNIT_ALIASES = {"degC": "°C", "C": "°C", "celsius": "°C", "kelvin": "K"}

_CONVERSIONS = {
    ("K", "°C"): lambda x: x - 273.15,
    ("°C", "K"): lambda x: x + 273.15,
    ("Pa", "hPa"): lambda x: x / 100.0,
    ("hPa", "Pa"): lambda x: x * 100.0,
}


def canonical_unit(unit: str) -> str:
    return _UNIT_ALIASES.get(unit, unit)


def can_convert(source: str, target: str) -> bool:
    s, t = canonical_unit(source), canonical_unit(target)
    return s == t or (s, t) in _CONVERSIONS


def convert_value(value, source: str, target: str):
    s, t = canonical_unit(source), canonical_unit(target)
    if s == t:
        return value
    try:
        fn = _CONVERSIONS[(s, t)]
    except KeyError:
        raise UnitError(f"unsupported unit conversion {source!r} -> {target!r}") from None
    return fn(value)


def convert_units(f: ScalarField, target: str) -> ScalarField:
    if canonical_unit(f.unit) == canonical_unit(target):
        return f.replace(unit=canonical_unit(target))
    return f.replace(values=convert_value(f.values, f.unit, target), unit=canonical_unit(target))


# -- serialization -----------------------------------------------------------


def save_field(f: ScalarField, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.f64`` (row-major little-endian float64) and ``<stem>.json``."""
    stem = Path(stem)
    data_path = stem.with_suffix(".f64")
    header_path = stem.with_suffix(".json")
    data_path.write_bytes(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
    header = {
        "H": f.grid.height,
        "W": f.grid.width,
        "Lx": f.grid.lx,
        "Ly": f.grid.ly,
        "variable": f.variable,
        "unit": f.unit,
    }
    header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return data_path, header_path


def load_field(stem: str | Path) -> ScalarField:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    grid = GridSpec(header["H"], header["W"], header.get("Lx", TWO_PI), header.get("Ly", TWO_PI))
    raw = np.frombuffer(stem.with_suffix(".f64").read_bytes(), dtype="<f8")
    if raw.size != grid.height * grid.width:
        raise ValueError(f"{stem}: payload has {raw.size} values, header says {grid.height}x{grid.width}")
    return ScalarField(grid, raw.reshape(grid.shape), header["variable"], header["unit"])


def export_csv(f: ScalarField, path: str | Path) -> Path:
    path = Path(path)
    np.savetxt(path, f.values, delimiter=",", fmt="%.17g", header=f"{f.variable} [{f.unit}]")
    return path
