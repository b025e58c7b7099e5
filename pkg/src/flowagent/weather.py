"""Toy "weather" channels diagnosed from a 2D flow, for report and alert demos.

Wave height grows with the square of local speed, surface pressure follows the
stream function (geostrophic-style balance) and air temperature is a linear
function of vorticity. Constants are fixed so the same flow always maps to
the same weather.
"""

from __future__ import annotations

import numpy as np

from .fields import FlowState, GridSpec, ScalarField
from .simulator import random_vorticity

WAVE_BASE_M = 1.0
WAVE_GAIN = 6.0          # m per (nondimensional speed)^2
PRESSURE_BASE_PA = 101325.0
PRESSURE_GAIN_PA = 1500.0
TEMPERATURE_BASE_K = 300.15
TEMPERATURE_GAIN_K = 2.5

DERIVED = ("wave_height", "pressure", "temperature")


def stream_function(omega: np.ndarray, grid: GridSpec) -> np.ndarray:
    kx, ky = grid.wavenumbers()
    k2 = kx**2 + ky**2
    k2[0, 0] = 1.0
    psi_hat = np.fft.fft2(omega) / k2
    psi_hat[0, 0] = 0.0
    return np.fft.ifft2(psi_hat).real


def derive_weather_channels(state: FlowState) -> FlowState:
    """Attach ``wave_height`` [m], ``pressure`` [Pa] and ``temperature`` [K]."""
    grid = state.grid
    vel = state.velocity()
    omega = state.vorticity_field().values
    speed2 = vel.u**2 + vel.v**2
    psi = stream_function(omega, grid)
    return state.with_channels(
        wave_height=ScalarField(grid, WAVE_BASE_M + WAVE_GAIN * speed2, "wave_height", "m"),
        pressure=ScalarField(grid, PRESSURE_BASE_PA + PRESSURE_GAIN_PA * psi, "pressure", "Pa"),
        temperature=ScalarField(grid, TEMPERATURE_BASE_K + TEMPERATURE_GAIN_K * omega, "temperature", "K"),
    )


def toy_weather_state(grid: GridSpec, seed: int = 0, rms: float = 1.0) -> FlowState:
    return derive_weather_channels(random_vorticity(grid, seed, rms=rms))
