"""Latent spectral propagator for 2D incompressible flow and perturbative ensembles.

The latent space is the set of vorticity Fourier coefficients with
``|kx|, |ky| <= M/2 - 1`` (half plane, ``rfft2`` layout, orthonormal FFT scaling).
Time stepping is RK4 on the Galerkin-truncated vorticity equation

    d(omega)/dt + u . grad(omega) = nu * laplacian(omega) + forcing

with the nonlinear term evaluated pseudo-spectrally.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .fields import (
    FlowState,
    GridSpec,
    ScalarField,
    enstrophy,
    load_field,
    save_field,
    vorticity,
)

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
FORCINGS = ("none", "kolmogorov", "vortex_source")

# Largest advective Courant number accepted; RK4 on a spectral advection
# operator is stable up to roughly 2.8 / pi.
CFL_MAX = 0.8
# RK4 stability limit along the negative real axis.
VISCOUS_LIMIT = 2.78


class SimulationDiverged(RuntimeError):
    def __init__(self, step: int, member: int | None = None):
        self.step = step
        self.member = member
        where = f" (member {member})" if member is not None else ""
        super().__init__(f"simulation diverged at step {step}{where}: non-finite latent mode")


class CFLError(ValueError):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def member_seed(base_seed: int, k: int) -> int:
    """Seed for ensemble member ``k``: ``splitmix64(base XOR k)``."""
    return splitmix64((int(base_seed) ^ int(k)) & MASK64)


@dataclass(frozen=True)
class SimulatorConfig:
    nu: float = 1e-3
    dt: float = 1e-3
    steps_per_output: int = 10
    n_outputs: int = 1
    dealias: bool = True
    forcing: str = "none"
    forcing_amplitude: float = 0.1
    forcing_wavenumber: int = 4
    truncation: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("viscosity must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps_per_output < 1 or self.n_outputs < 1:
            raise ValueError("steps_per_output and n_outputs must be >= 1")
        if self.forcing not in FORCINGS:
            raise ValueError(f"unknown forcing {self.forcing!r}; expected one of {FORCINGS}")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {
            "nu": self.nu,
            "dt": self.dt,
            "steps_per_output": self.steps_per_output,
            "n_outputs": self.n_outputs,
            "dealias": self.dealias,
            "forcing": self.forcing,
            "forcing_amplitude": self.forcing_amplitude,
            "forcing_wavenumber": self.forcing_wavenumber,
            "truncation": self.truncation,
            "seed": self.seed,
        }


class _Basis:
    """Index bookkeeping between the latent block and the full rfft2 layout."""

    def __init__(self, grid: GridSpec, truncation: int):
        if truncation > min(grid.height, grid.width) or truncation < 4:
            raise ValueError(
                f"truncation M={truncation} must lie in [4, min(H, W)={min(grid.height, grid.width)}]"
            )
        self.grid = grid
        self.M = truncation
        self.m = truncation // 2 - 1
        m = self.m
        self.rows = np.concatenate([np.arange(0, m + 1), np.arange(grid.height - m, grid.height)])
        self.shape = (2 * m + 1, m + 1)
        self.full_shape = (grid.height, grid.width // 2 + 1)
        ky = 2 * math.pi / grid.ly * np.fft.fftfreq(2 * m + 1, 1.0 / (2 * m + 1))
        kx = 2 * math.pi / grid.lx * np.arange(m + 1)
        self.kx = kx[None, :]
        self.ky = ky[:, None]
        self.k2 = self.kx**2 + self.ky**2
        self.inv_k2 = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        iky_int = np.fft.fftfreq(2 * m + 1, 1.0 / (2 * m + 1))[:, None]
        ikx_int = np.arange(m + 1)[None, :]
        # Orszag 2/3 rule on integer mode indices.
        self.dealias_mask = (np.abs(iky_int) < grid.height / 3.0) & (ikx_int < grid.width / 3.0)

    def pad(self, c: np.ndarray) -> np.ndarray:
        full = np.zeros(self.full_shape, dtype=np.complex128)
        full[self.rows, : self.m + 1] = c
        return full

    def crop(self, full: np.ndarray) -> np.ndarray:
        return full[self.rows, : self.m + 1]

    def to_grid(self, c: np.ndarray) -> np.ndarray:
        return np.fft.irfft2(self.pad(c), s=self.grid.shape, norm="ortho")

    def from_grid(self, values: np.ndarray) -> np.ndarray:
        return self.crop(np.fft.rfft2(values, norm="ortho"))

    def symmetrize(self, c: np.ndarray) -> np.ndarray:
        c = c.copy()
        m = self.m
        c[0, 0] = c[0, 0].real
        c[2 * m + 1 - np.arange(1, m + 1), 0] = np.conj(c[1 : m + 1, 0])
        return c

    @property
    def n_real_dof(self) -> int:
        return (2 * self.m + 1) ** 2

    def to_real(self, c: np.ndarray) -> np.ndarray:
        m = self.m
        col0 = c[1 : m + 1, 0]
        rest = c[:, 1:].ravel()
        return np.concatenate([[c[0, 0].real], col0.real, col0.imag, rest.real, rest.imag])

    def from_real(self, r: np.ndarray) -> np.ndarray:
        m = self.m
        c = np.zeros(self.shape, dtype=np.complex128)
        c[0, 0] = r[0]
        c[1 : m + 1, 0] = r[1 : m + 1] + 1j * r[m + 1 : 2 * m + 1]
        n_rest = (2 * m + 1) * m
        off = 2 * m + 1
        c[:, 1:] = (r[off : off + n_rest] + 1j * r[off + n_rest : off + 2 * n_rest]).reshape(2 * m + 1, m)
        return self.symmetrize(c)


_BASIS_CACHE: dict[tuple[GridSpec, int], _Basis] = {}


def _basis(grid: GridSpec, truncation: int) -> _Basis:
    key = (grid, truncation)
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = _Basis(grid, truncation)
    return _BASIS_CACHE[key]


@dataclass(frozen=True)
class LatentState:
    """Truncated vorticity spectrum plus an optional static forcing spectrum."""

    coeffs: np.ndarray
    grid: GridSpec
    truncation: int
    t: float = 0.0
    forcing: np.ndarray | None = None

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.complex128)
        if c.shape != self.basis.shape:
            raise ValueError(f"latent block must have shape {self.basis.shape}, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        if self.forcing is not None:
            f = np.array(self.forcing, dtype=np.complex128)
            f.setflags(write=False)
            object.__setattr__(self, "forcing", f)

    @property
    def basis(self) -> _Basis:
        return _basis(self.grid, self.truncation)

    def real_vector(self) -> np.ndarray:
        """The independent real degrees of freedom of the latent block."""
        return self.basis.to_real(self.coeffs)

    def is_hermitian(self) -> bool:
        return bool(np.allclose(self.basis.symmetrize(self.coeffs), self.coeffs, rtol=0, atol=1e-14))


def default_truncation(grid: GridSpec) -> int:
    return grid.height // 2


def encode(x: FlowState, truncation: int | None = None) -> LatentState:
    """Project a state onto the truncated vorticity spectrum.

    A ``forcing`` channel, when present, is projected alongside and kept
    static during propagation.
    """
    M = default_truncation(x.grid) if truncation is None else truncation
    basis = _basis(x.grid, M)
    omega = x.vorticity_field()
    if not omega.is_finite():
        raise ValueError("cannot encode a non-finite state")
    forcing = basis.from_grid(x["forcing"].values) if "forcing" in x else None
    return LatentState(basis.from_grid(omega.values), x.grid, M, x.t, forcing)


def decode(z: LatentState) -> FlowState:
    basis = z.basis
    omega = ScalarField(z.grid, basis.to_grid(z.coeffs), "vorticity", "1")
    state = FlowState.from_vorticity(omega, t=z.t)
    if z.forcing is not None:
        state = state.with_channels(forcing=ScalarField(z.grid, basis.to_grid(z.forcing), "forcing", "1"))
    return state


def perturb_latent(z: LatentState, lam: float, seed: int) -> LatentState:
    """``z + lam * xi`` with one standard normal draw per real degree of freedom."""
    if lam < 0:
        raise ValueError("perturbation magnitude must be non-negative")
    if lam == 0:
        return z
    rng = np.random.default_rng(seed)
    xi = z.basis.from_real(rng.standard_normal(z.basis.n_real_dof))
    return replace(z, coeffs=z.coeffs + lam * xi)


# -- forcing and initial conditions ------------------------------------------


def analytic_forcing(grid: GridSpec, cfg: SimulatorConfig) -> np.ndarray | None:
    if cfg.forcing == "none":
        return None
    X, Y = grid.coords()
    A, k = cfg.forcing_amplitude, cfg.forcing_wavenumber
    if cfg.forcing == "kolmogorov":
        return A * k * np.cos(k * Y * 2 * math.pi / grid.ly)
    sigma = 0.08 * min(grid.lx, grid.ly)
    r2 = _periodic_r2(grid, grid.lx / 2, grid.ly / 2)
    return A * np.exp(-r2 / (2 * sigma**2))


def _periodic_r2(grid: GridSpec, cx: float, cy: float) -> np.ndarray:
    X, Y = grid.coords()
    dx = (X - cx + grid.lx / 2) % grid.lx - grid.lx / 2
    dy = (Y - cy + grid.ly / 2) % grid.ly - grid.ly / 2
    return dx**2 + dy**2


def taylor_green(grid: GridSpec, amplitude: float = 1.0) -> FlowState:
    """``omega = 2 A sin x sin y``, i.e. ``u = A sin x cos y``, ``v = -A cos x sin y``."""
    X, Y = grid.coords()
    return FlowState.from_vorticity(ScalarField(grid, 2 * amplitude * np.sin(X) * np.sin(Y), "vorticity", "1"))


def taylor_green_exact(grid: GridSpec, nu: float, t: float, amplitude: float = 1.0) -> np.ndarray:
    X, Y = grid.coords()
    return 2 * amplitude * np.sin(X) * np.sin(Y) * math.exp(-2 * nu * t)


def gaussian_vortex(grid: GridSpec, amplitude: float, sigma: float, center=None) -> np.ndarray:
    cx, cy = center if center is not None else (grid.lx / 2, grid.ly / 2)
    return amplitude * np.exp(-_periodic_r2(grid, cx, cy) / (2 * sigma**2))


def random_vorticity(grid: GridSpec, seed: int, k_peak: float = 4.0, rms: float = 1.0) -> FlowState:
    """Smooth random vorticity with a Gaussian-shell spectrum peaked at ``k_peak``."""
    rng = np.random.default_rng(seed)
    kx, ky = grid.wavenumbers()
    k = np.sqrt(kx**2 + ky**2)
    amp = k * np.exp(-((k / k_peak) ** 2))
    noise = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    omega = np.fft.ifft2(amp * noise).real
    omega -= omega.mean()
    omega *= rms / omega.std()
    return FlowState.from_vorticity(ScalarField(grid, omega, "vorticity", "1"))


# -- time stepping -----------------------------------------------------------


class _Stepper:
    def __init__(self, z: LatentState, cfg: SimulatorConfig, extra_forcing: np.ndarray | None):
        b = z.basis
        self.b = b
        self.cfg = cfg
        self.mask = b.dealias_mask if cfg.dealias else np.ones(b.shape, dtype=bool)
        f = np.zeros(b.shape, dtype=np.complex128)
        if z.forcing is not None:
            f += z.forcing
        if extra_forcing is not None:
            f += b.from_grid(extra_forcing)
        self.forcing = f * self.mask
        self.ikx = 1j * b.kx
        self.iky = 1j * b.ky
        self.visc = cfg.nu * b.k2

    def velocity(self, c):
        b = self.b
        psi = c * b.inv_k2
        return b.to_grid(self.iky * psi), b.to_grid(-self.ikx * psi)

    def rhs(self, c: np.ndarray) -> np.ndarray:
        b = self.b
        u, v = self.velocity(c)
        wx = b.to_grid(self.ikx * c)
        wy = b.to_grid(self.iky * c)
        adv = b.from_grid(u * wx + v * wy)
        return (-adv - self.visc * c + self.forcing) * self.mask

    def step(self, c: np.ndarray) -> np.ndarray:
        dt = self.cfg.dt
        k1 = self.rhs(c)
        k2 = self.rhs(c + 0.5 * dt * k1)
        k3 = self.rhs(c + 0.5 * dt * k2)
        k4 = self.rhs(c + dt * k3)
        return c + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def check_cfl(self, c: np.ndarray) -> None:
        g = self.b.grid
        u, v = self.velocity(c)
        courant = self.cfg.dt * (np.abs(u).max() / g.dx + np.abs(v).max() / g.dy)
        if courant > CFL_MAX:
            raise CFLError(f"advective Courant number {courant:.3g} exceeds {CFL_MAX}; reduce dt")
        k2max = float((self.b.k2 * self.mask).max())
        if self.cfg.nu * k2max * self.cfg.dt > VISCOUS_LIMIT:
            raise CFLError(f"viscous stability number {self.cfg.nu * k2max * self.cfg.dt:.3g} exceeds {VISCOUS_LIMIT}")


def propagate(
    z: LatentState,
    steps: int,
    cfg: SimulatorConfig,
    forcing_field: np.ndarray | None = None,
    member: int | None = None,
) -> LatentState:
    """Advance ``z`` by ``steps`` RK4 steps of size ``cfg.dt``.

    ``forcing_field`` overrides the analytic forcing named in ``cfg``.
    Raises :class:`SimulationDiverged` naming the first non-finite step.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return z
    if forcing_field is None:
        forcing_field = analytic_forcing(z.grid, cfg)
    stepper = _Stepper(z, cfg, forcing_field)
    c = np.array(z.coeffs) * stepper.mask
    stepper.check_cfl(c)
    # overflow is reported as SimulationDiverged below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(1, steps + 1):
            c = stepper.step(c)
            if not np.all(np.isfinite(c)):
                raise SimulationDiverged(n, member)
    return replace(z, coeffs=c, t=z.t + steps * cfg.dt)


def rollout(z: LatentState, cfg: SimulatorConfig, n_outputs: int | None = None,
            steps_per_output: int | None = None, member: int | None = None) -> list[LatentState]:
    """Recursive rollout: each output is propagated from the previous one."""
    n_outputs = cfg.n_outputs if n_outputs is None else n_outputs
    tau = cfg.steps_per_output if steps_per_output is None else steps_per_output
    forcing = analytic_forcing(z.grid, cfg)
    out = []
    for j in range(n_outputs):
        try:
            z = propagate(z, tau, cfg, forcing, member)
        except SimulationDiverged as exc:
            raise SimulationDiverged(j * tau + exc.step, member) from None
        out.append(z)
    return out


# -- ensembles ---------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleForecast:
    members: tuple[tuple[FlowState, ...], ...]
    lam: float
    steps_per_output: int
    seeds: tuple[int, ...]
    times: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("an ensemble needs at least one member")
        if len({len(m) for m in self.members}) != 1:
            raise ValueError("members must have equal trajectory lengths")

    @property
    def K(self) -> int:
        return len(self.members)

    @property
    def n_outputs(self) -> int:
        return len(self.members[0])

    @property
    def grid(self) -> GridSpec:
        return self.members[0][0].grid

    def channel_names(self) -> list[str]:
        return list(self.members[0][0].channels)

    def stack(self, channel: str = "vorticity") -> np.ndarray:
        """Member values as a ``(K, T, H, W)`` array."""
        return np.stack([[s[channel].values for s in traj] for traj in self.members])

    def mean_trajectory(self) -> list[FlowState]:
        names = self.channel_names()
        means = {name: self.stack(name).mean(axis=0) for name in names}
        out = []
        for j in range(self.n_outputs):
            ref = self.members[0][j]
            chans = {n: ref[n].replace(values=means[n][j]) for n in names}
            out.append(FlowState(self.grid, chans, ref.t))
        return out


def ensemble_rollout(
    x_init: FlowState,
    K: int,
    lam: float,
    steps_per_output: int,
    cfg: SimulatorConfig,
    n_outputs: int | None = None,
    member_seeds: Sequence[int] | None = None,
    workers: int = 1,
) -> EnsembleForecast:
    """Perturb the encoded initial state ``K`` times and roll each member out.

    Member ``k`` uses ``member_seeds[k]`` when given, else ``member_seed(cfg.seed, k)``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    seeds = tuple(member_seeds) if member_seeds is not None else tuple(member_seed(cfg.seed, k) for k in range(K))
    if len(seeds) != K:
        raise ValueError(f"expected {K} member seeds, got {len(seeds)}")
    n_outputs = cfg.n_outputs if n_outputs is None else n_outputs
    z0 = encode(x_init, cfg.truncation)

    def run(k: int) -> tuple[FlowState, ...]:
        zk = perturb_latent(z0, lam, seeds[k])
        if steps_per_output == 0:
            return tuple(decode(zk) for _ in range(n_outputs))
        return tuple(decode(z) for z in rollout(zk, cfg, n_outputs, steps_per_output, member=k))

    if workers > 1 and K > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            members = tuple(pool.map(run, range(K)))
    else:
        members = tuple(run(k) for k in range(K))
    times = tuple(s.t for s in members[0])
    return EnsembleForecast(members, lam, steps_per_output, seeds, times)


def ensemble_spread(e: EnsembleForecast, channel: str = "vorticity") -> list[ScalarField]:
    """Population standard deviation across members (divisor ``K``), per output time."""
    data = e.stack(channel)
    # shift by member 0 so identical members give exactly zero spread
    d = data - data[0]
    sigma = np.sqrt(np.mean((d - d.mean(axis=0)) ** 2, axis=0))
    unit = e.members[0][0][channel].unit
    return [ScalarField(e.grid, s, f"{channel}_spread", unit) for s in sigma]


def spread_by_channel(e: EnsembleForecast) -> dict[str, list[ScalarField]]:
    return {name: ensemble_spread(e, name) for name in e.channel_names()}


def trajectory_enstrophy(states: Sequence[FlowState]) -> list[float]:
    return [enstrophy(s.vorticity_field()) for s in states]


def deterministic_rollout(x_init: FlowState, cfg: SimulatorConfig, n_outputs: int | None = None,
                          steps_per_output: int | None = None) -> list[FlowState]:
    z0 = encode(x_init, cfg.truncation)
    return [decode(z) for z in rollout(z0, cfg, n_outputs, steps_per_output)]


def save_trajectory(states: Sequence[FlowState], directory: str | Path, channels=("vorticity", "u", "v")) -> list[Path]:
    """Write one field pair per channel per step, plus ``trajectory.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    steps = []
    for j, s in enumerate(states):
        entry = {"index": j, "t": s.t, "files": {}}
        for name in channels:
            if name not in s:
                continue
            data_path, header_path = save_field(s[name], directory / f"{name}_{j:04d}")
            written += [data_path, header_path]
            entry["files"][name] = data_path.name
        steps.append(entry)
    index = directory / "trajectory.json"
    index.write_text(json.dumps({"grid": states[0].grid.to_dict() if states else None, "steps": steps},
                                sort_keys=True, indent=2) + "\n", encoding="utf-8")
    written.append(index)
    return written


def velocity_check(state: FlowState) -> float:
    """Max abs difference between stored vorticity and the curl of stored velocity."""
    return float(np.abs(vorticity(state.velocity()).values - state["vorticity"].values).max())


def load_trajectory(directory: str | Path) -> list[FlowState]:
    """Inverse of :func:`save_trajectory`; vorticity-only steps get ``u``/``v`` re-derived."""
    directory = Path(directory)
    index = json.loads((directory / "trajectory.json").read_text(encoding="utf-8"))
    states = []
    for entry in index["steps"]:
        chans = {name: load_field(directory / Path(fname).stem) for name, fname in sorted(entry["files"].items())}
        if "vorticity" in chans and not ("u" in chans and "v" in chans):
            base = FlowState.from_vorticity(chans["vorticity"], entry["t"])
            states.append(base.with_channels(**chans))
        else:
            grid = next(iter(chans.values())).grid
            states.append(FlowState(grid, chans, entry["t"]))
    return states
