"""Time evolution of wave functions.

Two schemes are provided:

* ``split_fourier``: Strang splitting, half potential kick / exact kinetic
  propagation in Fourier space / half potential kick. Requires an all-periodic
  grid.
* ``crank_nicolson``: half potential kick, then one Cayley (Crank-Nicolson)
  factor per box axis using the 3-point Laplacian with zero walls, then half
  potential kick. Periodic axes in a mixed grid are propagated spectrally.

Both are unitary up to round-off. Time-dependent potentials are sampled once per
step at the step midpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .errors import InconsistentParticleDims, MethodGridMismatch
from .grid import Grid, WaveFunction

METHODS = ("split_fourier", "crank_nicolson")


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """Kinetic masses per axis plus a static and an optional time-dependent potential.

    ``time_potential(t)`` returns an array broadcastable to the grid (or a scalar)
    that is added to ``potential``.
    """

    masses: tuple[float, ...]
    potential: np.ndarray | None = None
    hbar: float = 1.0
    time_potential: Callable[[float], np.ndarray | float] | None = None

    def __post_init__(self):
        masses = tuple(float(m) for m in np.atleast_1d(self.masses))
        if any(not m > 0 for m in masses):
            raise ValueError("masses must be positive")
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")
        object.__setattr__(self, "masses", masses)
        if self.potential is not None:
            pot = np.asarray(self.potential, dtype=float)
            if not np.all(np.isfinite(pot)):
                raise ValueError("potential must be finite")
            pot = pot.copy()
            pot.setflags(write=False)
            object.__setattr__(self, "potential", pot)

    @property
    def time_dependent(self) -> bool:
        return self.time_potential is not None

    def potential_at(self, t: float) -> np.ndarray | float:
        v = 0.0 if self.potential is None else self.potential
        if self.time_potential is not None:
            v = v + self.time_potential(t)
        return v

    def check_grid(self, grid: Grid) -> None:
        if len(self.masses) != grid.ndim:
            raise ValueError(f"{len(self.masses)} masses for a {grid.ndim}-axis grid")
        if self.potential is not None and self.potential.shape not in ((), grid.shape):
            raise ValueError(f"potential shape {self.potential.shape} != grid {grid.shape}")


@dataclass(frozen=True)
class PropagatorConfig:
    method: str = "split_fourier"
    dt: float = 1e-3
    steps_per_snapshot: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown propagation method {self.method!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.steps_per_snapshot) < 1:
            raise ValueError("steps_per_snapshot must be >= 1")


def suggest_dt(grid: Grid, H: Hamiltonian) -> float:
    """Heuristic step: 0.1 * m * dx^2 / hbar, minimised over axes."""
    return min(0.1 * m * dx**2 / H.hbar for m, dx in zip(H.masses, grid.spacings))


def build_pair_potential(
    grid: Grid,
    pair_fn: Callable[[np.ndarray], np.ndarray],
    axis_groups: Sequence[Sequence[int]],
    minimum_image: bool = True,
) -> np.ndarray:
    """V(q) = sum_{i<j} pair_fn(|q_i - q_j|) on every grid cell.

    Each entry of ``axis_groups`` lists the grid axes belonging to one particle.
    On periodic axes separations use the minimum-image convention unless
    ``minimum_image`` is False.
    """
    groups = [list(g) for g in axis_groups]
    dims = {len(g) for g in groups}
    if len(dims) != 1:
        raise InconsistentParticleDims(f"particles have differing dimensions {sorted(dims)}")
    flat = [k for g in groups for k in g]
    if len(set(flat)) != len(flat) or sorted(flat) != list(range(grid.ndim)):
        raise InconsistentParticleDims("axis groups must partition the grid axes")
    mesh = grid.mesh()
    V = np.zeros(grid.shape)
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            r2 = np.zeros(grid.shape)
            for a, b in zip(groups[i], groups[j]):
                d = mesh[a] - mesh[b]
                ax_a, ax_b = grid.axes[a], grid.axes[b]
                if minimum_image and ax_a.periodic and ax_b.periodic and ax_a.length == ax_b.length:
                    L = ax_a.length
                    d = d - L * np.round(d / L)
                r2 = r2 + d**2
            V = V + np.broadcast_to(pair_fn(np.sqrt(r2)), grid.shape)
    return V


# --- kinetic factors -------------------------------------------------------


@lru_cache(maxsize=64)
def _kinetic_symbol(grid: Grid, masses: tuple[float, ...], hbar: float) -> np.ndarray:
    """sum_j hbar^2 k_j^2 / (2 m_j) on the Fourier grid."""
    T = np.zeros(grid.shape)
    for k, (ax, m) in enumerate(zip(grid.axes, masses)):
        shape = [1] * grid.ndim
        shape[k] = ax.points
        T = T + (hbar**2 * ax.wavenumbers() ** 2 / (2.0 * m)).reshape(shape)
    T.setflags(write=False)
    return T


@lru_cache(maxsize=64)
def _kinetic_phase(grid: Grid, masses: tuple[float, ...], hbar: float, dt: float) -> np.ndarray:
    ph = np.exp(-1j * _kinetic_symbol(grid, masses, hbar) * dt / hbar)
    ph.setflags(write=False)
    return ph


@lru_cache(maxsize=64)
def _axis_kinetic_phase(ax, mass: float, hbar: float, dt: float) -> np.ndarray:
    k = ax.wavenumbers()
    ph = np.exp(-1j * hbar * k**2 * dt / (2.0 * mass))
    ph.setflags(write=False)
    return ph


def _cayley_axis(arr: np.ndarray, axis: int, r: complex) -> np.ndarray:
    """Solve (1 - r D2) out = (1 + r D2) arr along one axis, D2 = [1, -2, 1], zero walls."""
    moved = np.moveaxis(arr, axis, 0)
    n = moved.shape[0]
    a = moved.reshape(n, -1)
    rhs = (1.0 - 2.0 * r) * a
    rhs[1:] += r * a[:-1]
    rhs[:-1] += r * a[1:]
    ab = np.empty((3, n), dtype=np.complex128)
    ab[0, :] = -r
    ab[1, :] = 1.0 + 2.0 * r
    ab[2, :] = -r
    sol = solve_banded((1, 1), ab, rhs, overwrite_b=True, check_finite=False)
    return np.moveaxis(sol.reshape(moved.shape), 0, axis)


def _spectral_axis(arr: np.ndarray, axis: int, phase: np.ndarray) -> np.ndarray:
    shape = [1] * arr.ndim
    shape[axis] = phase.size
    return np.fft.ifft(np.fft.fft(arr, axis=axis) * phase.reshape(shape), axis=axis)


def _kinetic_cn(arr: np.ndarray, grid: Grid, H: Hamiltonian, dt: float) -> np.ndarray:
    out = arr
    for k, (ax, m) in enumerate(zip(grid.axes, H.masses)):
        if ax.periodic:
            out = _spectral_axis(out, k, _axis_kinetic_phase(ax, m, H.hbar, dt))
        else:
            r = 1j * dt * H.hbar / (4.0 * m * ax.spacing**2)
            out = _cayley_axis(out, k, r)
    return out


def _check_method(grid: Grid, cfg: PropagatorConfig) -> None:
    if cfg.method == "split_fourier" and not grid.all_periodic:
        raise MethodGridMismatch("split_fourier requires every axis to be periodic")


def _advance(arr: np.ndarray, grid: Grid, H: Hamiltonian, method: str, t: float, dt: float,
             half_kick: np.ndarray | None = None) -> np.ndarray:
    """One step from t to t+dt on raw amplitudes."""
    if half_kick is None:
        V = H.potential_at(t + 0.5 * dt)
        half_kick = None if np.isscalar(V) and V == 0.0 else np.exp(-0.5j * np.asarray(V) * dt / H.hbar)
    out = arr if half_kick is None else arr * half_kick
    if method == "split_fourier":
        out = np.fft.ifftn(np.fft.fftn(out) * _kinetic_phase(grid, H.masses, H.hbar, dt))
    else:
        out = _kinetic_cn(out, grid, H, dt)
    if half_kick is not None:
        out = out * half_kick
    return out


def step(psi: WaveFunction, H: Hamiltonian, cfg: PropagatorConfig) -> WaveFunction:
    """Advance ``psi`` by one step of ``cfg.dt``."""
    _check_method(psi.grid, cfg)
    H.check_grid(psi.grid)
    out = _advance(psi.amplitudes, psi.grid, H, cfg.method, psi.time, cfg.dt)
    return WaveFunction(psi.grid, out, psi.time + cfg.dt)


def _step_plan(t0: float, t_final: float, dt: float) -> tuple[int, float]:
    """Number of full steps and the length of a trailing partial step (0 if none)."""
    span = t_final - t0
    if span < 0:
        raise ValueError(f"t_final {t_final} precedes the wave function time {t0}")
    n_float = span / dt
    n = int(round(n_float))
    if abs(n_float - n) <= 1e-9 * max(1.0, n_float):
        return n, 0.0
    n = int(np.floor(n_float))
    return n, span - n * dt


def iter_evolve(psi: WaveFunction, H: Hamiltonian, cfg: PropagatorConfig,
                t_final: float) -> Iterator[WaveFunction]:
    """Yield snapshots from ``psi.time`` to ``t_final``.

    The first snapshot is ``psi`` itself; then one every ``steps_per_snapshot``
    steps, and always one at the end. If ``t_final - psi.time`` is not a whole
    number of steps a single shorter step is appended to land on ``t_final``.
    """
    _check_method(psi.grid, cfg)
    H.check_grid(psi.grid)
    grid, dt, t0 = psi.grid, cfg.dt, psi.time
    n, partial = _step_plan(t0, t_final, dt)
    yield psi
    static_kick = None
    if not H.time_dependent:
        V = H.potential_at(t0)
        if not (np.isscalar(V) and V == 0.0):
            static_kick = np.exp(-0.5j * np.asarray(V) * dt / H.hbar)
    arr = psi.amplitudes
    for i in range(n):
        arr = _advance(arr, grid, H, cfg.method, t0 + i * dt, dt, static_kick)
        if (i + 1) % cfg.steps_per_snapshot == 0 or (i == n - 1 and partial == 0.0):
            t = t_final if (i == n - 1 and partial == 0.0) else t0 + (i + 1) * dt
            yield WaveFunction(grid, arr, t)
    if partial > 0.0:
        arr = _advance(arr, grid, H, cfg.method, t0 + n * dt, partial)
        yield WaveFunction(grid, arr, t_final)


def evolve(psi: WaveFunction, H: Hamiltonian, cfg: PropagatorConfig,
           t_final: float) -> list[WaveFunction]:
    return list(iter_evolve(psi, H, cfg, t_final))


def apply_hamiltonian(psi: WaveFunction, H: Hamiltonian, t: float | None = None) -> np.ndarray:
    """H psi, with spectral kinetic energy on periodic axes and the 3-point stencil on box axes."""
    grid = psi.grid
    a = psi.amplitudes
    out = np.zeros_like(a)
    for k, (ax, m) in enumerate(zip(grid.axes, H.masses)):
        if ax.periodic:
            shape = [1] * grid.ndim
            shape[k] = ax.points
            kk = ax.wavenumbers().reshape(shape)
            out += np.fft.ifft(np.fft.fft(a, axis=k) * (H.hbar**2 * kk**2 / (2 * m)), axis=k)
        else:
            pad = [(0, 0)] * grid.ndim
            pad[k] = (1, 1)
            p = np.pad(a, pad)
            sl = lambda s: tuple(slice(s, s + ax.points) if j == k else slice(None) for j in range(grid.ndim))
            lap = (p[sl(0)] - 2 * p[sl(1)] + p[sl(2)]) / ax.spacing**2
            out += -H.hbar**2 / (2 * m) * lap
    V = H.potential_at(psi.time if t is None else t)
    return out + np.asarray(V) * a


def energy(psi: WaveFunction, H: Hamiltonian) -> float:
    """<psi|H|psi> / <psi|psi>."""
    num = np.vdot(psi.amplitudes, apply_hamiltonian(psi, H)) * psi.grid.cell_volume
    return float(num.real / psi.norm_squared())
