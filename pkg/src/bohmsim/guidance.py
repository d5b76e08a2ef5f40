"""Guiding velocity field, probability current and ensemble transport."""

from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import SnapshotGap
from .grid import Grid, WaveFunction
from .propagator import Hamiltonian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Regularization:
    """Node handling for the velocity field.

    Cells with |psi|^2 < rel_epsilon * max|psi|^2 are "regularized": their speed
    is capped at ``vmax`` (default ``vmax_factor * grid diameter / dt``).
    ``phase_tol`` zeroes components whose Im(psi* d psi) is below
    ``phase_tol * |psi| * max|d psi|``, i.e. at round-off level, so that real
    states give exactly frozen trajectories.
    """

    rel_epsilon: float = 1e-12
    vmax: float | None = None
    vmax_factor: float = 10.0
    phase_tol: float = 1e-12

    def resolve_vmax(self, grid: Grid, dt: float | None) -> float:
        if self.vmax is not None:
            return float(self.vmax)
        if dt is None or dt <= 0:
            return np.inf
        return self.vmax_factor * grid.diameter / dt


DEFAULT_REG = Regularization()


@dataclass(frozen=True, eq=False)
class VelocityField:
    grid: Grid
    components: np.ndarray  # (D, *shape)
    epsilon: float
    vmax: float
    regularized: np.ndarray  # bool mask, True where |psi|^2 < epsilon
    time: float = 0.0


def gradient(amplitudes: np.ndarray, grid: Grid) -> list[np.ndarray]:
    """Spectral derivative on periodic axes, centered differences with zero walls on box axes."""
    grads = []
    for k, ax in enumerate(grid.axes):
        if ax.periodic:
            kk = ax.wavenumbers()
            if ax.points % 2 == 0:
                kk[ax.points // 2] = 0.0
            shape = [1] * grid.ndim
            shape[k] = ax.points
            g = np.fft.ifft(np.fft.fft(amplitudes, axis=k) * (1j * kk.reshape(shape)), axis=k)
        else:
            pad = [(0, 0)] * grid.ndim
            pad[k] = (1, 1)
            p = np.pad(amplitudes, pad)
            hi = tuple(slice(2, None) if j == k else slice(None) for j in range(grid.ndim))
            lo = tuple(slice(None, -2) if j == k else slice(None) for j in range(grid.ndim))
            g = (p[hi] - p[lo]) / (2.0 * ax.spacing)
        grads.append(g)
    return grads


def probability_current(psi: WaveFunction, H: Hamiltonian) -> np.ndarray:
    """J_k = (hbar/m_k) Im(psi* d_k psi), stacked as (D, *shape)."""
    a = psi.amplitudes
    grads = gradient(a, psi.grid)
    return np.stack([H.hbar / m * np.imag(np.conj(a) * g) for m, g in zip(H.masses, grads)])


def velocity_field(psi: WaveFunction, H: Hamiltonian, reg: Regularization = DEFAULT_REG,
                   dt: float | None = None, scale: float = 1.0) -> VelocityField:
    """v_k = (hbar/m_k) Im(d_k psi / psi) with node regularization.

    ``scale`` multiplies the whole field; anything other than 1 is a deliberate
    departure from the guiding equation, used as a negative control.
    """
    grid = psi.grid
    a = psi.amplitudes
    rho = np.abs(a) ** 2
    eps = reg.rel_epsilon * float(rho.max())
    vmax = reg.resolve_vmax(grid, dt)
    absa = np.abs(a)
    comps = np.empty((grid.ndim,) + grid.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, (m, g) in enumerate(zip(H.masses, gradient(a, grid))):
            num = np.imag(np.conj(a) * g)
            num[np.abs(num) <= reg.phase_tol * absa * np.abs(g).max()] = 0.0
            v = (scale * H.hbar / m) * num / rho
            v[~np.isfinite(v)] = 0.0
            comps[k] = v
    mask = rho < eps
    if np.any(mask) and np.isfinite(vmax):
        speed = np.sqrt(np.sum(comps**2, axis=0))
        over = mask & (speed > vmax)
        if np.any(over):
            comps[:, over] *= vmax / speed[over]
    return VelocityField(grid, comps, eps, vmax, mask, psi.time)


# --- ensembles -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleState:
    configs: np.ndarray  # (M, D)
    time: float
    seed: int
    wavefunction: WaveFunction | None = None
    capped: np.ndarray | None = None  # (M,) members that touched a regularized cell

    def __post_init__(self):
        cfg = np.atleast_2d(np.asarray(self.configs, dtype=float))
        if cfg.shape[0] < 1:
            raise ValueError("ensemble needs at least one member")
        object.__setattr__(self, "configs", cfg)
        capped = np.zeros(cfg.shape[0], bool) if self.capped is None else np.asarray(self.capped, bool)
        object.__setattr__(self, "capped", capped)

    @property
    def size(self) -> int:
        return self.configs.shape[0]


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    points: np.ndarray  # (T, D)
    member: int = -1


def _corner_table(grid: Grid, points: np.ndarray):
    """Flat corner indices and multilinear weights, each shaped (2^D, M)."""
    base, frac = [], []
    for k, ax in enumerate(grid.axes):
        f = ax.fractional_index(points[:, k])
        if ax.periodic:
            i0 = np.floor(f)
            w = f - i0
            i0 = np.mod(i0.astype(np.int64), ax.points)
            i1 = np.mod(i0 + 1, ax.points)
        else:
            f = np.clip(f, 0.0, ax.points - 1.0)
            i0 = np.minimum(np.floor(f).astype(np.int64), ax.points - 2)
            w = f - i0
            i1 = i0 + 1
        base.append((i0, i1))
        frac.append(w)
    idx, wts = [], []
    for bits in itertools.product((0, 1), repeat=grid.ndim):
        multi = tuple(base[k][b] for k, b in enumerate(bits))
        idx.append(np.ravel_multi_index(multi, grid.shape))
        w = np.ones(points.shape[0])
        for k, b in enumerate(bits):
            w = w * (frac[k] if b else 1.0 - frac[k])
        wts.append(w)
    return np.stack(idx), np.stack(wts)


def interpolate(values: np.ndarray, grid: Grid, points: np.ndarray,
                mask: np.ndarray | None = None):
    """Multilinear interpolation of ``values`` (C, *shape) at ``points`` (M, D).

    Returns (M, C) samples, plus an (M,) bool array flagging points whose
    stencil touches ``mask`` when a mask is given.
    """
    points = np.atleast_2d(points)
    idx, wts = _corner_table(grid, points)
    flat = values.reshape(values.shape[0], -1)
    out = np.zeros((points.shape[0], values.shape[0]), dtype=values.dtype)
    for c in range(idx.shape[0]):
        out += wts[c][:, None] * flat[:, idx[c]].T
    if mask is None:
        return out
    touched = np.zeros(points.shape[0], bool)
    mflat = mask.reshape(-1)
    for c in range(idx.shape[0]):
        touched |= mflat[idx[c]] & (wts[c] > 0)
    return out, touched


def _rk4(points: np.ndarray, grid: Grid, v0: VelocityField, vmid: np.ndarray,
         v1: VelocityField, dt: float) -> tuple[np.ndarray, np.ndarray]:
    mask = v0.regularized | v1.regularized
    k1, t1 = interpolate(v0.components, grid, points, mask)
    k2, t2 = interpolate(vmid, grid, points + 0.5 * dt * k1, mask)
    k3, t3 = interpolate(vmid, grid, points + 0.5 * dt * k2, mask)
    k4, t4 = interpolate(v1.components, grid, points + dt * k3, mask)
    new = points + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return grid.fold(new), t1 | t2 | t3 | t4


def _rk4_chunked(points, grid, v0, v1, dt, workers: int):
    vmid = 0.5 * (v0.components + v1.components)
    if workers <= 1 or points.shape[0] < 2 * workers:
        return _rk4(points, grid, v0, vmid, v1, dt)
    bounds = np.linspace(0, points.shape[0], workers + 1).astype(int)
    chunks = [points[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda p: _rk4(p, grid, v0, vmid, v1, dt), chunks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def advance_ensemble(e: EnsembleState, psi_pair: tuple[WaveFunction, WaveFunction], H: Hamiltonian,
                     reg: Regularization = DEFAULT_REG, velocity_scale: float = 1.0,
                     workers: int = 1) -> EnsembleState:
    """One RK4 step of every member between the two wave functions of ``psi_pair``."""
    psi0, psi1 = psi_pair
    dt = psi1.time - psi0.time
    if not dt > 0:
        raise SnapshotGap("wave-function pair must be strictly increasing in time")
    if abs(e.time - psi0.time) > 1e-9 * max(1.0, abs(dt)):
        raise SnapshotGap(f"ensemble time {e.time} does not match wave function time {psi0.time}")
    v0 = velocity_field(psi0, H, reg, dt, velocity_scale)
    v1 = velocity_field(psi1, H, reg, dt, velocity_scale)
    new, touched = _rk4_chunked(e.configs, psi0.grid, v0, v1, dt, workers)
    return EnsembleState(new, psi1.time, e.seed, psi1, e.capped | touched)


def iter_integrate(e0: EnsembleState, snapshots: Iterable[WaveFunction], H: Hamiltonian,
                   reg: Regularization = DEFAULT_REG, velocity_scale: float = 1.0,
                   workers: int = 1) -> Iterator[EnsembleState]:
    """Yield the ensemble at every snapshot time, starting with ``e0`` itself.

    Snapshots must start at ``e0.time`` and be uniformly spaced.
    """
    it = iter(snapshots)
    try:
        prev = next(it)
    except StopIteration:
        return
    if abs(prev.time - e0.time) > 1e-9 * max(1.0, abs(e0.time)):
        raise SnapshotGap(f"first snapshot at t={prev.time}, ensemble at t={e0.time}")
    e = EnsembleState(e0.configs, e0.time, e0.seed, prev, e0.capped)
    yield e
    spacing = None
    v_prev = None
    n_capped = int(e.capped.sum())
    for psi in it:
        dt = psi.time - prev.time
        if spacing is None:
            spacing = dt
        elif abs(dt - spacing) > 1e-9 * spacing:
            raise SnapshotGap(f"snapshot spacing changed from {spacing} to {dt} at t={psi.time}")
        if v_prev is None:
            v_prev = velocity_field(prev, H, reg, spacing, velocity_scale)
        v_next = velocity_field(psi, H, reg, spacing, velocity_scale)
        new, touched = _rk4_chunked(e.configs, psi.grid, v_prev, v_next, dt, workers)
        e = EnsembleState(new, psi.time, e.seed, psi, e.capped | touched)
        if int(e.capped.sum()) != n_capped:
            n_capped = int(e.capped.sum())
            log.info("t=%.6g: %d ensemble members have touched regularized cells", psi.time, n_capped)
        prev, v_prev = psi, v_next
        yield e


def integrate(e0: EnsembleState, snapshots: Iterable[WaveFunction], H: Hamiltonian,
              reg: Regularization = DEFAULT_REG, record: Sequence[int] = (),
              velocity_scale: float = 1.0, workers: int = 1,
              monitor: Callable[[EnsembleState], None] | None = None,
              ) -> tuple[EnsembleState, list[Trajectory]]:
    """Advance ``e0`` through every snapshot interval, recording selected members."""
    record = list(record)
    times, pts = [], []
    e = e0
    for e in iter_integrate(e0, snapshots, H, reg, velocity_scale, workers):
        if record:
            times.append(e.time)
            pts.append(e.configs[record].copy())
        if monitor is not None:
            monitor(e)
    trajs = []
    if record:
        stacked = np.stack(pts, axis=1)  # (R, T, D)
        trajs = [Trajectory(np.array(times), stacked[i], m) for i, m in enumerate(record)]
    return e, trajs


def write_trajectory_csv(path: str | Path, traj: Trajectory) -> None:
    d = traj.points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time"] + [f"axis{k}" for k in range(d)])
        for t, p in zip(traj.times, traj.points):
            w.writerow([f"{t:.17g}"] + [f"{x:.17g}" for x in p])
