"""Pointer measurements, the two-slit experiment and effective collapse.

The pointer coupling is the von Neumann scheme realized as a potential
``lambda * A(x) * y`` switched on during ``coupling_window``: it shifts the
pointer momentum by ``-lambda * A(x) * (t_off - t_on)``, and a period of free
flight converts the momentum shift into separated pointer positions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .equilibrium import (SampleSet, TestReport, TestSpec, run_test, sample)
from .errors import BranchOverlap, NotEffective
from .grid import AxisSpec, Density, Grid, WaveFunction, density, marginal, normalize
from .guidance import (DEFAULT_REG, EnsembleState, Regularization, Trajectory, iter_integrate)
from .propagator import Hamiltonian, PropagatorConfig, iter_evolve
from .states import gaussian
from .subsystem import (BranchMap, SubsystemSplit, branch_map, component_wavefunction,
                        detect_effective_wavefunction, product_compose)


@dataclass(frozen=True, eq=False)
class PointerModel:
    system_axes: tuple[int, ...]
    pointer_axis: int
    coupling_strength: float
    coupling_window: tuple[float, float]
    measured_function: np.ndarray  # A(x) on the system grid
    pointer_init: WaveFunction
    settling: float = 1.0

    def __post_init__(self):
        t_on, t_off = self.coupling_window
        if not t_off > t_on:
            raise ValueError("coupling window must have t_off > t_on")
        object.__setattr__(self, "system_axes", tuple(int(k) for k in self.system_axes))
        object.__setattr__(self, "measured_function", np.asarray(self.measured_function, dtype=float))

    @property
    def readout_time(self) -> float:
        return self.coupling_window[1] + self.settling

    def split(self) -> SubsystemSplit:
        return SubsystemSplit(self.system_axes, (self.pointer_axis,))

    def coupling(self, grid: Grid) -> Callable[[float], np.ndarray | float]:
        """Time-dependent interaction potential on the composite grid."""
        shape = [1] * grid.ndim
        for k in self.system_axes:
            shape[k] = grid.axes[k].points
        A = self.measured_function.reshape(shape)
        y = grid.coords(self.pointer_axis)
        V = self.coupling_strength * A * y
        t_on, t_off = self.coupling_window

        def potential(t: float):
            return V if t_on <= t < t_off else 0.0

        return potential


@dataclass(frozen=True)
class MeasurementRecord:
    member: int
    branch_id: int
    pointer_reading: float
    system_config: tuple[float, ...]
    weights: tuple[float, ...]


@dataclass(eq=False)
class MeasurementResult:
    Psi: WaveFunction
    records: list[MeasurementRecord]
    branches: BranchMap
    branch_psis: dict[int, WaveFunction]
    branch_values: dict[int, float]  # mean A over each branch
    born_weights: dict[int, float]  # weights computed from the system state alone
    frequencies: dict[int, float]
    final: EnsembleState
    settling_sensitivity: float = 0.0

    def system_samples(self, branch: int) -> np.ndarray:
        sel = np.array([r.branch_id == branch for r in self.records])
        return self.final.configs[sel][:, list(self._sys_axes)]

    _sys_axes: tuple[int, ...] = ()


def _min_pair_fidelity(slices: list[np.ndarray]) -> float:
    vecs = [v / np.linalg.norm(v) for v in slices]
    fmin = 1.0
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            fmin = min(fmin, abs(np.vdot(vecs[i], vecs[j])) ** 2)
    return fmin


def run_measurement(psi_sys: WaveFunction, model: PointerModel, H_free: Hamiltonian,
                    cfg: PropagatorConfig, ensemble: EnsembleState | None = None, M: int = 10_000,
                    seed: int = 0, support_eps: float = 1e-10, fidelity_delta: float = 1e-6,
                    settle_extra: float = 0.0, reg: Regularization = DEFAULT_REG,
                    workers: int = 1) -> MeasurementResult:
    """Couple system and pointer, evolve to the readout time and assign every member a branch.

    ``H_free`` lives on the composite grid; the coupling is added to it. When
    ``ensemble`` is None one is drawn from |psi_sys x phi_0|^2 with ``seed``.
    ``settle_extra`` > 0 re-reads the branches that much later and records the
    largest change in branch frequency as ``settling_sensitivity``.
    """
    groups = [list(model.system_axes), [model.pointer_axis]]
    Psi0 = product_compose([psi_sys, model.pointer_init], groups)
    grid = Psi0.grid
    coupling = model.coupling(grid)
    base_tp = H_free.time_potential
    tp = coupling if base_tp is None else (lambda t: coupling(t) + base_tp(t))
    H = Hamiltonian(H_free.masses, H_free.potential, H_free.hbar, tp)
    if ensemble is None:
        s0 = sample(density(Psi0), M, seed)
        ensemble = EnsembleState(s0.points, Psi0.time, seed)
    split = model.split()

    t_read = model.readout_time
    t_end = t_read + settle_extra
    snaps = iter_evolve(Psi0, H, cfg, t_end)
    at_read = at_end = None
    for e in iter_integrate(ensemble, snaps, H, reg, workers=workers):
        if at_read is None and e.time >= t_read - 1e-9 * cfg.dt:
            at_read = e
        at_end = e
    Psi = at_read.wavefunction

    bm = branch_map(Psi, split, support_eps)
    labels = bm.label_of(at_read.configs[:, [model.pointer_axis]])
    branch_psis, branch_values = {}, {}
    A = model.measured_function
    rho = np.abs(Psi.amplitudes) ** 2
    for lab in range(1, bm.count + 1):
        psi_b, slices = component_wavefunction(Psi, split, bm, lab)
        fmin = _min_pair_fidelity(slices)
        if fmin < 1.0 - fidelity_delta:
            # two outcome packets share this pointer component
            raise BranchOverlap(f"pointer component {lab} holds more than one outcome "
                                f"(slice fidelity {fmin:.6g}); the pointer packets are not separated")
        branch_psis[lab] = psi_b
        ymask = (bm.labels == lab)
        shape = [1] * grid.ndim
        shape[model.pointer_axis] = grid.axes[model.pointer_axis].points
        w = rho * ymask.reshape(shape)
        sys_w = w.sum(axis=model.pointer_axis)
        branch_values[lab] = float(np.sum(sys_w * A) / np.sum(sys_w))
    # Born weights from the system state alone: each system cell goes to the
    # branch whose mean A value is nearest to A(x).
    sys_mass = np.abs(psi_sys.amplitudes) ** 2
    sys_mass = sys_mass / sys_mass.sum()
    labs = np.array(sorted(branch_values))
    vals = np.array([branch_values[k] for k in labs])
    owner = labs[np.argmin(np.abs(A[..., None] - vals), axis=-1)]
    born = {int(k): float(sys_mass[owner == k].sum()) for k in labs}
    wsum = float(np.sum(bm.weights))
    weights = tuple(float(w) / wsum for w in bm.weights)
    records = [
        MeasurementRecord(i, int(labels[i]) if labels[i] else -1,
                          float(at_read.configs[i, model.pointer_axis]),
                          tuple(float(c) for c in at_read.configs[i, list(model.system_axes)]), weights)
        for i in range(at_read.size)
    ]
    M_eff = at_read.size
    freqs = {lab: float(np.count_nonzero(labels == lab) / M_eff) for lab in range(1, bm.count + 1)}
    sensitivity = 0.0
    if settle_extra > 0:
        bm2 = branch_map(at_end.wavefunction, split, support_eps)
        if bm2.count == bm.count:
            lab2 = bm2.label_of(at_end.configs[:, [model.pointer_axis]])
            f2 = {lab: float(np.count_nonzero(lab2 == lab) / M_eff) for lab in range(1, bm2.count + 1)}
            sensitivity = max(abs(freqs[k] - f2[k]) for k in freqs)
        else:
            sensitivity = float("inf")
    res = MeasurementResult(Psi, records, bm, branch_psis, branch_values, born, freqs, at_read, sensitivity)
    res._sys_axes = model.system_axes
    return res


def collapse_and_continue(Psi: WaveFunction, split: SubsystemSplit, Y: np.ndarray,
                          support_eps: float = 1e-10, fidelity_delta: float = 1e-6) -> WaveFunction:
    """Replace the universal wave function by the system's effective wave function.

    Valid only while the branch supports stay disjoint; raises NotEffective when
    there is no effective wave function at ``Y``.
    """
    rep = detect_effective_wavefunction(Psi, split, Y, support_eps, fidelity_delta)
    if rep.status != "effective":
        raise NotEffective(f"no effective wave function at Y={list(np.ravel(Y))} ({rep.status})")
    return rep.psi


def write_records_csv(path: str | Path, records: Sequence[MeasurementRecord],
                      extra: Sequence[dict] | None = None) -> None:
    n_sys = len(records[0].system_config) if records else 0
    extra_keys = list(extra[0].keys()) if extra else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["member", "branch", "pointer"] + [f"system{k}" for k in range(n_sys)] + extra_keys)
        for i, r in enumerate(records):
            row = [r.member, r.branch_id, f"{r.pointer_reading:.17g}"] + [f"{c:.17g}" for c in r.system_config]
            if extra:
                row += [extra[i][k] for k in extra_keys]
            w.writerow(row)


# --- two slits ---------------------------------------------------------------


@dataclass(frozen=True)
class TwoSlitGeometry:
    forward_points: int = 128
    forward_length: float = 40.0
    transverse_points: int = 256
    transverse_length: float = 60.0
    slit_separation: float = 6.0
    slit_width: float = 0.5
    forward_width: float = 1.0
    forward_momentum: float = 5.0
    mass: float = 1.0
    hbar: float = 1.0
    screen_time: float = 5.0
    dt: float = 0.01
    screen_bins: int = 64

    def grid(self) -> Grid:
        return Grid((
            AxisSpec(self.forward_points, -self.forward_length / 2, self.forward_length / 2),
            AxisSpec(self.transverse_points, -self.transverse_length / 2, self.transverse_length / 2),
        ))

    def initial_state(self) -> WaveFunction:
        g = self.grid()
        z, y = g.coords(0), g.coords(1)
        start = -self.forward_length / 4
        fz = gaussian(z, start, self.forward_width, self.forward_momentum)
        half = self.slit_separation / 2
        fy = gaussian(y, half, self.slit_width) + gaussian(y, -half, self.slit_width)
        return normalize(WaveFunction(g, fz * fy))


@dataclass(eq=False)
class TwoSlitResult:
    histogram: Density  # empirical transverse distribution on the screen bins
    expected: Density  # |psi|^2 transverse marginal on the same bins
    counts: np.ndarray
    trajectories: list[Trajectory]
    sides: np.ndarray  # initial transverse side (+1/-1) of every member
    crossings: int  # members whose transverse coordinate changed sign at any snapshot
    report: TestReport
    final: EnsembleState
    screen: Density  # fine-grid transverse marginal of |psi_t|^2


def _coarse_bins(ax: AxisSpec, n: int) -> Grid:
    return Grid((AxisSpec(n, ax.min, ax.max, ax.boundary),))


def two_slit_scenario(geometry: TwoSlitGeometry, M: int, seed: int, n_record: int = 100,
                      reg: Regularization = DEFAULT_REG, workers: int = 1) -> TwoSlitResult:
    """Free flight of a two-packet state to the screen time with Bohmian arrivals."""
    psi0 = geometry.initial_state()
    g = psi0.grid
    H = Hamiltonian((geometry.mass, geometry.mass), None, geometry.hbar)
    n_steps = int(round(geometry.screen_time / geometry.dt))
    cfg = PropagatorConfig("split_fourier", geometry.screen_time / n_steps, 1)
    s0 = sample(density(psi0), M, seed)
    e0 = EnsembleState(s0.points, 0.0, seed)
    sides = np.where(e0.configs[:, 1] >= 0.0, 1, -1)
    crossed = np.zeros(M, bool)
    record = np.linspace(0, M - 1, min(n_record, M)).round().astype(int)
    times, pts = [], []
    e = e0
    for e in iter_integrate(e0, iter_evolve(psi0, H, cfg, geometry.screen_time), H, reg, workers=workers):
        crossed |= np.where(e.configs[:, 1] >= 0.0, 1, -1) != sides
        times.append(e.time)
        pts.append(e.configs[record].copy())
    stacked = np.stack(pts, axis=1)
    trajs = [Trajectory(np.array(times), stacked[i], int(m)) for i, m in enumerate(record)]
    screen = marginal(density(e.wavefunction), [1])
    keep = ~e.capped
    y = e.configs[keep, 1]
    rep = run_test(SampleSet(y[:, None], e.time), screen, TestSpec("ks"))
    bins = _coarse_bins(g.axes[1], geometry.screen_bins)
    counts = np.bincount(bins.cell_index(y[:, None]), minlength=bins.size)
    hist = Density(bins, counts / (y.size * bins.cell_volume), normalized=True)
    fine_per_bin = g.axes[1].points // geometry.screen_bins
    if g.axes[1].points % geometry.screen_bins:
        raise ValueError("screen_bins must divide the transverse grid points")
    exp_vals = _coarsen_periodic(screen.values, fine_per_bin) / fine_per_bin
    expected = Density(bins, exp_vals, normalized=True)
    rep = TestReport(rep.statistic, rep.threshold, rep.passed, rep.delta, rep.sample_size, "two_slit_screen",
                     {"capped": int((~keep).sum()), "crossings": int(crossed.sum())})
    return TwoSlitResult(hist, expected, counts, trajs, sides, int(crossed.sum()), rep, e, screen)


def _coarsen_periodic(values: np.ndarray, factor: int) -> np.ndarray:
    """Sum fine cells into coarse cells whose centers coincide with every ``factor``-th node.

    Fine node j*factor is the center of coarse cell j, so each coarse cell takes
    the fine cells j*factor - factor//2 ... j*factor + (factor-1)//2 (wrapping);
    an even factor splits the two boundary cells in half.
    """
    n = values.size
    out = np.zeros(n // factor)
    for j in range(n // factor):
        c = j * factor
        if factor % 2:
            h = factor // 2
            idx = np.arange(c - h, c + h + 1) % n
            out[j] = values[idx].sum()
        else:
            h = factor // 2
            idx = np.arange(c - h + 1, c + h) % n
            out[j] = values[idx].sum() + 0.5 * (values[(c - h) % n] + values[(c + h) % n])
    return out


def symmetry_violations(counts: np.ndarray, n_sigma: float = 3.0) -> int:
    """Number of mirror bin pairs (j, -j) whose counts differ by more than n_sigma multinomial sigmas."""
    n = counts.size
    bad = 0
    for j in range(1, n // 2 + (n % 2)):
        a, b = counts[j], counts[n - j]
        if abs(a - b) > n_sigma * np.sqrt(max(a + b, 1)):
            bad += 1
    return bad


def write_histogram_csv(path: str | Path, result: TwoSlitResult) -> None:
    ax = result.histogram.grid.axes[0]
    M = int(result.counts.sum())
    expected = result.expected.values * ax.spacing * M
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "count", "expected"])
        for c, n, e in zip(ax.nodes, result.counts, expected):
            w.writerow([f"{c:.17g}", int(n), f"{e:.17g}"])
