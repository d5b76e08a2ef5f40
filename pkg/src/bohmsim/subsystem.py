"""Splitting configuration space into a system and its environment.

The conditional wave function of the x-system is the universal wave function
with the environment coordinates held at their actual values. When the
environment marginal breaks into separated components and every slice through
the component holding the actual environment gives the same x-wave function
(up to a constant), that wave function is the system's *effective* wave function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import AxisOverlap, NullSlice
from .grid import Density, Grid, WaveFunction, density, fidelity, marginal, normalize
from .guidance import _corner_table, gradient
from .propagator import Hamiltonian

NULL_SLICE_NORM = 1e-14


@dataclass(frozen=True)
class SubsystemSplit:
    x_axes: tuple[int, ...]
    y_axes: tuple[int, ...]

    def __post_init__(self):
        x = tuple(int(k) for k in self.x_axes)
        y = tuple(int(k) for k in self.y_axes)
        if not x or not y:
            raise ValueError("both the system and the environment need at least one axis")
        if set(x) & set(y):
            raise AxisOverlap(f"system axes {x} and environment axes {y} overlap")
        object.__setattr__(self, "x_axes", x)
        object.__setattr__(self, "y_axes", y)

    @classmethod
    def of(cls, x_axes: Sequence[int], ndim: int) -> "SubsystemSplit":
        return cls(tuple(x_axes), tuple(k for k in range(ndim) if k not in x_axes))

    def check(self, grid: Grid) -> None:
        if sorted(self.x_axes + self.y_axes) != list(range(grid.ndim)):
            raise ValueError(f"split {self} does not partition a {grid.ndim}-axis grid")


@dataclass(frozen=True, eq=False)
class EffectiveWfReport:
    status: str  # effective | conditional_only | undefined
    psi: WaveFunction | None
    branch_weight: float
    support_gap: float
    branch_id: int
    min_fidelity: float = float("nan")


def _x_first(Psi: WaveFunction, split: SubsystemSplit) -> np.ndarray:
    """Amplitudes transposed to (x..., y...) and reshaped to (Nx, Ny)."""
    split.check(Psi.grid)
    a = np.transpose(Psi.amplitudes, split.x_axes + split.y_axes)
    nx = int(np.prod([Psi.grid.axes[k].points for k in split.x_axes]))
    return a.reshape(nx, -1)


def _y_weights(grid: Grid, split: SubsystemSplit, Y: np.ndarray):
    ygrid = grid.subgrid(split.y_axes)
    Y = np.asarray(Y, dtype=float).reshape(1, -1)
    if Y.shape[1] != ygrid.ndim:
        raise ValueError(f"environment point has {Y.shape[1]} coordinates, expected {ygrid.ndim}")
    for k, ax in enumerate(ygrid.axes):
        if not ax.contains(Y[:, k]).all():
            raise ValueError(f"environment coordinate {Y[0, k]} outside axis {k} of the environment")
    idx, wts = _corner_table(ygrid, Y)
    return idx[:, 0], wts[:, 0]


def slice_amplitudes(Psi: WaveFunction, split: SubsystemSplit, Y: np.ndarray,
                     flat_x: np.ndarray | None = None) -> np.ndarray:
    """Psi(x, Y) on the x-grid (flattened), multilinear in the environment coordinates."""
    flat_x = _x_first(Psi, split) if flat_x is None else flat_x
    idx, wts = _y_weights(Psi.grid, split, Y)
    return flat_x[:, idx] @ wts


def batch_slices(Psi: WaveFunction, split: SubsystemSplit, Y: np.ndarray) -> np.ndarray:
    """Unnormalized conditional amplitudes for many environment points: (Nx, M) for ``Y`` (M, dy)."""
    flat_x = _x_first(Psi, split)
    ygrid = Psi.grid.subgrid(split.y_axes)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    idx, wts = _corner_table(ygrid, Y)
    out = np.zeros((flat_x.shape[0], Y.shape[0]), dtype=complex)
    for c in range(idx.shape[0]):
        out += flat_x[:, idx[c]] * wts[c]
    return out


def conditional_wavefunction(Psi: WaveFunction, split: SubsystemSplit, Y: np.ndarray) -> WaveFunction:
    xgrid = Psi.grid.subgrid(split.x_axes)
    amp = slice_amplitudes(Psi, split, Y).reshape(xgrid.shape)
    psi = WaveFunction(xgrid, amp, Psi.time)
    n2 = psi.norm_squared()
    if not n2 >= NULL_SLICE_NORM:
        raise NullSlice(f"conditional wave function has norm^2 {n2:.3g} at Y={list(np.ravel(Y))}")
    return normalize(psi)


# --- branch structure of the environment marginal ---------------------------


@dataclass(frozen=True, eq=False)
class BranchMap:
    """Connected components of the thresholded environment marginal."""

    ygrid: Grid
    marginal: np.ndarray  # y-marginal density of |Psi|^2 / ||Psi||^2
    labels: np.ndarray  # 0 = below threshold, 1..n components
    weights: np.ndarray  # weights[i] = mass of component i+1

    @property
    def count(self) -> int:
        return int(self.weights.size)

    def label_of(self, Y: np.ndarray) -> np.ndarray:
        """Component label (0 = none) of each environment point in ``Y`` (M, dy)."""
        cells = self.ygrid.cell_index(np.atleast_2d(Y))
        return self.labels.ravel()[cells]

    def cells(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels.ravel() == label)


def _merge_periodic(labels: np.ndarray, grid: Grid) -> np.ndarray:
    parent = np.arange(labels.max() + 1)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for k, ax in enumerate(grid.axes):
        if not ax.periodic:
            continue
        first = np.take(labels, 0, axis=k).ravel()
        last = np.take(labels, -1, axis=k).ravel()
        for a, b in zip(first, last):
            if a and b:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(parent.size)])
    _, relabel = np.unique(roots, return_inverse=True)
    return relabel[labels]


def branch_map(Psi: WaveFunction, split: SubsystemSplit, support_eps: float = 1e-10) -> BranchMap:
    rho = density(Psi)
    ym = marginal(Density(Psi.grid, rho.values / rho.total()), split.y_axes)
    ygrid = ym.grid
    labels, n = ndimage.label(ym.values > support_eps)
    if n:
        labels = _merge_periodic(labels, ygrid)
        n = int(labels.max())
    weights = ndimage.sum(ym.values, labels, index=np.arange(1, n + 1)) * ygrid.cell_volume
    return BranchMap(ygrid, ym.values, labels, np.atleast_1d(np.asarray(weights, dtype=float)))


def _support_gap(bm: BranchMap, label: int) -> float:
    comp = bm.labels == label
    ring = comp.copy()
    for k, ax in enumerate(bm.ygrid.axes):
        if ax.periodic:
            ring |= np.roll(comp, 1, axis=k) | np.roll(comp, -1, axis=k)
        else:
            ring |= ndimage.binary_dilation(comp, structure=_axis_structure(comp.ndim, k))
    ring &= ~comp
    return float(bm.marginal[ring].max()) if ring.any() else 0.0


def _axis_structure(ndim: int, axis: int) -> np.ndarray:
    s = np.zeros((3,) * ndim, bool)
    center = [1] * ndim
    for off in (0, 1, 2):
        center[axis] = off
        s[tuple(center)] = True
    return s


def _aligned_average(slices: list[np.ndarray]) -> np.ndarray:
    ref = slices[0] / np.linalg.norm(slices[0])
    acc = np.zeros_like(ref)
    for s in slices:
        s = s / np.linalg.norm(s)
        ov = np.vdot(ref, s)
        acc += s * (np.conj(ov) / abs(ov) if abs(ov) > 0 else 1.0)
    return acc


def component_wavefunction(Psi: WaveFunction, split: SubsystemSplit, bm: BranchMap, label: int,
                           n_probe: int = 8, probe_floor: float = 1e-3,
                           flat_x: np.ndarray | None = None) -> tuple[WaveFunction, list[np.ndarray]]:
    """Phase-aligned average of slices at evenly spaced bulk cells of one component."""
    flat_x = _x_first(Psi, split) if flat_x is None else flat_x
    cells = bm.cells(label)
    m = bm.marginal.ravel()[cells]
    bulk = cells[m >= probe_floor * m.max()]
    pick = bulk[np.unique(np.linspace(0, bulk.size - 1, min(n_probe, bulk.size)).round().astype(int))]
    slices = [flat_x[:, c] for c in pick]
    xgrid = Psi.grid.subgrid(split.x_axes)
    avg = _aligned_average(slices)
    return normalize(WaveFunction(xgrid, avg.reshape(xgrid.shape), Psi.time)), slices


def detect_effective_wavefunction(Psi: WaveFunction, split: SubsystemSplit, Y: np.ndarray,
                                  support_eps: float = 1e-10, fidelity_delta: float = 1e-6,
                                  n_probe: int = 8, bm: BranchMap | None = None) -> EffectiveWfReport:
    """Decide whether the x-system has an effective wave function given environment ``Y``.

    ``psi`` is the averaged bulk slice of the component (``effective``), or the
    conditional wave function at ``Y`` otherwise.
    """
    try:
        cond = conditional_wavefunction(Psi, split, Y)
    except NullSlice:
        return EffectiveWfReport("undefined", None, 0.0, float("nan"), -1)
    bm = branch_map(Psi, split, support_eps) if bm is None else bm
    label = int(bm.label_of(np.asarray(Y, float).reshape(1, -1))[0])
    if label == 0:
        return EffectiveWfReport("conditional_only", cond, 0.0, float("nan"), -1)
    flat_x = _x_first(Psi, split)
    psi, slices = component_wavefunction(Psi, split, bm, label, n_probe, flat_x=flat_x)
    vecs = [s / np.linalg.norm(s) for s in slices] + [cond.amplitudes.ravel() / np.linalg.norm(cond.amplitudes)]
    fmin = 1.0
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            fmin = min(fmin, abs(np.vdot(vecs[i], vecs[j])) ** 2)
    weight = float(np.clip(bm.weights[label - 1], 0.0, 1.0))
    gap = _support_gap(bm, label)
    if fmin >= 1.0 - fidelity_delta:
        return EffectiveWfReport("effective", psi, weight, gap, label, fmin)
    return EffectiveWfReport("conditional_only", cond, weight, gap, label, fmin)


def product_compose(parts: Sequence[WaveFunction],
                    axis_groups: Sequence[Sequence[int]] | None = None) -> WaveFunction:
    """Normalized tensor product of wave functions on disjoint axis groups.

    ``axis_groups[i]`` names the target axes of ``parts[i]``; by default parts
    occupy consecutive axes in order.
    """
    parts = list(parts)
    if axis_groups is None:
        axis_groups, k = [], 0
        for p in parts:
            axis_groups.append(list(range(k, k + p.grid.ndim)))
            k += p.grid.ndim
    groups = [list(g) for g in axis_groups]
    flat = [k for g in groups for k in g]
    if len(set(flat)) != len(flat):
        raise AxisOverlap(f"axis groups {groups} overlap")
    if sorted(flat) != list(range(len(flat))):
        raise ValueError(f"axis groups {groups} do not tile a grid")
    for p, g in zip(parts, groups):
        if p.grid.ndim != len(g):
            raise ValueError("axis group size does not match part dimension")
    axes = [None] * len(flat)
    for p, g in zip(parts, groups):
        for ax, k in zip(p.grid.axes, g):
            axes[k] = ax
    grid = Grid(tuple(axes))
    amp = np.ones(grid.shape, dtype=complex)
    for p, g in zip(parts, groups):
        order = np.argsort(g)
        a = np.transpose(p.amplitudes, order)
        shape = [1] * grid.ndim
        for k in sorted(g):
            shape[k] = grid.axes[k].points
        amp = amp * a.reshape(shape)
    return normalize(WaveFunction(grid, amp, parts[0].time))


def _raw_velocity(a: np.ndarray, g: np.ndarray, mass: float, hbar: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return hbar / mass * np.imag(np.conj(a) * g) / np.abs(a) ** 2


def conditional_velocity_consistency(Psi: WaveFunction, H: Hamiltonian, split: SubsystemSplit,
                                     Y: np.ndarray, rel_epsilon: float = 1e-12) -> float:
    """max |x-velocity of Psi at (x, Y) - velocity of the conditional wave function at x|.

    Evaluated on x-cells where the conditional density is at least
    ``rel_epsilon`` times its maximum.
    """
    cond = conditional_wavefunction(Psi, split, Y)
    xgrid = cond.grid
    a_c = cond.amplitudes
    g_c = gradient(a_c, xgrid)
    grads_full = gradient(Psi.amplitudes, Psi.grid)
    a_full = slice_amplitudes(Psi, split, Y).reshape(xgrid.shape)
    rho = np.abs(a_c) ** 2
    ok = rho >= rel_epsilon * rho.max()
    worst = 0.0
    for j, k in enumerate(split.x_axes):
        m = H.masses[k]
        g_full = slice_amplitudes(Psi.replace(grads_full[k]), split, Y).reshape(xgrid.shape)
        v_full = _raw_velocity(a_full, g_full, m, H.hbar)
        v_cond = _raw_velocity(a_c, g_c[j], m, H.hbar)
        worst = max(worst, float(np.max(np.abs(v_full - v_cond)[ok])))
    return worst


def effective_potential(V: np.ndarray, grid: Grid, split: SubsystemSplit, Y: np.ndarray) -> np.ndarray:
    """V(x, Y) on the x-grid, interpolated in the environment coordinates."""
    tmp = WaveFunction(grid, V.astype(complex))
    return slice_amplitudes(tmp, split, Y).real.reshape(grid.subgrid(split.x_axes).shape)
