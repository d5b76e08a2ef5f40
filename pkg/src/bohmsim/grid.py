"""Rectangular configuration-space grids, wave functions and densities.

Axis conventions
----------------
``periodic`` axes hold ``points`` nodes ``min + j*dx`` with ``dx = (max-min)/points``;
``max`` is identified with ``min``.

``box`` axes hold ``points`` interior nodes ``min + (j+1)*dx`` with
``dx = (max-min)/(points+1)``; the wave function vanishes on the walls at ``min``
and ``max``.

Every node owns the cell ``[x_j - dx/2, x_j + dx/2]``. Densities are piecewise
constant over cells, which is also how ``equilibrium.sample`` jitters its draws.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import EmptyAxisSet, GridMismatch, ZeroNorm

MAX_DIM = 4
BOUNDARIES = ("periodic", "box")


@dataclass(frozen=True)
class AxisSpec:
    points: int
    min: float
    max: float
    boundary: str = "periodic"

    def __post_init__(self):
        if int(self.points) != self.points or self.points < 2:
            raise ValueError(f"axis needs at least 2 points, got {self.points}")
        if not self.max > self.min:
            raise ValueError(f"axis max ({self.max}) must exceed min ({self.min})")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary {self.boundary!r}")
        object.__setattr__(self, "points", int(self.points))
        object.__setattr__(self, "min", float(self.min))
        object.__setattr__(self, "max", float(self.max))

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    @property
    def length(self) -> float:
        return self.max - self.min

    @property
    def spacing(self) -> float:
        if self.periodic:
            return self.length / self.points
        return self.length / (self.points + 1)

    @property
    def nodes(self) -> np.ndarray:
        j = np.arange(self.points, dtype=float)
        if self.periodic:
            return self.min + j * self.spacing
        return self.min + (j + 1.0) * self.spacing

    @property
    def lo(self) -> float:
        """Lower edge of the union of cells (periodic: the wrap point)."""
        return self.min if self.periodic else self.min + 0.5 * self.spacing

    @property
    def hi(self) -> float:
        return self.max if self.periodic else self.max - 0.5 * self.spacing

    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.points, d=self.spacing)

    def fractional_index(self, x: np.ndarray) -> np.ndarray:
        """Position measured in node units (node j sits at index j)."""
        if self.periodic:
            return (np.asarray(x, dtype=float) - self.min) / self.spacing
        return (np.asarray(x, dtype=float) - self.min) / self.spacing - 1.0

    def nearest_index(self, x: np.ndarray) -> np.ndarray:
        idx = np.floor(self.fractional_index(x) + 0.5).astype(np.int64)
        if self.periodic:
            return np.mod(idx, self.points)
        return np.clip(idx, 0, self.points - 1)

    def fold(self, x: np.ndarray) -> np.ndarray:
        """Map coordinates back into the axis domain (wrap or reflect)."""
        x = np.asarray(x, dtype=float)
        # points already inside are returned bit-for-bit unchanged
        if self.periodic:
            inside = (x >= self.min) & (x < self.max)
            return np.where(inside, x, self.min + np.mod(x - self.min, self.length))
        lo, hi = self.lo, self.hi
        span = hi - lo
        y = np.mod(x - lo, 2.0 * span)
        y = np.where(y > span, 2.0 * span - y, y)
        return np.where((x >= lo) & (x <= hi), x, lo + y)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.periodic:
            return np.isfinite(x)
        return (x >= self.lo) & (x <= self.hi)


@dataclass(frozen=True)
class Grid:
    axes: tuple[AxisSpec, ...]

    def __post_init__(self):
        axes = tuple(self.axes)
        if not axes:
            raise ValueError("grid needs at least one axis")
        if len(axes) > MAX_DIM:
            raise ValueError(f"grid dimension {len(axes)} exceeds the cap of {MAX_DIM}")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def from_specs(cls, specs: Iterable[dict | AxisSpec]) -> "Grid":
        return cls(tuple(s if isinstance(s, AxisSpec) else AxisSpec(**s) for s in specs))

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.points for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacings(self) -> tuple[float, ...]:
        return tuple(a.spacing for a in self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    @property
    def diameter(self) -> float:
        return float(np.sqrt(sum(a.length**2 for a in self.axes)))

    @property
    def all_periodic(self) -> bool:
        return all(a.periodic for a in self.axes)

    def coords(self, axis: int) -> np.ndarray:
        """Node coordinates of one axis, shaped to broadcast against the grid."""
        shape = [1] * self.ndim
        shape[axis] = self.axes[axis].points
        return self.axes[axis].nodes.reshape(shape)

    def mesh(self) -> list[np.ndarray]:
        return [self.coords(k) for k in range(self.ndim)]

    def subgrid(self, axes: Sequence[int]) -> "Grid":
        if len(axes) == 0:
            raise EmptyAxisSet("axis subset is empty")
        return Grid(tuple(self.axes[k] for k in axes))

    def cell_centers(self, flat_index: np.ndarray) -> np.ndarray:
        """(M, D) node coordinates for flat row-major cell indices."""
        multi = np.unravel_index(np.asarray(flat_index), self.shape)
        return np.stack([self.axes[k].nodes[multi[k]] for k in range(self.ndim)], axis=-1)

    def fold(self, points: np.ndarray) -> np.ndarray:
        points = np.array(points, dtype=float, copy=True)
        for k, ax in enumerate(self.axes):
            points[..., k] = ax.fold(points[..., k])
        return points

    def cell_index(self, points: np.ndarray) -> np.ndarray:
        """Flat index of the cell containing each configuration."""
        points = np.atleast_2d(points)
        idx = [self.axes[k].nearest_index(points[:, k]) for k in range(self.ndim)]
        return np.ravel_multi_index(tuple(idx), self.shape)


@dataclass(frozen=True, eq=False)
class WaveFunction:
    grid: Grid
    amplitudes: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=np.complex128)
        if amp.shape != self.grid.shape:
            raise GridMismatch(f"amplitudes shape {amp.shape} != grid shape {self.grid.shape}")
        if amp.flags.writeable:
            amp = amp.copy()
            amp.setflags(write=False)
        object.__setattr__(self, "amplitudes", amp)
        object.__setattr__(self, "time", float(self.time))

    def norm_squared(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.grid.cell_volume)

    def replace(self, amplitudes=None, time=None) -> "WaveFunction":
        return WaveFunction(
            self.grid,
            self.amplitudes if amplitudes is None else amplitudes,
            self.time if time is None else time,
        )

    def conj(self) -> "WaveFunction":
        return self.replace(np.conj(self.amplitudes))


@dataclass(frozen=True, eq=False)
class Density:
    grid: Grid
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise GridMismatch(f"values shape {vals.shape} != grid shape {self.grid.shape}")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("density values must be finite and nonnegative")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def total(self) -> float:
        return float(np.sum(self.values) * self.grid.cell_volume)

    def cell_masses(self) -> np.ndarray:
        return self.values * self.grid.cell_volume


def normalize(psi: WaveFunction) -> WaveFunction:
    n2 = psi.norm_squared()
    if not np.isfinite(n2) or n2 <= 0.0:
        raise ZeroNorm(f"cannot normalize wave function with norm^2 = {n2}")
    return psi.replace(psi.amplitudes / np.sqrt(n2))


def density(psi: WaveFunction) -> Density:
    vals = np.abs(psi.amplitudes) ** 2
    total = vals.sum() * psi.grid.cell_volume
    return Density(psi.grid, vals, normalized=bool(abs(total - 1.0) <= 1e-12))


def normalized_density(values: np.ndarray, grid: Grid) -> Density:
    values = np.asarray(values, dtype=float)
    total = values.sum() * grid.cell_volume
    if not np.isfinite(total) or total <= 0:
        raise ZeroNorm("density has no mass")
    return Density(grid, values / total, normalized=True)


def marginal(rho: Density, keep_axes: Sequence[int]) -> Density:
    keep = sorted(set(int(k) for k in keep_axes))
    if not keep:
        raise EmptyAxisSet("marginal needs at least one axis to keep")
    if keep[0] < 0 or keep[-1] >= rho.grid.ndim:
        raise ValueError(f"axis subset {keep} outside grid of dimension {rho.grid.ndim}")
    drop = tuple(k for k in range(rho.grid.ndim) if k not in keep)
    if not drop:
        return rho
    dv_drop = float(np.prod([rho.grid.axes[k].spacing for k in drop]))
    vals = rho.values.sum(axis=drop) * dv_drop
    return Density(rho.grid.subgrid(keep), vals, normalized=rho.normalized)


def inner_product(psi: WaveFunction, phi: WaveFunction) -> complex:
    if psi.grid != phi.grid:
        raise GridMismatch("inner product of wave functions on different grids")
    return complex(np.vdot(psi.amplitudes, phi.amplitudes) * psi.grid.cell_volume)


def fidelity(psi: WaveFunction, phi: WaveFunction) -> float:
    """|<psi|phi>|^2 / (<psi|psi><phi|phi>), in [0, 1]."""
    ov = inner_product(psi, phi)
    return float(abs(ov) ** 2 / (psi.norm_squared() * phi.norm_squared()))


# ---------------------------------------------------------------------------
# Binary snapshot format
#
#   b"BSIM1"                      magic, 5 bytes
#   uint32 D
#   D x {uint64 points, float64 min, float64 max, uint8 boundary (0 periodic, 1 box)}
#   float64 time
#   prod(points) x {float64 re, float64 im}, row-major
#
# All little-endian.

MAGIC = b"BSIM1"
_AXIS = struct.Struct("<QddB")


def dump_wavefunction(psi: WaveFunction, target: str | Path | BinaryIO) -> None:
    if isinstance(target, (str, Path)):
        with open(target, "wb") as fh:
            dump_wavefunction(psi, fh)
        return
    target.write(MAGIC)
    target.write(struct.pack("<I", psi.grid.ndim))
    for ax in psi.grid.axes:
        target.write(_AXIS.pack(ax.points, ax.min, ax.max, BOUNDARIES.index(ax.boundary)))
    target.write(struct.pack("<d", psi.time))
    target.write(np.ascontiguousarray(psi.amplitudes, dtype="<c16").tobytes())


def load_wavefunction(source: str | Path | BinaryIO) -> WaveFunction:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return load_wavefunction(fh)
    if source.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a BSIM1 snapshot")
    (ndim,) = struct.unpack("<I", source.read(4))
    axes = []
    for _ in range(ndim):
        points, lo, hi, bnd = _AXIS.unpack(source.read(_AXIS.size))
        axes.append(AxisSpec(points, lo, hi, BOUNDARIES[bnd]))
    grid = Grid(tuple(axes))
    (time,) = struct.unpack("<d", source.read(8))
    raw = source.read(grid.size * 16)
    if len(raw) != grid.size * 16:
        raise ValueError("truncated BSIM1 snapshot")
    amp = np.frombuffer(raw, dtype="<c16").reshape(grid.shape).astype(np.complex128)
    return WaveFunction(grid, amp, time)
