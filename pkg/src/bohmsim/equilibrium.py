"""Quantum-equilibrium sampling, empirical distributions and statistical tests."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import BinningMismatch, NotNormalized, NullSlice, OutOfDomain
from .grid import Density, Grid, WaveFunction, density, normalized_density
from .guidance import DEFAULT_REG, EnsembleState, Regularization, integrate
from .propagator import Hamiltonian, PropagatorConfig, iter_evolve
from .subsystem import SubsystemSplit, batch_slices, conditional_wavefunction


class AliasTable:
    """Vose's alias method over a finite set of nonnegative weights."""

    def __init__(self, weights: np.ndarray):
        w = np.asarray(weights, dtype=float).ravel()
        if w.size == 0 or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("alias table needs nonnegative weights with positive sum")
        n = w.size
        scaled = w * (n / w.sum())
        prob = np.ones(n)
        alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            if scaled[g] < 1.0:
                small.append(g)
            else:
                large.append(g)
        # leftovers are 1 up to round-off
        for i in small + large:
            prob[i] = 1.0
        self.prob = prob
        self.alias = alias

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        n = self.prob.size
        col = rng.integers(0, n, size=size)
        coin = rng.random(size)
        return np.where(coin < self.prob[col], col, self.alias[col])


@dataclass(frozen=True, eq=False)
class SampleSet:
    points: np.ndarray  # (M, D)
    time: float = 0.0
    provenance: str = ""

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("sample set is empty")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class TestSpec:
    """Statistical test description.

    ``kind`` is ``ks`` (1D only), ``chi_square`` or ``coarse_grain_sup``. When
    ``functions`` is None the family defaults to indicators of ``n_bins``
    equal-mass groups of cells of the reference density.
    """

    __test__ = False

    kind: str = "ks"
    functions: tuple | None = None
    epsilon: float | None = None
    alpha_level: float = 0.01
    n_bins: int = 16

    def __post_init__(self):
        if self.kind not in ("ks", "chi_square", "coarse_grain_sup"):
            raise ValueError(f"unknown test kind {self.kind!r}")
        if not 0.0 < self.alpha_level < 1.0:
            raise ValueError("alpha_level must lie in (0, 1)")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class TestReport:
    __test__ = False

    statistic: float
    threshold: float
    passed: bool
    delta: float
    sample_size: int
    test: str = ""
    details: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "statistic", float(self.statistic))
        object.__setattr__(self, "threshold", float(self.threshold))
        object.__setattr__(self, "passed", bool(self.passed))
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "sample_size", int(self.sample_size))


def _is_normalized(rho: Density) -> bool:
    return rho.normalized or abs(rho.total() - 1.0) <= 1e-9


def sample(rho: Density, M: int, seed: int) -> SampleSet:
    """M independent draws from ``rho``: alias-method cell choice, uniform jitter inside the cell."""
    if not _is_normalized(rho):
        raise NotNormalized(f"density integrates to {rho.total()}, not 1")
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(seed)
    table = AliasTable(rho.cell_masses())
    cells = table.draw(rng, M)
    grid = rho.grid
    centers = grid.cell_centers(cells)
    jitter = rng.random((M, grid.ndim)) - 0.5
    pts = grid.fold(centers + jitter * np.asarray(grid.spacings))
    return SampleSet(pts, 0.0, f"density sample M={M} seed={seed}")


def empirical_distribution(s: SampleSet, bins: Grid) -> Density:
    pts = s.points
    if pts.shape[1] != bins.ndim:
        raise BinningMismatch(f"{pts.shape[1]}-dimensional samples, {bins.ndim}-dimensional bins")
    for k, ax in enumerate(bins.axes):
        if not np.all(ax.contains(pts[:, k])):
            raise OutOfDomain(f"samples outside the bin domain on axis {k}")
    counts = np.bincount(bins.cell_index(pts), minlength=bins.size).reshape(bins.shape)
    return Density(bins, counts / (s.size * bins.cell_volume), normalized=True)


def equal_mass_groups(rho: Density, n: int) -> list[np.ndarray]:
    """Indicator masks of ~equal-mass groups of consecutive (row-major) cells."""
    mass = rho.cell_masses().ravel()
    cum = np.cumsum(mass) / mass.sum()
    label = np.minimum((cum * n - 1e-12).astype(int), n - 1)
    label = np.maximum(label, 0)
    groups = []
    for g in range(n):
        m = label == g
        if np.any(m):
            groups.append(m.reshape(rho.grid.shape))
    return groups


def agreement_norm(rho_emp: Density, rho_qe: Density, spec: TestSpec) -> float:
    """sup over the test family of |integral (rho_emp - rho_qe) f|."""
    if rho_emp.grid != rho_qe.grid:
        raise BinningMismatch("empirical and reference densities use different binnings")
    funcs = spec.functions if spec.functions is not None else equal_mass_groups(rho_qe, spec.n_bins)
    diff = (rho_emp.values - rho_qe.values) * rho_qe.grid.cell_volume
    return float(max(abs(np.sum(diff * np.asarray(f, dtype=float))) for f in funcs))


def _cell_edges(ax) -> tuple[np.ndarray, float]:
    """Cell edges of a 1D axis and the offset that maps samples onto them."""
    dx = ax.spacing
    edges = np.concatenate([ax.nodes - 0.5 * dx, [ax.nodes[-1] + 0.5 * dx]])
    return edges, dx


def cdf_function(rho: Density):
    """Piecewise-linear CDF of a 1D cell-constant density."""
    if rho.grid.ndim != 1:
        raise ValueError("CDF requires a 1D density")
    ax = rho.grid.axes[0]
    edges, _ = _cell_edges(ax)
    cum = np.concatenate([[0.0], np.cumsum(rho.cell_masses())])
    cum = cum / cum[-1]

    def cdf(x):
        x = np.asarray(x, dtype=float)
        if ax.periodic:
            x = np.where(x >= edges[-1], x - ax.length, x)
        return np.interp(x, edges, cum)

    return cdf


def ks_statistic(x: np.ndarray, rho: Density) -> float:
    return float(stats.kstest(np.asarray(x, dtype=float).ravel(), cdf_function(rho)).statistic)


def ks_critical(M: int, alpha: float) -> float:
    return float(stats.kstwo.ppf(1.0 - alpha, M))


def _group_counts(points: np.ndarray, grid: Grid, groups: Sequence[np.ndarray]) -> np.ndarray:
    cells = grid.cell_index(points)
    return np.array([np.count_nonzero(np.asarray(g).ravel()[cells]) for g in groups], dtype=float)


def run_test(s: SampleSet, rho_qe: Density, spec: TestSpec = TestSpec()) -> TestReport:
    """Test the hypothesis that ``s`` was drawn from ``rho_qe``."""
    M = s.size
    alpha = spec.alpha_level
    if spec.kind == "ks":
        stat = ks_statistic(s.points[:, 0], rho_qe)
        thr = ks_critical(M, alpha)
        return TestReport(stat, thr, stat <= thr, alpha, M, "ks")
    groups = list(spec.functions) if spec.functions is not None else equal_mass_groups(rho_qe, spec.n_bins)
    if spec.kind == "chi_square":
        p = np.array([np.sum(rho_qe.cell_masses() * np.asarray(g, float)) for g in groups])
        p = p / p.sum()
        obs = _group_counts(s.points, rho_qe.grid, groups)
        exp = M * p
        stat = float(np.sum((obs - exp) ** 2 / exp))
        thr = float(stats.chi2.ppf(1.0 - alpha, len(groups) - 1))
        return TestReport(stat, thr, stat <= thr, alpha, M, "chi_square")
    emp = empirical_distribution(s, rho_qe.grid)
    stat = agreement_norm(emp, rho_qe, TestSpec("coarse_grain_sup", tuple(groups)))
    G = len(groups)
    eps = spec.epsilon if spec.epsilon is not None else float(np.sqrt(np.log(2 * G / alpha) / (2 * M)))
    delta = float(min(1.0, 2 * G * np.exp(-2 * M * eps**2)))
    return TestReport(stat, eps, stat <= eps, delta, M, "coarse_grain_sup")


def candidate_density(psi: WaveFunction, power: str = "psi2") -> Density:
    """Normalized |psi|^2 or |psi|^4."""
    rho = np.abs(psi.amplitudes) ** 2
    if power == "psi4":
        rho = rho**2
    elif power != "psi2":
        raise ValueError(f"unknown candidate density {power!r}")
    return normalized_density(rho, psi.grid)


def equivariance_check(psi0: WaveFunction, H: Hamiltonian, cfg: PropagatorConfig, M: int, t: float,
                       velocity_scale: float = 1.0, candidate: str = "psi2", seed: int = 0,
                       spec: TestSpec | None = None, reg: Regularization = DEFAULT_REG,
                       workers: int = 1) -> TestReport:
    """Transport a candidate-density ensemble and test it against the candidate at time t.

    Only the |psi|^2 ensemble under the unscaled guiding field is expected to pass.
    Members that touched a regularized cell are excluded and counted in ``details``.
    """
    s0 = sample(candidate_density(psi0, candidate), M, seed)
    e0 = EnsembleState(s0.points, psi0.time, seed)
    final, _ = integrate(e0, iter_evolve(psi0, H, cfg, t), H, reg,
                         velocity_scale=velocity_scale, workers=workers)
    keep = ~final.capped
    target = candidate_density(final.wavefunction, candidate)
    if spec is None:
        spec = TestSpec("ks") if psi0.grid.ndim == 1 else TestSpec("chi_square")
    rep = run_test(SampleSet(final.configs[keep], final.time), target, spec)
    details = dict(rep.details, excluded=int((~keep).sum()), velocity_scale=velocity_scale,
                   candidate=candidate, t=final.time)
    return TestReport(rep.statistic, rep.threshold, rep.passed, rep.delta, rep.sample_size,
                      f"equivariance[{candidate},scale={velocity_scale:g}]", details)


def _bin_edges(grid: Grid, y_axes: Sequence[int], n_bins: int | Sequence[int]) -> list[np.ndarray]:
    counts = [n_bins] * len(y_axes) if np.isscalar(n_bins) else list(n_bins)
    edges = []
    for k, n in zip(y_axes, counts):
        ax = grid.axes[k]
        edges.append(np.linspace(ax.lo, ax.hi, int(n) + 1))
    return edges


def conditional_x_density(Psi: WaveFunction, split: SubsystemSplit, Y: np.ndarray) -> Density:
    return density(conditional_wavefunction(Psi, split, Y))


def conditional_pit(Psi: WaveFunction, split: SubsystemSplit, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Probability-integral transform of each X under |conditional wf at its own Y|^2.

    For a one-dimensional x-system; under the conditional probability formula
    the returned values are independent and uniform on [0, 1].
    """
    if len(split.x_axes) != 1:
        raise ValueError("conditional PIT needs a one-dimensional x-system")
    ax = Psi.grid.axes[split.x_axes[0]]
    S = batch_slices(Psi, split, Y)
    mass = np.abs(S) ** 2
    tot = mass.sum(axis=0)
    if np.any(tot * ax.spacing < 1e-14):
        raise NullSlice("conditional wave function vanishes at some environment points")
    cum = np.vstack([np.zeros((1, mass.shape[1])), np.cumsum(mass, axis=0)]) / tot
    x = np.asarray(X, dtype=float).ravel()
    edges, dx = _cell_edges(ax)
    if ax.periodic:
        x = np.where(x >= edges[-1], x - ax.length, x)
    f = np.clip((x - edges[0]) / dx, 0.0, ax.points - 1e-12)
    j = np.floor(f).astype(np.int64)
    cols = np.arange(x.size)
    return cum[j, cols] + (f - j) * (cum[j + 1, cols] - cum[j, cols])


def conditional_probability_check(snapshots: Iterable[WaveFunction], H: Hamiltonian,
                                  split: SubsystemSplit, M: int, y_bins: int | Sequence[int],
                                  seed: int, min_count: int = 50, alpha: float = 0.01,
                                  reg: Regularization = DEFAULT_REG, workers: int = 1,
                                  ) -> list[TestReport]:
    """Evolve a |Psi_0|^2 ensemble, bin it by environment configuration and test X in each bin.

    Each populated bin is tested (KS) against |psi|^2 of the conditional wave
    function at the bin's center. The pooled test maps every member through the
    CDF of its own conditional wave function (probability-integral transform)
    and tests the pooled values for uniformity, so it carries no binning bias.
    Bins with fewer than ``min_count`` members are excluded and reported in the
    pooled details.
    """
    snaps = iter(snapshots)
    Psi0 = next(snaps)
    s0 = sample(density(Psi0), M, seed)
    e0 = EnsembleState(s0.points, Psi0.time, seed)

    def chained():
        yield Psi0
        yield from snaps

    final, _ = integrate(e0, chained(), H, reg, workers=workers)
    Psi = final.wavefunction
    grid = Psi.grid
    if len(split.x_axes) != 1:
        raise ValueError("conditional_probability_check tests a one-dimensional x-system")
    X = final.configs[:, split.x_axes[0]]
    Y = final.configs[:, list(split.y_axes)]
    edges = _bin_edges(grid, split.y_axes, y_bins)
    idx = [np.clip(np.searchsorted(e, Y[:, j], side="right") - 1, 0, len(e) - 2)
           for j, e in enumerate(edges)]
    shape = tuple(len(e) - 1 for e in edges)
    flat = np.ravel_multi_index(tuple(idx), shape)
    keep = ~final.capped
    reports, pooled_u = [], []
    excluded_bins = excluded_members = 0
    for b in range(int(np.prod(shape))):
        members = np.flatnonzero((flat == b) & keep)
        if members.size == 0:
            continue
        if members.size < min_count:
            excluded_bins += 1
            excluded_members += members.size
            continue
        multi = np.unravel_index(b, shape)
        center = np.array([0.5 * (edges[j][i] + edges[j][i + 1]) for j, i in enumerate(multi)])
        rho_x = conditional_x_density(Psi, split, center)
        rep = run_test(SampleSet(X[members][:, None], final.time), rho_x, TestSpec("ks", alpha_level=alpha))
        width = [float(e[1] - e[0]) for e in edges]
        reports.append(TestReport(rep.statistic, rep.threshold, rep.passed, rep.delta, rep.sample_size,
                                  f"bin{list(int(i) for i in multi)}",
                                  {"y_center": center.tolist(), "bin_width": width}))
        pooled_u.append(conditional_pit(Psi, split, X[members], Y[members]))
    u = np.concatenate(pooled_u) if pooled_u else np.array([])
    if u.size:
        stat = float(stats.kstest(u, "uniform").statistic)
        thr = ks_critical(u.size, alpha)
        passed = stat <= thr
    else:
        stat, thr, passed = float("nan"), float("nan"), False
    reports.append(TestReport(stat, thr, passed, alpha, int(u.size), "pooled", {
        "coverage": float(u.size / M), "excluded_bins": excluded_bins,
        "excluded_members": excluded_members, "capped": int((~keep).sum()),
    }))
    return reports


def continuity_residual(prev: WaveFunction, mid: WaveFunction, nxt: WaveFunction,
                        H: Hamiltonian) -> float:
    """sup |d rho/dt + div J| at the middle snapshot, centered differences in time."""
    from .guidance import gradient, probability_current

    dt = nxt.time - prev.time
    drho = (np.abs(nxt.amplitudes) ** 2 - np.abs(prev.amplitudes) ** 2) / dt
    J = probability_current(mid, H)
    div = sum(gradient(J[k].astype(complex), mid.grid)[k].real for k in range(mid.grid.ndim))
    return float(np.max(np.abs(drho + div)))


REPORT_HEADER = ["scenario", "test", "statistic", "threshold", "passed", "delta", "M", "seed"]


def report_row(scenario: str, rep: TestReport, seed: int) -> list[str]:
    return [scenario, rep.test, f"{rep.statistic:.17g}", f"{rep.threshold:.17g}",
            "true" if rep.passed else "false", f"{rep.delta:.17g}", str(rep.sample_size), str(seed)]


def write_reports_csv(path: str | Path, rows: Iterable[tuple[str, TestReport, int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for scenario, rep, seed in rows:
            w.writerow(report_row(scenario, rep, seed))
