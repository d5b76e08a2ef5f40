"""Random systems, sequential experiments and selection invariance.

A run is one member of an ensemble sampled from |Psi_0|^2. Every run shares the
universal wave function, so a whole plan costs one propagation plus one
ensemble integration; what differs between runs is the actual configuration
and therefore *when* and *whether* each rule fires.

A rule's trigger sees only the environment coordinates of its own split (and
the clock), never the system coordinates it is about to examine.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .equilibrium import (SampleSet, TestReport, TestSpec, cdf_function, conditional_pit, ks_critical,
                          run_test, sample)
from .errors import EmptySelection, InsufficientRuns, PreparationFailed
from .grid import WaveFunction, density
from .guidance import DEFAULT_REG, EnsembleState, Regularization, iter_integrate
from .propagator import Hamiltonian, PropagatorConfig, iter_evolve
from .subsystem import SubsystemSplit, batch_slices, branch_map

log = logging.getLogger(__name__)

PREPARATION_FIDELITY = 1.0 - 1e-4


class Trigger:
    """Decides, at each snapshot, which runs fire. Receives only (t, Y, spacing)."""

    earliest: float = 0.0

    def __call__(self, t: float, Y: np.ndarray, spacing: float) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class AtTime(Trigger):
    """Deterministic trigger: fires at the first snapshot with t >= time."""

    time: float

    @property
    def earliest(self) -> float:
        return self.time

    def __call__(self, t, Y, spacing):
        return np.full(Y.shape[0], t >= self.time - 1e-9 * max(spacing, 1.0))


@dataclass(frozen=True)
class EarlyIfFavorable(Trigger):
    """Fires at ``early`` when ``sign * Y[:, coord] > 0`` there, otherwise at ``late``.

    The happy experimenter reads the register at ``early`` and proceeds; the
    depressed one waits until ``late``.
    """

    early: float
    late: float
    coord: int
    sign: float = 1.0

    @property
    def earliest(self) -> float:
        return self.early

    def __call__(self, t, Y, spacing):
        at_early = abs(t - self.early) < 0.5 * spacing
        favorable = self.sign * Y[:, self.coord] > 0.0
        return (at_early & favorable) | (t >= self.late - 1e-9 * max(spacing, 1.0))


@dataclass(frozen=True, eq=False)
class RandomSystemRule:
    """One experiment: a subsystem, a trigger and the state it is supposed to be prepared in.

    ``prepared`` is the (nonrandom) wave function on the x-grid the system has
    whenever the rule fires. ``outcome`` maps X (M, dx) to Z; default is the
    first system coordinate.
    """

    label: str
    split: SubsystemSplit
    trigger: Trigger
    prepared: WaveFunction
    outcome: Callable[[np.ndarray], np.ndarray] | None = None
    register_axis: int | None = None

    def z(self, X: np.ndarray) -> np.ndarray:
        return X[:, 0] if self.outcome is None else np.asarray(self.outcome(X), dtype=float)


@dataclass(frozen=True, eq=False)
class Probe:
    """Fidelity of a split's conditional wave function with ``target`` at a fixed time, per run.

    Probes are diagnostics; they never influence a rule.
    """

    label: str
    time: float
    split: SubsystemSplit
    target: WaveFunction


@dataclass(frozen=True, eq=False)
class ExperimentPlan:
    rules: tuple[RandomSystemRule, ...]
    probes: tuple[Probe, ...] = ()
    horizon: float | None = None
    strict: bool = False  # raise PreparationFailed instead of flagging the run

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "probes", tuple(self.probes))
        if not self.rules and self.horizon is None:
            raise ValueError("a plan needs at least one rule or an explicit horizon")
        for r in self.rules:
            if r.register_axis is not None and r.register_axis in r.split.x_axes:
                raise ValueError(f"rule {r.label}: the register must be part of the environment")

    def end_time(self) -> float:
        if self.horizon is not None:
            return self.horizon
        last = 0.0
        for r in self.rules:
            last = max(last, getattr(r.trigger, "late", r.trigger.earliest))
        return max([last] + [p.time for p in self.probes])


@dataclass(frozen=True)
class OutcomeRecord:
    run_id: int
    rule: str
    trigger_time: float
    x: tuple[float, ...]
    z: float
    branch_id: int
    fidelity: float


@dataclass
class RuleOutcomes:
    label: str
    fired: np.ndarray  # (M,) bool
    time: np.ndarray  # (M,) trigger time, nan if not fired
    X: np.ndarray  # (M, dx)
    Z: np.ndarray  # (M,)
    branch: np.ndarray  # (M,) int
    fidelity: np.ndarray  # (M,)
    pit: np.ndarray  # (M,) CDF of |prepared|^2 at X (1D systems), nan otherwise


@dataclass(eq=False)
class PlanResult:
    plan: ExperimentPlan
    seed: int
    initial: np.ndarray  # (M, D) configurations at t = 0
    outcomes: list[RuleOutcomes]
    probes: dict[str, np.ndarray]
    capped: np.ndarray
    failed: np.ndarray  # (M,) any preparation failure
    final_time: float
    final_configs: np.ndarray | None = None
    final_state: WaveFunction | None = None

    @property
    def M(self) -> int:
        return self.initial.shape[0]

    @property
    def complete(self) -> np.ndarray:
        ok = ~self.capped & ~self.failed
        for o in self.outcomes:
            ok &= o.fired
        return ok

    def outcome(self, label: str) -> RuleOutcomes:
        for o in self.outcomes:
            if o.label == label:
                return o
        raise KeyError(label)

    def records(self) -> list[list[OutcomeRecord]]:
        """Per run, the records of every rule that fired, in firing order."""
        runs: list[list[OutcomeRecord]] = []
        for m in range(self.M):
            recs = []
            for o in self.outcomes:
                if o.fired[m]:
                    recs.append(OutcomeRecord(m, o.label, float(o.time[m]), tuple(float(v) for v in o.X[m]),
                                              float(o.Z[m]), int(o.branch[m]), float(o.fidelity[m])))
            runs.append(recs)
        return runs

    def accounting(self) -> dict:
        return {
            "runs": self.M,
            "complete": int(self.complete.sum()),
            "capped": int(self.capped.sum()),
            "preparation_failed": int(self.failed.sum()),
            "incomplete": int(sum((~o.fired).sum() for o in self.outcomes)),
        }


def _slice_fidelity(Psi: WaveFunction, split: SubsystemSplit, Y: np.ndarray, target: WaveFunction) -> np.ndarray:
    S = batch_slices(Psi, split, Y)
    t = target.amplitudes.ravel()
    t = t / np.linalg.norm(t)
    num = np.abs(np.conj(t) @ S) ** 2
    den = np.sum(np.abs(S) ** 2, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, 0.0)


def run_plan(Psi0: WaveFunction, H: Hamiltonian, cfg: PropagatorConfig, plan: ExperimentPlan, M: int,
             seed: int, reg: Regularization = DEFAULT_REG, workers: int = 1,
             support_eps: float = 1e-10) -> PlanResult:
    """Run ``M`` experiments, one per configuration drawn from |Psi0|^2.

    Rules fire in plan order within each run: rule i is only armed once rule
    i-1 has fired, so trigger times are nondecreasing. At each firing the
    conditional wave function at the run's environment is compared with the
    rule's prepared state; runs below the preparation fidelity are flagged and
    excluded from statistics (or raise with ``plan.strict``).
    """
    s0 = sample(density(Psi0), M, seed)
    e0 = EnsembleState(s0.points, Psi0.time, seed)
    n_rules = len(plan.rules)
    D = Psi0.grid.ndim
    outcomes = [RuleOutcomes(r.label, np.zeros(M, bool), np.full(M, np.nan),
                             np.full((M, len(r.split.x_axes)), np.nan), np.full(M, np.nan),
                             np.full(M, -1, np.int64), np.full(M, np.nan), np.full(M, np.nan))
                for r in plan.rules]
    cdfs = [cdf_function(density(r.prepared)) if r.prepared.grid.ndim == 1 else None for r in plan.rules]
    probes = {p.label: np.full(M, np.nan) for p in plan.probes}
    failed = np.zeros(M, bool)
    spacing = cfg.dt * cfg.steps_per_snapshot
    e = e0
    for e in iter_integrate(e0, iter_evolve(Psi0, H, cfg, plan.end_time()), H, reg, workers=workers):
        t = e.time
        Psi = e.wavefunction
        for i, rule in enumerate(plan.rules):
            out = outcomes[i]
            armed = ~out.fired if i == 0 else (~out.fired & outcomes[i - 1].fired)
            if not armed.any():
                continue
            ys = list(rule.split.y_axes)
            cand = np.flatnonzero(armed)
            fire = cand[np.asarray(rule.trigger(t, e.configs[cand][:, ys], spacing), bool)]
            if fire.size == 0:
                continue
            Y = e.configs[fire][:, ys]
            X = e.configs[fire][:, list(rule.split.x_axes)]
            fid = _slice_fidelity(Psi, rule.split, Y, rule.prepared)
            bm = branch_map(Psi, rule.split, support_eps)
            out.fired[fire] = True
            out.time[fire] = t
            out.X[fire] = X
            out.Z[fire] = rule.z(X)
            out.branch[fire] = bm.label_of(Y)
            out.fidelity[fire] = fid
            if cdfs[i] is not None:
                out.pit[fire] = cdfs[i](X[:, 0])
            bad = fire[fid < PREPARATION_FIDELITY]
            if bad.size:
                if plan.strict:
                    raise PreparationFailed(
                        f"rule {rule.label} at t={t:.6g}: {bad.size} runs below fidelity {PREPARATION_FIDELITY}")
                log.info("rule %s at t=%.6g: %d runs failed the preparation check", rule.label, t, bad.size)
                failed[bad] = True
        for p in plan.probes:
            if abs(t - p.time) < 0.5 * spacing:
                probes[p.label] = _slice_fidelity(Psi, p.split, e.configs[:, list(p.split.y_axes)], p.target)
    for o in outcomes:
        fired_times = o.time[o.fired]
        if fired_times.size and not np.all(np.isfinite(fired_times)):
            raise RuntimeError("internal error: fired rule without a time")
    for i in range(1, n_rules):
        both = outcomes[i].fired & outcomes[i - 1].fired
        if np.any(outcomes[i].time[both] < outcomes[i - 1].time[both]):
            raise RuntimeError("trigger times decreased within a run")
    return PlanResult(plan, seed, e0.configs, outcomes, probes, e.capped.copy(), failed, e.time,
                      e.configs, e.wavefunction)


# --- statistics ---------------------------------------------------------------


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


def _scores(u: np.ndarray) -> list[np.ndarray]:
    """Bounded score functions of a PIT value."""
    return [u - 0.5, (u > 0.5).astype(float), np.cos(2 * np.pi * u)]


def independence_report(result: PlanResult, pairing: Sequence[tuple[str, str]] | None = None,
                        mask: np.ndarray | None = None, alpha: float = 0.01, n_bins: int = 4,
                        min_runs: int = 500) -> list[TestReport]:
    """Marginal, correlation and joint chi-square tests over complete runs.

    ``mask`` restricts the analysis to a subset of runs (run filtering); the
    effective sample size of the subset is reported with every test.
    """
    if len(result.outcomes) < 2:
        raise InsufficientRuns("independence needs at least two rules")
    use = result.complete if mask is None else (result.complete & np.asarray(mask, bool))
    n = int(use.sum())
    if n < min_runs:
        raise InsufficientRuns(f"only {n} complete runs, need at least {min_runs}")
    reports = []
    by_label = {o.label: o for o in result.outcomes}
    rules = {r.label: r for r in result.plan.rules}
    for o in result.outcomes:
        rule = rules[o.label]
        if rule.prepared.grid.ndim == 1:
            spec = TestSpec("ks", alpha_level=alpha)
        else:
            spec = TestSpec("chi_square", alpha_level=alpha)
        rep = run_test(SampleSet(o.X[use], 0.0), density(rule.prepared), spec)
        reports.append(TestReport(rep.statistic, rep.threshold, rep.passed, rep.delta, n,
                                  f"marginal[{o.label}]", {"ess": n}))
    pairs = pairing if pairing is not None else [
        (a.label, b.label) for i, a in enumerate(result.outcomes) for b in result.outcomes[i + 1:]]
    thr = 4.0 / np.sqrt(n)
    for a, b in pairs:
        ua, ub = by_label[a].pit[use], by_label[b].pit[use]
        cmax = max(abs(_corr(sa, sb)) for sa in _scores(ua) for sb in _scores(ub))
        reports.append(TestReport(cmax, thr, cmax <= thr, float("nan"), n, f"correlation[{a},{b}]", {"ess": n}))
        ia = np.minimum((ua * n_bins).astype(int), n_bins - 1)
        ib = np.minimum((ub * n_bins).astype(int), n_bins - 1)
        table = np.zeros((n_bins, n_bins))
        np.add.at(table, (ia, ib), 1)
        expected = n / n_bins**2
        chi = float(np.sum((table - expected) ** 2 / expected))
        cthr = float(stats.chi2.ppf(1 - alpha, n_bins**2 - 1))
        reports.append(TestReport(chi, cthr, chi <= cthr, alpha, n, f"joint_chi_square[{a},{b}]",
                                  {"ess": n, "bins": n_bins}))
    return reports


def pre_trigger_event(result: PlanResult, axes: Sequence[int],
                      event: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Run mask for an environment event fixed before every trigger.

    The event sees the initial configuration restricted to ``axes``; these must
    be environment axes of every rule so the event is recorded before, and
    outside, every examined system.
    """
    axes = list(axes)
    for r in result.plan.rules:
        if set(axes) & set(r.split.x_axes):
            raise ValueError(f"axes {axes} overlap the system of rule {r.label}")
    return np.asarray(event(result.initial[:, axes]), bool)


def trigger_audit(result: PlanResult, early: str, late: str) -> TestReport:
    """Correlation between an early outcome and the later trigger time (diagnostic only).

    A nonzero value is not a failure: random systems may choose *when* to act
    from earlier records. It shows how strongly a later trigger depends on an
    earlier outcome.
    """
    a, b = result.outcome(early), result.outcome(late)
    use = result.complete
    n = int(use.sum())
    c = _corr(a.pit[use], b.time[use]) if n > 1 else float("nan")
    return TestReport(abs(c), float("nan"), True, float("nan"), n, f"trigger_audit[{early},{late}]")


def write_outcomes_csv(path: str | Path, result: PlanResult) -> None:
    """One row per fired rule; ``pointer`` is the rule's register reading at the end of the run."""
    ncoord = max(o.X.shape[1] for o in result.outcomes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["member", "branch", "pointer"] + [f"system{k}" for k in range(ncoord)]
                   + ["rule", "trigger_time"])
        for recs in result.records():
            for r in recs:
                rule = next(x for x in result.plan.rules if x.label == r.rule)
                ptr = ("" if rule.register_axis is None
                       else f"{result.final_configs[r.run_id, rule.register_axis]:.17g}")
                xs = [f"{v:.17g}" for v in r.x] + [""] * (ncoord - len(r.x))
                w.writerow([r.run_id, r.branch_id, ptr] + xs + [r.rule, f"{r.trigger_time:.17g}"])


# --- selection invariance ----------------------------------------------------


def _selected_test(e: EnsembleState, split: SubsystemSplit, sel: np.ndarray, alpha: float,
                   name: str) -> TestReport:
    sel = np.asarray(sel, bool) & ~e.capped
    n = int(sel.sum())
    if n == 0:
        raise EmptySelection(f"selector {name} kept no ensemble members")
    X = e.configs[sel][:, split.x_axes[0]]
    Y = e.configs[sel][:, list(split.y_axes)]
    u = conditional_pit(e.wavefunction, split, X, Y)
    stat = float(stats.kstest(u, "uniform").statistic)
    thr = ks_critical(n, alpha)
    return TestReport(stat, thr, stat <= thr, alpha, n, f"selection[{name}]",
                      {"fraction": n / e.size})


def selection_invariance_test(e: EnsembleState, split: SubsystemSplit,
                              selector: Callable[[np.ndarray], np.ndarray], alpha: float = 0.01,
                              name: str = "selector") -> TestReport:
    """Test the selected members' X against |psi|^2 of their conditional wave functions.

    The selector receives the environment coordinates only. Each selected X is
    mapped through the CDF of |conditional wf at its own Y|^2 and the pooled
    values are tested for uniformity, which for a product state reduces to a
    plain KS test against |psi|^2.
    """
    Y = e.configs[:, list(split.y_axes)]
    return _selected_test(e, split, selector(Y.copy()), alpha, name)
