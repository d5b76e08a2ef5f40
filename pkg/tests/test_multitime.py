import csv

import numpy as np
import pytest

from bohmsim.errors import EmptySelection, InsufficientRuns, PreparationFailed
from bohmsim.grid import AxisSpec, Grid, WaveFunction, normalize
from bohmsim.guidance import EnsembleState
from bohmsim.multitime import (AtTime, EarlyIfFavorable, ExperimentPlan, Probe, RandomSystemRule, _selected_test,
                               independence_report, pre_trigger_event, run_plan, selection_invariance_test,
                               write_outcomes_csv)
from bohmsim.propagator import Hamiltonian, PropagatorConfig, evolve
from bohmsim.scenarios import SELECTORS, entangled_pair, ground_box
from bohmsim.states import gaussian, product_state
from bohmsim.subsystem import SubsystemSplit

DT = 0.02


def _factor(g1, center, sigma, k0, t):
    psi = normalize(WaveFunction(g1, gaussian(g1.coords(0), center, sigma, k0)))
    return psi if t == 0 else evolve(psi, Hamiltonian((1.0,)), PropagatorConfig("split_fourier", DT), t)[-1]


@pytest.fixture(scope="module")
def product_run():
    g = Grid((AxisSpec(64, -10.0, 10.0), AxisSpec(64, -10.0, 10.0)))
    g1 = g.subgrid((0,))
    Psi0 = product_state(g, [gaussian(g1.coords(0), -1.0, 1.0, 1.0), gaussian(g1.coords(0), 1.0, 0.8, -0.5)])
    H = Hamiltonian((1.0, 1.0))
    a = RandomSystemRule("a", SubsystemSplit((0,), (1,)), AtTime(0.2), _factor(g1, -1.0, 1.0, 1.0, 0.2))
    b = RandomSystemRule("b", SubsystemSplit((1,), (0,)), AtTime(0.4), _factor(g1, 1.0, 0.8, -0.5, 0.4))
    probe = Probe("b_at_a", 0.2, b.split, _factor(g1, 1.0, 0.8, -0.5, 0.2))
    plan = ExperimentPlan((a, b), (probe,))
    return run_plan(Psi0, H, PropagatorConfig("split_fourier", DT), plan, 4000, seed=17)


def test_product_runs_complete_and_pass_independence(product_run):
    res = product_run
    assert res.complete.all()
    acc = res.accounting()
    assert acc == {"runs": 4000, "complete": 4000, "capped": 0, "preparation_failed": 0, "incomplete": 0}
    assert np.all(res.outcome("a").time == pytest.approx(0.2))
    assert np.all(res.outcome("b").fidelity > 1 - 1e-10)
    assert np.all(res.probes["b_at_a"] > 1 - 1e-10)
    reps = independence_report(res)
    assert [r.test for r in reps] == ["marginal[a]", "marginal[b]", "correlation[a,b]", "joint_chi_square[a,b]"]
    assert all(r.passed for r in reps)
    assert reps[2].threshold == pytest.approx(4 / np.sqrt(4000))


def test_masks_and_minimum_runs(product_run):
    mask = np.arange(4000) % 3 != 0
    reps = independence_report(product_run, mask=mask)
    assert all(r.passed for r in reps)
    assert reps[0].sample_size == int(mask.sum())
    with pytest.raises(InsufficientRuns):
        independence_report(product_run, mask=np.arange(4000) < 100)
    # every axis here is some rule's system, so no axis can carry a pre-trigger event
    for axes in ([0], [1]):
        with pytest.raises(ValueError):
            pre_trigger_event(product_run, axes, SELECTORS["all"])


def test_outcome_csv(product_run, tmp_path):
    write_outcomes_csv(tmp_path / "o.csv", product_run)
    with open(tmp_path / "o.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["member", "branch", "pointer", "system0", "rule", "trigger_time"]
    assert len(rows) == 1 + 2 * 4000


def test_wrong_preparation_is_flagged_or_raises():
    g = Grid((AxisSpec(32, -8.0, 8.0), AxisSpec(32, -8.0, 8.0)))
    g1 = g.subgrid((0,))
    Psi0 = product_state(g, [gaussian(g1.coords(0), 0.0, 1.0), gaussian(g1.coords(0), 0.0, 1.0)])
    wrong = _factor(g1, 2.0, 1.0, 0.0, 0.0)
    rule = RandomSystemRule("a", SubsystemSplit((0,), (1,)), AtTime(0.0), wrong)
    res = run_plan(Psi0, Hamiltonian((1.0, 1.0)), PropagatorConfig("split_fourier", DT), ExperimentPlan((rule,)), 50, 0)
    assert res.failed.all() and not res.complete.any()
    with pytest.raises(PreparationFailed):
        run_plan(Psi0, Hamiltonian((1.0, 1.0)), PropagatorConfig("split_fourier", DT),
                 ExperimentPlan((rule,), strict=True), 50, 0)


def test_plan_validation():
    g1 = Grid((AxisSpec(8, 0.0, 1.0),))
    psi = normalize(WaveFunction(g1, np.ones(8)))
    with pytest.raises(ValueError):
        ExperimentPlan(())
    with pytest.raises(ValueError):
        ExperimentPlan((RandomSystemRule("a", SubsystemSplit((0,), (1,)), AtTime(0.0), psi, register_axis=0),))
    assert ExperimentPlan((), horizon=2.0).end_time() == 2.0


def test_triggers():
    Y = np.array([[1.0], [-1.0]])
    assert list(AtTime(0.5)(0.4, Y, 0.1)) == [False, False]
    assert list(AtTime(0.5)(0.5, Y, 0.1)) == [True, True]
    trig = EarlyIfFavorable(0.3, 0.9, 0, 1.0)
    assert list(trig(0.3, Y, 0.1)) == [True, False]
    assert list(trig(0.5, Y, 0.1)) == [False, False]
    assert list(trig(0.9, Y, 0.1)) == [True, True]


def test_unrecorded_reexamination_of_a_ground_state_repeats_exactly():
    uni = ground_box({})
    split = SubsystemSplit((0,), (1,))
    ground = uni.states["x_ground"](0.0)
    plan = ExperimentPlan((RandomSystemRule("first", split, AtTime(0.1), ground),
                           RandomSystemRule("again", split, AtTime(0.3), ground)))
    res = run_plan(uni.Psi0, uni.H, uni.cfg, plan, 2000, seed=4)
    a, b = res.outcome("first"), res.outcome("again")
    assert res.complete.all()
    assert np.array_equal(a.X, b.X)


@pytest.fixture(scope="module")
def entangled_ensemble():
    uni = entangled_pair({"points": 96, "length": 18.0})
    res = run_plan(uni.Psi0, uni.H, uni.cfg, ExperimentPlan((), horizon=0.3), 6000, seed=8)
    return EnsembleState(res.final_configs, res.final_time, 8, res.final_state, res.capped)


def test_environment_selectors_do_not_bias_x(entangled_ensemble):
    split = SubsystemSplit((0,), (1,))
    for name, sel in SELECTORS.items():
        assert selection_invariance_test(entangled_ensemble, split, sel, 0.01, name).passed, name


def test_x_leaking_selector_is_detected(entangled_ensemble):
    split = SubsystemSplit((0,), (1,))
    X = entangled_ensemble.configs[:, 0]
    Y = entangled_ensemble.configs[:, 1]
    # keeps members whose X lies above their own conditional mean: uses X, so it must fail
    rep = _selected_test(entangled_ensemble, split, X > 0.5 * Y, 0.01, "leak")
    assert not rep.passed
    with pytest.raises(EmptySelection):
        _selected_test(entangled_ensemble, split, np.zeros(X.size, bool), 0.01, "none")
