import csv
import math

import numpy as np
import pytest

from bohmsim.errors import BranchOverlap, NotEffective
from bohmsim.grid import AxisSpec, Grid, WaveFunction, fidelity, normalize
from bohmsim.measurement import (PointerModel, TwoSlitGeometry, _coarsen_periodic, collapse_and_continue,
                                 run_measurement, symmetry_violations, two_slit_scenario, write_records_csv)
from bohmsim.propagator import Hamiltonian, PropagatorConfig
from bohmsim.states import gaussian
from bohmsim.subsystem import SubsystemSplit


def _setup(strength=100.0, weight=0.64):
    g = Grid((AxisSpec(128, -12.8, 12.8), AxisSpec(256, -24.0, 24.0)))
    gx, gy = g.subgrid((0,)), g.subgrid((1,))
    x, y = gx.coords(0), gy.coords(0)
    p1 = normalize(WaveFunction(gx, gaussian(x, 4.0, 0.5)))
    p2 = normalize(WaveFunction(gx, gaussian(x, -4.0, 0.5)))
    psi = normalize(WaveFunction(gx, math.sqrt(weight) * p1.amplitudes + math.sqrt(1 - weight) * p2.amplitudes))
    phi = normalize(WaveFunction(gy, gaussian(y, 0.0, 0.5)))
    model = PointerModel((0,), 1, strength, (0.05, 0.15), np.tanh(x / 0.3), phi, settling=1.0)
    return g, psi, model, p1, p2


@pytest.fixture(scope="module")
def measured():
    g, psi, model, p1, p2 = _setup()
    res = run_measurement(psi, model, Hamiltonian((1.0, 1.0)), PropagatorConfig("split_fourier", 0.005), M=4000,
                          seed=21, settle_extra=0.1)
    return res, p1, p2


def test_two_branches_with_born_weights(measured):
    res, _, _ = measured
    assert res.branches.count == 2
    assert sorted(res.born_weights.values()) == pytest.approx([0.36, 0.64], abs=1e-9)
    assert sum(res.frequencies.values()) == pytest.approx(1.0)
    for lab, born in res.born_weights.items():
        sig = math.sqrt(born * (1 - born) / 4000)
        assert abs(res.frequencies[lab] - born) <= 3 * sig
    assert res.settling_sensitivity == 0.0


def test_branch_value_sign_identifies_system_packet(measured):
    res, _, _ = measured
    for lab, val in res.branch_values.items():
        xs = res.system_samples(lab)[:, 0]
        # packets have spread to sigma ~1.25 by readout, so allow a few tail members
        assert np.sign(xs.mean()) == np.sign(val)
        assert np.mean(np.sign(xs) == np.sign(val)) > 0.99


def test_records_carry_normalized_weights_and_pointer(measured, tmp_path):
    res, _, _ = measured
    r = res.records[0]
    assert sum(r.weights) == pytest.approx(1.0)
    assert r.pointer_reading == res.final.configs[0, 1]
    write_records_csv(tmp_path / "rec.csv", res.records[:5])
    with open(tmp_path / "rec.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["member", "branch", "pointer", "system0"]
    assert len(rows) == 6


def test_collapse_gives_branch_packet_and_refuses_gap(measured):
    res, _, _ = measured
    split = SubsystemSplit((0,), (1,))
    lab = max(res.branch_values, key=res.branch_values.get)
    first = next(i for i, rec in enumerate(res.records) if rec.branch_id == lab)
    y = res.final.configs[first, 1]
    psi = collapse_and_continue(res.Psi, split, np.array([y]))
    assert fidelity(psi, res.branch_psis[lab]) > 1 - 1e-6
    with pytest.raises(NotEffective):
        collapse_and_continue(res.Psi, split, np.array([0.0]))


def test_weak_coupling_is_reported_as_overlap():
    g, psi, model, _, _ = _setup(strength=4.0)
    with pytest.raises(BranchOverlap):
        run_measurement(psi, model, Hamiltonian((1.0, 1.0)), PropagatorConfig("split_fourier", 0.005), M=200, seed=1)


def test_coupling_window():
    g, _, model, _, _ = _setup()
    V = model.coupling(g)
    assert np.shape(V(0.1)) == g.shape
    assert V(0.0) == 0.0 and V(0.15) == 0.0
    with pytest.raises(ValueError):
        PointerModel((0,), 1, 1.0, (1.0, 0.5), np.zeros(4), model.pointer_init)


def test_coarsening_preserves_mass_and_centers():
    v = np.random.default_rng(2).random(64)
    for f in (2, 4, 8):
        assert _coarsen_periodic(v, f).sum() == pytest.approx(v.sum())
    np.testing.assert_array_equal(_coarsen_periodic(v, 1), v)


def test_symmetry_violations_counts_mirror_pairs():
    counts = np.full(16, 400)
    assert symmetry_violations(counts) == 0
    counts[3] = 600
    assert symmetry_violations(counts) == 1


def test_small_two_slit_run():
    geo = TwoSlitGeometry(forward_points=64, transverse_points=128, screen_time=2.0, dt=0.02, screen_bins=32)
    res = two_slit_scenario(geo, 2000, 3, n_record=10)
    assert res.crossings == 0
    assert res.report.passed
    assert res.counts.sum() == 2000
    assert res.expected.total() == pytest.approx(1.0)
