import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohmsim.errors import SnapshotGap
from bohmsim.grid import AxisSpec, Grid, WaveFunction, normalize
from bohmsim.guidance import (EnsembleState, Regularization, advance_ensemble, integrate, interpolate,
                              iter_integrate, probability_current, velocity_field)
from bohmsim.propagator import Hamiltonian, PropagatorConfig, evolve, iter_evolve
from bohmsim.states import box_ground, free_gaussian_sigma, gaussian, product_state


def test_plane_wave_velocity_is_hbar_k_over_m():
    g = Grid((AxisSpec(128, -10.0, 10.0),))
    k = 2 * np.pi * 7 / 20.0
    psi = normalize(WaveFunction(g, np.exp(1j * k * g.coords(0))))
    v = velocity_field(psi, Hamiltonian((2.0,), None, 1.5)).components[0]
    np.testing.assert_allclose(v, 1.5 * k / 2.0, rtol=0, atol=1e-12)


def test_galilean_boost_adds_constant_velocity(gauss):
    g = gauss.grid
    H = Hamiltonian((1.0,))
    k0 = 2 * np.pi * 3 / g.axes[0].length
    boosted = gauss.replace(gauss.amplitudes * np.exp(1j * k0 * g.coords(0)))
    dv = velocity_field(boosted, H).components[0] - velocity_field(gauss, H).components[0]
    rho = np.abs(gauss.amplitudes) ** 2
    bulk = rho >= 1e-8 * rho.max()
    np.testing.assert_allclose(dv[bulk], k0, rtol=0, atol=1e-10)


def test_real_state_has_zero_velocity_and_frozen_trajectories():
    g = Grid((AxisSpec(64, -8.0, 8.0), AxisSpec(48, 0.0, 1.0, "box")))
    psi = product_state(g, [gaussian(g.axes[0].nodes, 0.3, 1.2).real, box_ground(g.axes[1].nodes, 0.0, 1.0)])
    H = Hamiltonian((1.0, 1.0))
    assert np.all(velocity_field(psi, H).components == 0.0)
    # a stationary state: |psi| fixed, global phase rotating; velocity stays exactly zero
    x0 = np.random.default_rng(3).uniform([-3, 0.2], [3, 0.8], size=(50, 2))
    snaps = [psi.replace(psi.amplitudes * np.exp(-0.3j * k), time=0.01 * k) for k in range(20)]
    final, _ = integrate(EnsembleState(x0, 0.0, 3), snaps, H)
    assert np.array_equal(final.configs, x0)


def test_current_equals_density_times_velocity(gauss):
    H = Hamiltonian((0.7,))
    J = probability_current(gauss, H)
    vf = velocity_field(gauss, H)
    rho = np.abs(gauss.amplitudes) ** 2
    assert np.max(np.abs(J - rho * vf.components)) < 1e-10


def test_velocity_scale_multiplies_field(gauss):
    H = Hamiltonian((1.0,))
    v1 = velocity_field(gauss, H).components
    v2 = velocity_field(gauss, H, scale=2.0).components
    np.testing.assert_allclose(v2, 2 * v1)


def test_node_speed_is_capped():
    g = Grid((AxisSpec(64, -np.pi, np.pi),))
    x = g.coords(0)
    psi = WaveFunction(g, np.sin(x) + 1e-9j * np.cos(3 * x))
    vf = velocity_field(psi, Hamiltonian((1.0,)), Regularization(vmax=5.0))
    assert vf.regularized.any()
    assert np.all(np.abs(vf.components[0][vf.regularized]) <= 5.0 + 1e-12)


@settings(max_examples=30)
@given(st.floats(-1.0, 1.0), st.floats(-2.0, 2.0), st.floats(0.5, 3.0))
def test_interpolation_reproduces_affine_fields(a, b, c):
    g = Grid((AxisSpec(16, 0.0, 4.0, "box"), AxisSpec(12, -3.0, 3.0, "box")))
    X, Y = g.mesh()
    f = a * X + b * Y + c
    lo = [ax.nodes[0] for ax in g.axes]
    hi = [ax.nodes[-1] for ax in g.axes]
    pts = np.random.default_rng(5).uniform(lo, hi, (40, 2))
    got = interpolate(f[None], g, pts)[:, 0]
    np.testing.assert_allclose(got, a * pts[:, 0] + b * pts[:, 1] + c, atol=1e-12)


def test_free_gaussian_trajectories_scale_with_width():
    g = Grid((AxisSpec(512, -30.0, 30.0),))
    psi = normalize(WaveFunction(g, gaussian(g.coords(0), 0.0, 1.0)))
    H = Hamiltonian((1.0,))
    T = 2.0
    x0 = np.linspace(-2.0, 2.0, 9)[:, None]
    x0 = x0[x0[:, 0] != 0]
    final, trajs = integrate(EnsembleState(x0, 0.0, 0), iter_evolve(psi, H, PropagatorConfig("split_fourier", 0.01), T),
                             H, record=range(len(x0)))
    for tr in trajs:
        exact = tr.points[0, 0] * np.array([free_gaussian_sigma(t, 1.0) for t in tr.times])
        np.testing.assert_allclose(tr.points[:, 0], exact, rtol=1e-5)


def test_thread_count_does_not_change_results():
    g = Grid((AxisSpec(64, -8.0, 8.0), AxisSpec(64, -8.0, 8.0)))
    psi = product_state(g, [gaussian(g.axes[0].nodes, 0, 1, 1.0), gaussian(g.axes[1].nodes, 1, 1.5, -0.5)])
    H = Hamiltonian((1.0, 1.0))
    snaps = evolve(psi, H, PropagatorConfig("split_fourier", 0.02), 0.4)
    x0 = np.random.default_rng(9).normal(size=(3001, 2))
    one, _ = integrate(EnsembleState(x0, 0.0, 9), snaps, H, workers=1)
    many, _ = integrate(EnsembleState(x0, 0.0, 9), snaps, H, workers=7)
    assert np.array_equal(one.configs, many.configs)


def test_snapshot_time_mismatch_raises(gauss):
    H = Hamiltonian((1.0,))
    later = gauss.replace(time=1.0)
    with pytest.raises(SnapshotGap):
        advance_ensemble(EnsembleState(np.zeros((3, 1)), 0.0, 0), (later, later), H)
    with pytest.raises(SnapshotGap):
        list(iter_integrate(EnsembleState(np.zeros((3, 1)), 0.0, 0), [later], H))
    uneven = [gauss, gauss.replace(time=0.1), gauss.replace(time=0.3)]
    with pytest.raises(SnapshotGap):
        list(iter_integrate(EnsembleState(np.zeros((3, 1)), 0.0, 0), uneven, H))
