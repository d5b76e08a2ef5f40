import numpy as np
import pytest

from bohmsim.errors import InconsistentParticleDims, MethodGridMismatch
from bohmsim.grid import AxisSpec, Grid, WaveFunction, fidelity, normalize
from bohmsim.propagator import (Hamiltonian, PropagatorConfig, apply_hamiltonian, build_pair_potential, energy,
                                evolve, iter_evolve, step)
from bohmsim.states import box_ground, free_gaussian_sigma, gaussian, harmonic_ground

from . import oracles


def _free_packet(n=512, L=60.0):
    g = Grid((AxisSpec(n, -L / 2, L / 2),))
    return g, normalize(WaveFunction(g, gaussian(g.coords(0), 0.0, 1.0)))


def test_free_gaussian_matches_analytic_density():
    g, psi = _free_packet()
    H = Hamiltonian((1.0,))
    T = oracles.FREE_WIDTH_DOUBLING_TIME
    out = evolve(psi, H, PropagatorConfig("split_fourier", T / 500, 50), T)
    x = g.coords(0)
    for s in out:
        sig = free_gaussian_sigma(s.time, 1.0)
        exact = np.exp(-x**2 / (2 * sig**2)) / (np.sqrt(2 * np.pi) * sig)
        assert np.max(np.abs(np.abs(s.amplitudes) ** 2 - exact)) < 1e-10
        assert abs(s.norm_squared() - 1.0) < 1e-12
    assert out[-1].time == T
    assert free_gaussian_sigma(T, 1.0) == pytest.approx(2.0)


def test_free_energy_is_conserved_exactly():
    g, psi = _free_packet()
    psi = psi.replace(psi.amplitudes * np.exp(1j * 0.9 * g.coords(0)))
    H = Hamiltonian((1.0,))
    e0 = energy(psi, H)
    final = evolve(psi, H, PropagatorConfig("split_fourier", 0.01, 1000), 10.0)[-1]
    assert abs(energy(final, H) - e0) / e0 < 1e-8


def _harmonic(dt, steps, x0=2.0):
    g = Grid((AxisSpec(256, -12.0, 12.0),))
    x = g.coords(0)
    H = Hamiltonian((1.0,), 0.5 * x**2)
    psi = normalize(WaveFunction(g, harmonic_ground(x, 1.0, center=x0)))
    return g, H, psi, evolve(psi, H, PropagatorConfig("split_fourier", dt, 1), dt * steps)


def test_harmonic_energy_wobble_is_second_order_and_returns_after_a_period():
    excursions = []
    for dt in (2e-3, 1e-3):
        _, H, psi, snaps = _harmonic(dt, round(2.0 / dt))
        e0 = energy(psi, H)
        excursions.append(max(abs(energy(s, H) - e0) / e0 for s in snaps))
    assert excursions[0] / excursions[1] == pytest.approx(4.0, rel=0.1)
    # at dt = 1e-4 the wobble over 10^3 steps is far below 1e-8
    _, H, psi, snaps = _harmonic(1e-4, 1000)
    e0 = energy(psi, H)
    assert max(abs(energy(s, H) - e0) / e0 for s in snaps) < 1e-8
    # after a full period there is no accumulated drift
    n = 3142
    _, H, psi, snaps = _harmonic(2 * np.pi / n, n)
    assert abs(energy(snaps[-1], H) - e0) / e0 < 1e-8


def test_harmonic_center_follows_classical_orbit():
    g, _, _, snaps = _harmonic(2e-3, 1500)
    x = g.coords(0)
    for s in snaps[::100]:
        rho = np.abs(s.amplitudes) ** 2
        assert np.sum(rho * x) / np.sum(rho) == pytest.approx(2.0 * np.cos(s.time), abs=1e-5)


def test_crank_nicolson_box_ground_state_is_stationary():
    g = Grid((AxisSpec(100, 0.0, 1.0, "box"),))
    psi = normalize(WaveFunction(g, box_ground(g.coords(0), 0.0, 1.0)))
    H = Hamiltonian((1.0,))
    out = evolve(psi, H, PropagatorConfig("crank_nicolson", 1e-3, 100), 0.3)
    assert fidelity(out[-1], psi) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(np.abs(out[-1].amplitudes), np.abs(psi.amplitudes), atol=1e-12)


def test_crank_nicolson_is_unitary_and_second_order():
    g = Grid((AxisSpec(200, -10.0, 10.0, "box"),))
    x = g.coords(0)
    psi = normalize(WaveFunction(g, gaussian(x, -1.0, 0.7, 2.0)))
    H = Hamiltonian((1.0,), 0.1 * x**2)
    T = 1.0
    ref = evolve(psi, H, PropagatorConfig("crank_nicolson", T / 4000, 4000), T)[-1]
    errs = []
    for n in (50, 100):
        out = evolve(psi, H, PropagatorConfig("crank_nicolson", T / n, n), T)[-1]
        assert out.norm_squared() == pytest.approx(1.0, abs=1e-12)
        errs.append(np.linalg.norm(out.amplitudes - ref.amplitudes))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_split_fourier_refuses_box_axes():
    g = Grid((AxisSpec(16, 0.0, 1.0, "box"),))
    psi = normalize(WaveFunction(g, np.ones(16)))
    with pytest.raises(MethodGridMismatch):
        step(psi, Hamiltonian((1.0,)), PropagatorConfig("split_fourier", 1e-3))


def test_partial_last_step_lands_on_t_final():
    _, psi = _free_packet(64, 20.0)
    times = [s.time for s in iter_evolve(psi, Hamiltonian((1.0,)), PropagatorConfig("split_fourier", 0.3, 2), 1.0)]
    assert times[0] == 0.0 and times[-1] == 1.0
    assert times[1] == pytest.approx(0.6)


def test_constant_time_potential_equals_static_potential():
    g, psi = _free_packet(128, 30.0)
    x = g.coords(0)
    V = 0.05 * x**2
    a = evolve(psi, Hamiltonian((1.0,), V), PropagatorConfig("split_fourier", 0.01, 100), 1.0)[-1]
    b = evolve(psi, Hamiltonian((1.0,), None, 1.0, lambda t: V), PropagatorConfig("split_fourier", 0.01, 100), 1.0)[-1]
    np.testing.assert_allclose(a.amplitudes, b.amplitudes, atol=1e-13)


def test_apply_hamiltonian_on_plane_wave():
    g = Grid((AxisSpec(64, 0.0, 2 * np.pi),))
    psi = WaveFunction(g, np.exp(3j * g.coords(0)))
    np.testing.assert_allclose(apply_hamiltonian(psi, Hamiltonian((2.0,))), 9 / 4 * psi.amplitudes, atol=1e-12)


def test_pair_potential_minimum_image():
    g = Grid((AxisSpec(10, 0.0, 10.0), AxisSpec(10, 0.0, 10.0)))
    V = build_pair_potential(g, lambda r: r, [[0], [1]])
    assert V[0, 9] == pytest.approx(1.0)
    assert build_pair_potential(g, lambda r: r, [[0], [1]], minimum_image=False)[0, 9] == pytest.approx(9.0)
    with pytest.raises(InconsistentParticleDims):
        build_pair_potential(Grid(g.axes + (g.axes[0],)), lambda r: r, [[0, 1], [2]])


def test_hamiltonian_validation():
    with pytest.raises(ValueError):
        Hamiltonian((0.0,))
    with pytest.raises(ValueError):
        Hamiltonian((1.0,), np.array([np.inf]))
    with pytest.raises(ValueError):
        PropagatorConfig("leapfrog")
