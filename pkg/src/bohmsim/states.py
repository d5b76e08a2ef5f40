"""Closed-form initial states used by scenarios and tests.

Widths are always the standard deviation ``sigma`` of the *density* |psi|^2.
Functions return plain arrays on a 1D node set or on a full grid; wrap them in
``WaveFunction`` (and ``normalize``) as needed.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .grid import Grid, WaveFunction, normalize


def gaussian(x: np.ndarray, center: float = 0.0, sigma: float = 1.0, k0: float = 0.0) -> np.ndarray:
    return np.exp(-((x - center) ** 2) / (4.0 * sigma**2) + 1j * k0 * x)


def free_gaussian_sigma(t: float, sigma0: float, mass: float = 1.0, hbar: float = 1.0) -> float:
    """Density width of a free minimum-uncertainty packet after time t."""
    return sigma0 * np.sqrt(1.0 + (hbar * t / (2.0 * mass * sigma0**2)) ** 2)


def harmonic_ground(x: np.ndarray, omega: float, mass: float = 1.0, hbar: float = 1.0,
                    center: float = 0.0) -> np.ndarray:
    return np.exp(-mass * omega * (x - center) ** 2 / (2.0 * hbar))


def harmonic_sigma(omega: float, mass: float = 1.0, hbar: float = 1.0) -> float:
    return float(np.sqrt(hbar / (2.0 * mass * omega)))


def box_ground(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.sin(np.pi * (x - lo) / (hi - lo))


def smooth_indicator(x: np.ndarray, lo: float, hi: float, edge: float) -> np.ndarray:
    """~1 on [lo, hi], falling to 0 over a tanh edge of width ``edge``."""
    return 0.25 * (1.0 + np.tanh((x - lo) / edge)) * (1.0 - np.tanh((x - hi) / edge))


def bump(x: np.ndarray, center: float, half_width: float) -> np.ndarray:
    """cos^2 bump, exactly zero outside |x - center| < half_width."""
    u = (x - center) / half_width
    return np.where(np.abs(u) < 1.0, np.cos(0.5 * np.pi * u) ** 2, 0.0)


def product_state(grid: Grid, factors: Sequence[np.ndarray], time: float = 0.0) -> WaveFunction:
    """Normalized outer product of one 1D factor per axis."""
    if len(factors) != grid.ndim:
        raise ValueError("need one factor per axis")
    amp = np.ones(grid.shape, dtype=complex)
    for k, f in enumerate(factors):
        shape = [1] * grid.ndim
        shape[k] = grid.axes[k].points
        amp = amp * np.asarray(f, dtype=complex).reshape(shape)
    return normalize(WaveFunction(grid, amp, time))
