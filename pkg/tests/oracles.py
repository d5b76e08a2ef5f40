"""Reference values computed outside the package and frozen here.

Each constant is re-derived by an independent route (sympy algebra or a
textbook approximation) in ``test_oracles.py``; the package is never used to
produce them.
"""

import math

# free minimum-uncertainty packet, hbar = m = sigma0 = 1
# density variance sigma(t)^2 = sigma0^2 + t^2 / (4 sigma0^2)
FREE_WIDTH_DOUBLING_TIME = 3.4641016151377546  # 2 sqrt(3) m sigma0^2 / hbar

# entangled Gaussian exp(-(x-y)^2/4a - (x+y)^2/4b), a = 1, b = 3
ENTANGLED_A, ENTANGLED_B = 1.0, 3.0
ENTANGLED_COND_SLOPE = 0.5  # E[X | Y=y] = y (b - a)/(a + b)
ENTANGLED_COND_VAR = 0.75  # Var[X | Y=y] = a b/(a + b)
ENTANGLED_COND_MEAN_AT_15_8 = 0.9375  # slope * 15/8

# statistical thresholds at M = 10^4, alpha = 0.01
KS_CRITICAL_1E4 = 0.016259280113043572  # exact Kolmogorov distribution (kstwo)
KS_CRITICAL_QUOTED = 0.0214
CHI2_15_DOF_99 = 30.57791416689249
CORRELATION_BOUND_1E4 = 4.0 / math.sqrt(1e4)  # 0.04

# pointer measurement with amplitudes 0.8 and 0.6
BORN_WEIGHTS = (0.64, 0.36)
BINOMIAL_SIGMA_064_1E4 = math.sqrt(0.64 * 0.36 / 1e4)  # 0.0048
