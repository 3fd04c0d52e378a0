"""Reference computations independent of the package.

These use textbook closed forms or plain quadrature and share no code with
``cellrate``.  The test-suite stores their outputs as frozen constants and
also re-derives a few of them to guard against drift.
"""

import math

import numpy as np
from scipy import integrate, optimize, special


def scalar_sinr(gamma, rho):
    """Positive root of ``G^2 + G (1 + rho - gamma rho) - gamma rho = 0``.

    SINR of a single group with ``rho = g * Q`` and antenna ratio ``gamma``.
    """
    b = 1.0 + rho - gamma * rho
    return (-b + math.sqrt(b * b + 4.0 * gamma * rho)) / 2.0


def mp_log_det(gamma, rho):
    """``(1/N) log|I + rho X^H X / N|`` in the limit, ``X`` of size ``gamma N x N``.

    Integrates ``log(1 + rho * gamma * x)`` against the Marchenko-Pastur law
    of ``X^H X / (gamma N)`` (ratio ``c = 1/gamma``).
    """
    c = 1.0 / gamma
    a, b = (1 - math.sqrt(c)) ** 2, (1 + math.sqrt(c)) ** 2

    def dens(x):
        return math.sqrt(max((b - x) * (x - a), 0.0)) / (2 * math.pi * c * x)

    val, _ = integrate.quad(lambda x: math.log1p(rho * gamma * x) * dens(x), a, b,
                            epsabs=1e-14, epsrel=1e-13, limit=200)
    # point mass at zero (c > 1) contributes log(1) = 0
    return val


def mp_mmse(gamma, rho):
    """Limit of ``(1/N) tr (I + rho X^H X / N)^{-1}``."""
    c = 1.0 / gamma
    a, b = (1 - math.sqrt(c)) ** 2, (1 + math.sqrt(c)) ** 2

    def dens(x):
        return math.sqrt(max((b - x) * (x - a), 0.0)) / (2 * math.pi * c * x)

    val, _ = integrate.quad(lambda x: dens(x) / (1 + rho * gamma * x), a, b,
                            epsabs=1e-14, epsrel=1e-13, limit=200)
    return val + max(0.0, 1.0 - 1.0 / c)


def rayleigh_capacity(snr):
    """``E log(1 + snr |h|^2)`` with ``|h|^2 ~ Exp(1)``."""
    return math.exp(1.0 / snr) * special.exp1(1.0 / snr)


def orthogonal_waterfill(gamma, g, w, Q):
    """Weighted sum of single-group MP capacities under a sum-power budget.

    Groups do not interfere (disjoint transmitters).  Returns the optimal
    powers found by bounded scalar search (two groups) and the value.
    """
    g1, g2 = g
    w1, w2 = w

    def neg(q1):
        return -(w1 * mp_log_det(gamma, g1 * q1) + w2 * mp_log_det(gamma, g2 * (Q - q1)))

    res = optimize.minimize_scalar(neg, bounds=(0.0, Q), method="bounded",
                                   options={"xatol": 1e-12 * Q})
    q1 = float(res.x)
    # check the corners explicitly
    cands = [(q1, -res.fun), (0.0, -neg(0.0)), (Q, -neg(Q))]
    q1, val = max(cands, key=lambda t: t[1])
    return np.array([q1, Q - q1]), val


if __name__ == "__main__":
    for gm, rho in [(1, 1), (0.5, 1), (2, 1), (4, 10), (1, 0.1), (2, 10)]:
        print(f"({gm}, {rho}): logdet={mp_log_det(gm, rho)!r} mmse={mp_mmse(gm, rho)!r} "
              f"sinr={scalar_sinr(gm, rho)!r}")
    for x in (0.5, 1.0, 5.0):
        print(f"rayleigh {x}: {rayleigh_capacity(x)!r}")
    print(orthogonal_waterfill(1.0, (1.0, 0.25), (1.0, 1.5), 4.0))
    print(orthogonal_waterfill(2.0, (1.0, 0.01), (1.0, 1.0), 1.0))
