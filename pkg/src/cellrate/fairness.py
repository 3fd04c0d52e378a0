"""Fairness scheduling over the asymptotic ergodic rate region.

The network utility ``g(R)`` is maximized by dual decomposition: with rate
prices ``W`` the problem splits into a decoupled auxiliary maximization
``max_r g(r) - W.r`` and a weighted sum-rate problem solved by
:mod:`cellrate.limitcore`.  The dual function

    G(W) = [g(r*) - W.r*] + max_R W.R

is minimized by projected subgradient steps with a backtracking line search.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConvergenceError
from .geometry import ClusterProblem, Scenario, all_cluster_problems, detect_symmetric_blocks
from .limitcore import (DEFAULT_TOL, DualVars, PowerAllocation, RatePoint, Tolerances, Weights,
                        optimize_lambda, weighted_avg_sum_rate)

log = logging.getLogger(__name__)

UTILITY_KINDS = ("pfs", "hfs", "alpha_fair")


@dataclass(frozen=True)
class Utility:
    """Concave network utility: proportional, max-min or alpha fairness."""

    kind: str = "pfs"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in UTILITY_KINDS:
            raise ValueError(f"unknown utility {self.kind!r}; expected one of {UTILITY_KINDS}")
        if self.kind == "alpha_fair" and not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError("alpha_fair needs a finite alpha > 0")

    @classmethod
    def pfs(cls) -> "Utility":
        return cls("pfs")

    @classmethod
    def hfs(cls) -> "Utility":
        return cls("hfs")

    @classmethod
    def alpha_fair(cls, alpha: float) -> "Utility":
        return cls("alpha_fair", float(alpha))

    @property
    def is_log(self) -> bool:
        return self.kind == "pfs" or (self.kind == "alpha_fair" and self.alpha == 1.0)

    @property
    def uses_simplex(self) -> bool:
        return self.kind == "hfs"


@dataclass
class FairnessResult:
    """Outcome of :func:`solve_fairness` for one cluster.

    ``trace`` holds ``(n, utility, gap, subgradient_norm, step)`` per outer
    iteration, where ``gap`` is ``G(W(n)) - g(R(n))``.
    """

    weights: Weights
    rates: RatePoint
    aux_rates: np.ndarray
    duals: DualVars
    powers: PowerAllocation
    utility_value: float
    converged: bool
    iterations: int
    residual: float
    blocks: Optional[list] = None
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# elementary pieces
# ---------------------------------------------------------------------------

def _as_array(weights) -> np.ndarray:
    return weights.w if isinstance(weights, Weights) else np.asarray(weights, dtype=float)


def inner_r_star(utility: Utility, weights, rates=None) -> np.ndarray:
    """Maximizer of ``g(r) - W.r`` over ``r >= 0``.

    For ``hfs`` the maximizer is any common value once ``sum(W) = 1``; the
    common value is taken as the mean of the current inner ``rates``.
    """
    w = _as_array(weights)
    if utility.kind == "hfs":
        if rates is None:
            raise ValueError("hfs needs the current inner rates")
        r = np.asarray(rates, dtype=float)
        return np.full(len(w), float(np.mean(r)))
    if np.any(w <= 0):
        raise ValueError("dual unbounded; increase weight floor")
    if utility.is_log:
        return 1.0 / w
    return w ** (-1.0 / utility.alpha)


def subgradient(weights, rates, aux) -> np.ndarray:
    """Subgradient of the dual function: ``R* - r*``."""
    rates = rates.r if isinstance(rates, RatePoint) else np.asarray(rates, dtype=float)
    aux = np.asarray(aux, dtype=float)
    if rates.shape != aux.shape or rates.shape != _as_array(weights).shape:
        raise ValueError("weights, rates and auxiliary rates must have equal length")
    return rates - aux


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum(w) = 1}`` (sort based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def update_weights(weights, subgrad, step: float, utility: Utility,
                   w_floor: float = 1e-8) -> Weights:
    """One projected subgradient step ``W - step * subgrad``."""
    if not step > 0:
        raise ValueError("step must be positive")
    w = _as_array(weights) - step * np.asarray(subgrad, dtype=float)
    if utility.uses_simplex:
        w = project_simplex(w)
    else:
        w = np.maximum(w, w_floor)
    return Weights(w)


def utility_value(utility: Utility, rates) -> float:
    """``g(R)``; log-type utilities reject zero rates."""
    r = rates.r if isinstance(rates, RatePoint) else np.asarray(rates, dtype=float)
    if utility.kind == "hfs":
        return float(np.min(r))
    if utility.is_log:
        if np.any(r <= 0):
            raise ValueError("log utility of a zero rate is -inf")
        return float(np.sum(np.log(r)))
    a = utility.alpha
    if a > 1 and np.any(r <= 0):
        raise ValueError("alpha-fair utility of a zero rate is -inf")
    return float(np.sum(r ** (1.0 - a)) / (1.0 - a))


def _safe_value(utility, r):
    try:
        return utility_value(utility, r)
    except ValueError:
        return -math.inf


def _aux_value(utility: Utility, w: np.ndarray) -> float:
    """``max_r g(r) - W.r`` (0 for hfs on the simplex)."""
    if utility.kind == "hfs":
        return 0.0
    r = inner_r_star(utility, w)
    return utility_value(utility, r) - float(np.dot(w, r))


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def _tie(w: np.ndarray, blocks) -> np.ndarray:
    if not blocks:
        return w
    out = w.copy()
    for blk in blocks:
        idx = list(blk)
        out[idx] = np.mean(w[idx])
    return out


def snap_ties(w: np.ndarray, tie_tol: float) -> np.ndarray:
    """Merge weights closer than ``tie_tol * max(w)`` into their common mean."""
    if tie_tol <= 0 or len(w) < 2:
        return w
    order = np.argsort(w, kind="stable")
    ws = w[order]
    breaks = np.nonzero(np.diff(ws) > tie_tol * np.max(np.abs(ws)))[0] + 1
    out = w.copy()
    for run in np.split(order, breaks):
        if len(run) > 1:
            out[run] = np.mean(w[run])
    return out


def _blocks_for(problem: ClusterProblem):
    blocks = detect_symmetric_blocks(problem)
    if blocks is None or all(len(b) == 1 for b in blocks):
        return None
    return blocks


def solve_fairness(problem: ClusterProblem, utility: Utility, lambda_mode: str = "sum_power_relax",
                   tol: Tolerances = DEFAULT_TOL, conv_tol: float = 1e-4, max_outer: int = 2000,
                   w_floor: float = 1e-8, shrink: float = 0.5, armijo: float = 1e-4,
                   max_backtracks: int = 30, max_stalls: int = 5, tie_blocks: bool = True,
                   tie_tol: float = 1e-6,
                   raise_on_failure: bool = False) -> FairnessResult:
    """Minimize the dual function over the rate prices ``W``.

    Each outer iteration evaluates the weighted sum-rate problem at ``W``,
    forms ``r*`` and the subgradient ``R* - r*``, and takes a projected step
    whose length starts at ``0.5 / |d|_inf`` (capped at twice the last
    accepted step) and is halved until ``G`` decreases sufficiently.  After ``max_stalls`` failed line searches the
    step falls back to ``mu_0 / sqrt(n)``.  Iteration stops when
    ``|R* - r*|_inf <= conv_tol * mean(R*)``.

    Weights closer than ``tie_tol`` (relative) are merged.  At equal weights
    the inner rates are picked on the tie face as close as possible to
    ``r*``, which yields the minimum-norm subgradient along that face.  When
    the cluster splits into strongly symmetric blocks the weights are also
    kept block-constant.  If ``max_outer`` is exhausted the best iterate (by
    duality gap) is returned with ``converged=False``, or a
    :class:`ConvergenceError` is raised when ``raise_on_failure`` is set.
    """
    A = problem.A
    blocks = _blocks_for(problem) if tie_blocks else None
    w = np.full(A, 1.0 / A) if utility.uses_simplex else np.ones(A)

    def evaluate(w_arr, q_init=None):
        weights = Weights(w_arr)
        duals = optimize_lambda(problem, weights, lambda_mode, tol)
        target = np.zeros(A) if utility.uses_simplex else inner_r_star(utility, w_arr)
        value, powers, rates = weighted_avg_sum_rate(problem, weights, duals, tol,
                                                     q_init=q_init, target=target)
        G = _aux_value(utility, w_arr) + value
        return G, duals, powers, rates

    G, duals, powers, rates = evaluate(w)
    trace = []
    best = None
    stalls = 0
    mu_last = None
    residual = math.inf
    converged = False
    n = 0
    while True:
        aux = inner_r_star(utility, w, rates.r)
        d = _tie(subgradient(w, rates, aux), blocks)
        scale = max(float(np.mean(rates.r)), tol.num_tol)
        residual = float(np.max(np.abs(d))) / scale
        g_val = _safe_value(utility, rates.r)
        gap = G - g_val
        if gap < -1e-9 * max(1.0, abs(G)):
            log.warning("weak duality violated by %.3e", -gap)
        if best is None or gap < best[0]:
            best = (gap, w.copy(), duals, powers, rates, aux, g_val, residual)
        if residual <= conv_tol:
            converged = True
            trace.append((n, g_val, gap, residual * scale, 0.0))
            break
        if n >= max_outer:
            trace.append((n, g_val, gap, residual * scale, 0.0))
            break
        n += 1
        dn = float(np.max(np.abs(d)))
        mu0 = 0.5 / dn
        accepted = False
        if stalls < max_stalls:
            # never start above twice the last accepted step
            mu = mu0 if mu_last is None else min(mu0, mu_last / shrink)
            for _ in range(max_backtracks):
                w_new = snap_ties(_tie(update_weights(w, d, mu, utility, w_floor).w, blocks), tie_tol)
                G_new, duals_n, powers_n, rates_n = evaluate(w_new, powers.q)
                if G_new <= G - armijo * float(np.dot(d, w - w_new)):
                    accepted = True
                    mu_last = mu
                    break
                mu *= shrink
            if not accepted:
                stalls += 1
                log.debug("line search stalled at outer iteration %d", n)
        if not accepted:
            mu = mu0 / math.sqrt(n)
            w_new = snap_ties(_tie(update_weights(w, d, mu, utility, w_floor).w, blocks), tie_tol)
            G_new, duals_n, powers_n, rates_n = evaluate(w_new, powers.q)
        trace.append((n - 1, g_val, gap, dn, mu))
        w, G, duals, powers, rates = w_new, G_new, duals_n, powers_n, rates_n

    if not converged:
        gap, w, duals, powers, rates, aux, g_val, residual = best
        msg = f"fairness loop not converged after {max_outer} outer iterations"
        if raise_on_failure:
            raise ConvergenceError(msg, residual=residual, trace=trace)
        log.warning("%s (residual %.3e)", msg, residual)
    return FairnessResult(Weights(w), rates, aux, duals, powers, g_val, converged, n,
                          residual, blocks, trace)


def solve_system(scenario: Scenario, utility: Utility, lambda_mode: str = "sum_power_relax",
                 executor=None, **kwargs) -> list:
    """Solve every cooperation cluster independently, in cluster order."""
    problems = all_cluster_problems(scenario)

    def run(p):
        return solve_fairness(p, utility, lambda_mode, **kwargs)

    if executor is None:
        return [run(p) for p in problems]
    return list(executor.map(run, problems))


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def write_convergence_csv(path, trace):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n", "utility", "gap", "step"])
        for n, g_val, gap, _, step in trace:
            wr.writerow([n, f"{g_val:.12g}", f"{gap:.12g}", f"{step:.12g}"])


def write_rates_csv(path, problems, results, units: str = "bits", column: Optional[str] = None):
    """One row per group: cluster index, global group index, rate."""
    if units not in ("bits", "nats"):
        raise ValueError("units must be 'bits' or 'nats'")
    column = column or f"rate_{units}"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["cluster", "group", column])
        for ell, (p, res) in enumerate(zip(problems, results)):
            r = res.rates.to_bits().r if units == "bits" else res.rates.r
            for k, grp in enumerate(p.group_index):
                wr.writerow([ell, grp, f"{r[k]:.12g}"])
