"""Finite-N oracle: random channels, exact dual-MAC rates and MMSEs.

Every quantity here is computed from explicit Gaussian channel draws, so it
serves as an independent check of the deterministic equivalents in
:mod:`cellrate.limitcore`.  It also hosts the finite-N power optimization
and the slot-by-slot dynamic scheduler driven by virtual queues.

Randomness is organized per trial: trial ``t`` of a run seeded with ``s``
uses ``SeedSequence(s, spawn_key=(t,))``.  Results are reduced in trial
order, so they do not depend on how trials are spread over workers.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .fairness import Utility
from .geometry import ClusterProblem
from .limitcore import (DEFAULT_TOL, DualVars, PowerAllocation, RatePoint, Tolerances, Weights,
                        power_iteration, tie_averaged_rates, weighted_avg_sum_rate, _initial_powers,
                        _stage_masks, _unsort)

log = logging.getLogger(__name__)

# draws processed together; fixed so that sums never depend on thread count
CHUNK = 16


@dataclass(frozen=True)
class ChannelDraw:
    """Raw unit-variance fading blocks ``H[m, k]`` of shape ``(gamma*N, N)``."""

    blocks: np.ndarray  # (B, A, gamma*N, N) complex
    N: int
    seed: Optional[int] = None
    trial: Optional[int] = None


@dataclass
class VirtualQueues:
    """Per-user backlogs ``U[k, i]`` with the arrival controls ``V`` and ``A_max``."""

    U: np.ndarray
    V: float
    A_max: float

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        if np.any(self.U < 0):
            raise ValueError("queue backlogs must be nonnegative")
        if not self.V > 0 or self.A_max < 0:
            raise ValueError("need V > 0 and A_max >= 0")

    def step(self, rates, arrivals):
        """``U <- [U - R]_+ + a``."""
        self.U = np.maximum(self.U - rates, 0.0) + arrivals
        return self.U


@dataclass
class FiniteNResult:
    powers: PowerAllocation
    iterations: int
    ratio_residual: float
    zero_set_violation: float


@dataclass
class SchedulerResult:
    """Dynamic scheduler output; arrays indexed ``[t, k, i]``."""

    time_avg_rates: np.ndarray  # (A, N)
    queues: np.ndarray          # (T, A, N) backlog after slot t
    inst_rates: np.ndarray      # (T, A, N)
    avg_rates: np.ndarray       # (T, A, N) running averages
    A_max: float
    V: float

    @property
    def group_rates(self) -> np.ndarray:
        return self.time_avg_rates.mean(axis=1)


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------

def antennas_per_bs(gamma: float, N: int) -> int:
    if N < 1:
        raise ValueError("N must be at least 1")
    n = gamma * N
    if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
        raise ValueError(f"gamma*N = {n} is not a positive integer")
    return int(round(n))


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """i.i.d. CN(0, 1) entries."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def draw_channel(problem: ClusterProblem, N: int, rng=None, *, seed: Optional[int] = None,
                 trial: Optional[int] = None) -> ChannelDraw:
    """One realization of all ``B x A`` fading blocks.

    Pass either a ``numpy`` Generator or ``seed`` and ``trial``.
    """
    gN = antennas_per_bs(problem.gamma, N)
    if rng is None:
        if seed is None:
            raise ValueError("need an rng or a seed")
        rng = trial_rng(seed, 0 if trial is None else trial)
    blocks = complex_normal(rng, (problem.B, problem.A, gN, N))
    return ChannelDraw(blocks, N, seed, trial)


def composite_channel(draw: ChannelDraw, problem: ClusterProblem, duals: DualVars) -> np.ndarray:
    """``Hbar = Sigma^{-1/2} Htilde / sqrt(N)`` as a ``(B*gamma*N, A*N)`` matrix."""
    lam = duals.lam
    if np.any(lam <= 0):
        raise ValueError("multipliers must be positive")
    B, A, gN, N = draw.blocks.shape
    scale = problem.beta / np.sqrt(lam[:, None] * N)
    H = draw.blocks * scale[:, :, None, None]
    return H.transpose(0, 2, 1, 3).reshape(B * gN, A * N)


def _stack(problem, duals, N, seed, trials):
    return np.array([composite_channel(draw_channel(problem, N, seed=seed, trial=t), problem, duals)
                     for t in trials])


# ---------------------------------------------------------------------------
# exact log-determinants and quadratic forms
# ---------------------------------------------------------------------------

def _quad_terms(H, p, masks, need_d: bool = True):
    """Log-dets and ``diag(H^H Phi^{-1} H)`` for ``Phi = I + H diag(p * mask) H^H``.

    ``H`` is ``(T, n_a, n_u)``, ``p`` is ``(n_u,)`` column powers and
    ``masks`` is ``(S, n_u)``.  Returns ``logdet (T, S)`` and ``d (T, S, n_u)``
    (``None`` unless ``need_d``).  The smaller of the antenna-side and
    user-side factorizations is used.
    """
    T, n_a, n_u = H.shape
    pm = np.asarray(masks, dtype=float) * np.asarray(p, dtype=float)[None, :]  # (S, n_u)
    S = len(pm)
    if n_a <= n_u:
        Hb = H[:, None]
        F = (Hb * pm[None, :, None, :]) @ np.swapaxes(Hb.conj(), -1, -2)
        F += np.eye(n_a)
        L = np.linalg.cholesky(F)
        rhs = np.broadcast_to(Hb, (T, S, n_a, n_u))
    else:
        K = np.swapaxes(H.conj(), -1, -2) @ H
        s = np.sqrt(pm)[None, :, :, None]
        SK = s * K[:, None]
        F = SK * np.swapaxes(s, -1, -2) + np.eye(n_u)
        L = np.linalg.cholesky(F)
        rhs = SK
    logdet = 2.0 * np.sum(np.log(np.real(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)
    if not need_d:
        return logdet, None
    Y = _lower_solve(L, rhs)
    d = np.sum(np.abs(Y) ** 2, axis=-2)
    if n_a > n_u:
        d = np.real(np.einsum("tcc->tc", K))[:, None, :] - d
    return logdet, np.maximum(d, 0.0)


def _lower_solve(L, X):
    """``L^{-1} X`` for a stack of lower-triangular ``L``."""
    n = L.shape[-1]
    if n <= 48:
        return np.linalg.solve(L, X)
    out = np.empty(np.broadcast_shapes(L.shape[:-2], X.shape[:-2]) + X.shape[-2:], dtype=complex)
    for idx in np.ndindex(out.shape[:-2]):
        out[idx] = solve_triangular(L[idx], X[idx], lower=True, check_finite=False)
    return out


def _group_cols(A: int, N: int, masks) -> np.ndarray:
    return np.repeat(np.asarray(masks, dtype=bool), N, axis=-1)


def _col_powers(q, N):
    return np.repeat(np.asarray(q, dtype=float), N)


def _weights_of(problem, weights):
    if weights is None:
        return Weights(np.arange(problem.A, dtype=float))
    return weights if isinstance(weights, Weights) else Weights(weights)


def _draw_log_dets(Hbar, q, N, masks):
    """Normalized log-dets ``(1/N) log|I + sum_l Hbar_l Hbar_l^H Q_l|`` per mask."""
    masks = np.asarray(masks, dtype=bool)
    out = np.zeros(len(masks))
    nz = masks.any(axis=1)
    if np.any(nz):
        A = masks.shape[1]
        ld, _ = _quad_terms(Hbar[None], _col_powers(q, N), _group_cols(A, N, masks[nz]), False)
        out[nz] = ld[0] / N
    return out


def dual_mac_group_rates(draw: ChannelDraw, problem: ClusterProblem, powers: PowerAllocation,
                         duals: DualVars, weights=None) -> np.ndarray:
    """Instantaneous per-user rate of every group (nats), decoding by weight order.

    Exact ties are time-shared over cyclic rotations as in the asymptotic
    evaluation.
    """
    weights = _weights_of(problem, weights)
    Hbar = composite_channel(draw, problem, duals)
    N = draw.N
    rates = tie_averaged_rates(weights, lambda m: _draw_log_dets(Hbar, powers.q, N, m))
    return np.maximum(rates, 0.0)


def _mmse_from(d, q, N, A, stage_masks):
    """MMSE table ``[s, j]`` from quadratic forms ``d[s, c]``."""
    t = d.reshape(d.shape[:-1] + (A, N)).sum(axis=-1) / N
    mm = 1.0 - q[None, :] * t
    mm = np.where(stage_masks, mm, np.nan)
    return mm, t


def mc_mmse(draw: ChannelDraw, problem: ClusterProblem, powers: PowerAllocation, duals: DualVars,
            stage: int, target: int, weights=None) -> float:
    """Per-component MMSE of the group at decoding position ``target``.

    The receiver sees the groups at positions ``stage..A-1``.
    """
    weights = _weights_of(problem, weights)
    A = problem.A
    if not 0 <= stage <= target < A:
        raise ValueError("need 0 <= stage <= target < A")
    order = weights.order
    Hbar = composite_channel(draw, problem, duals)
    masks = _stage_masks(order, [stage])
    _, d = _quad_terms(Hbar[None], _col_powers(powers.q, draw.N), _group_cols(A, draw.N, masks))
    mm, _ = _mmse_from(d[0], powers.q, draw.N, A, masks)
    return float(np.clip(mm[0, order[target]], 0.0, 1.0))


def _map_chunks(fn, trials, executor):
    chunks = [trials[i:i + CHUNK] for i in range(0, len(trials), CHUNK)]
    if executor is None:
        return [fn(c) for c in chunks]
    return list(executor.map(fn, chunks))


def mc_mmse_table(problem: ClusterProblem, powers: PowerAllocation, duals: DualVars, N: int,
                  trials: int, seed: int, weights=None, executor=None):
    """Average MMSE table ``[stage, position]`` (NaN below the diagonal) and its standard error."""
    weights = _weights_of(problem, weights)
    A = problem.A
    order = weights.order
    masks = _stage_masks(order)
    cols = _group_cols(A, N, masks)

    def run(chunk):
        H = _stack(problem, duals, N, seed, chunk)
        _, d = _quad_terms(H, _col_powers(powers.q, N), cols)
        mm, _ = _mmse_from(d, powers.q, N, A, masks[None])
        return mm[:, :, order]

    vals = np.concatenate(_map_chunks(run, list(range(trials)), executor))
    se = vals.std(axis=0, ddof=1) / math.sqrt(trials) if trials > 1 else np.full((A, A), np.nan)
    return vals.mean(axis=0), se


def mc_log_det(problem: ClusterProblem, powers: PowerAllocation, duals: DualVars, stage: int,
               N: int, trials: int, seed: int, weights=None, executor=None):
    """Mean and standard error of the normalized log-det with positions ``stage..A-1``."""
    weights = _weights_of(problem, weights)
    masks = _stage_masks(weights.order, [stage])
    cols = _group_cols(problem.A, N, masks)

    def run(chunk):
        H = _stack(problem, duals, N, seed, chunk)
        ld, _ = _quad_terms(H, _col_powers(powers.q, N), cols, False)
        return ld[:, 0] / N

    vals = np.concatenate(_map_chunks(run, list(range(trials)), executor))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.nan


def mc_ergodic_rates(problem: ClusterProblem, powers: PowerAllocation, duals: DualVars, weights,
                     N: int, trials: int, seed: int, executor=None, return_samples: bool = False):
    """Sample mean and standard error of the instantaneous group rates."""
    if trials < 2:
        raise ValueError("need at least 2 trials for a standard error")

    def run(chunk):
        return np.array([dual_mac_group_rates(draw_channel(problem, N, seed=seed, trial=t),
                                              problem, powers, duals, weights) for t in chunk])

    vals = np.concatenate(_map_chunks(run, list(range(trials)), executor))
    mean = RatePoint(vals.mean(axis=0))
    se = vals.std(axis=0, ddof=1) / math.sqrt(trials)
    if return_samples:
        return mean, se, vals
    return mean, se


# ---------------------------------------------------------------------------
# finite-N power optimization
# ---------------------------------------------------------------------------

def finite_n_power_opt(problem: ClusterProblem, weights, duals: DualVars, N: int, trials: int,
                       seed: int, tol: Tolerances = DEFAULT_TOL, executor=None,
                       max_iter: int = 500) -> FiniteNResult:
    """KKT power iteration with MMSEs averaged over fixed channel draws.

    The draws are held fixed (common random numbers), so the iteration
    maximizes a sample-average objective and settles like its asymptotic
    counterpart.  On non-convergence the best iterate is returned with its
    residual.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    weights = weights if isinstance(weights, Weights) else Weights(weights)
    A = problem.A
    order = weights.order
    deltas = weights.deltas
    Q = duals.budget(problem.bs_powers)
    masks = _stage_masks(order)
    cols = _group_cols(A, N, masks)
    upper = np.triu(np.ones((A, A)))
    chunks = [list(range(i, min(i + CHUNK, trials))) for i in range(0, trials, CHUNK)]
    stacks = [_stack(problem, duals, N, seed, c) for c in chunks]
    cache = {}

    def evaluate(x_pos):
        key = x_pos.tobytes()
        if key not in cache:
            q = _unsort(x_pos, order)

            def run(H):
                ld, d = _quad_terms(H, _col_powers(q, N), cols)
                t = d.reshape(d.shape[:-1] + (A, N)).sum(axis=-1) / N
                return ld.sum(axis=0) / N, t.sum(axis=0)

            parts = list(executor.map(run, stacks)) if executor is not None else [run(H) for H in stacks]
            ld = sum(p[0] for p in parts) / trials
            t = (sum(p[1] for p in parts) / trials)[:, order]  # [stage, position]
            t = t * upper
            num = deltas @ (t * x_pos[None, :])
            marg = deltas @ t
            cache.clear()
            cache[key] = (num, marg, float(np.sum(num)), float(np.dot(deltas, ld)))
        return cache[key]

    eligible = np.cumsum(deltas) > 0
    x0 = _initial_powers(None, order, eligible, Q)
    x, it, ratio, worst, _ = power_iteration(
        lambda x: evaluate(x)[:3], eligible, Q, x0, replace(tol, kkt_tol=max(tol.kkt_tol, 1e-7)),
        max_iter=max_iter, objective=lambda x: evaluate(x)[3], strict=False)
    if ratio > 1e-6:
        log.warning("finite-N power optimization stopped with residual %.3e", ratio)
    return FiniteNResult(PowerAllocation(_unsort(x, order), Q), it, ratio, worst)


# ---------------------------------------------------------------------------
# dynamic scheduler
# ---------------------------------------------------------------------------

def _slot_solve(H, u, Q, tol, max_iter, x_prev=None):
    """Per-user weighted sum-rate maximization on one channel realization.

    ``H`` holds one column per user; returns ``(powers, rates)``.
    """
    n_u = H.shape[1]
    weights = Weights(u if np.any(u > 0) else np.ones(n_u))
    order = weights.order
    deltas = weights.deltas
    masks = _stage_masks(order)
    upper = np.triu(np.ones((n_u, n_u)))
    eligible = np.cumsum(deltas) > 0
    cache = {}

    def evaluate(x_pos):
        key = x_pos.tobytes()
        if key not in cache:
            p = _unsort(x_pos, order)
            ld, d = _quad_terms(H[None], p, masks)
            t = d[0][:, order] * upper
            num = deltas @ (t * x_pos[None, :])
            cache.clear()
            cache[key] = (num, deltas @ t, float(np.sum(num)), float(np.dot(deltas, ld[0])))
        return cache[key]

    x0 = _initial_powers(x_prev, order, eligible, Q)
    x, *_ = power_iteration(lambda x: evaluate(x)[:3], eligible, Q, x0, tol, max_iter=max_iter,
                            objective=lambda x: evaluate(x)[3], strict=False)
    p = _unsort(x, order)

    def log_dets(m):
        out = np.zeros(len(m))
        nz = m.any(axis=1)
        if np.any(nz):
            out[nz] = _quad_terms(H[None], p, m[nz], False)[0][0]
        return out

    rates = np.maximum(tie_averaged_rates(weights, log_dets), 0.0)
    return p, rates


def arrivals(utility: Utility, U: np.ndarray, V: float, A_max: float) -> np.ndarray:
    """Maximizer of ``V g(a) - a.U`` over ``0 <= a <= A_max``."""
    if A_max == 0:
        return np.zeros_like(U)
    if utility.kind == "hfs":
        # g = min(a): raising the common level costs sum(U) per unit
        total = float(np.sum(U))
        level = A_max if V > total else (0.5 * A_max if V == total else 0.0)
        return np.full_like(U, level)
    alpha = 1.0 if utility.is_log else utility.alpha
    with np.errstate(divide="ignore"):
        a = np.where(U > 0, (V / np.where(U > 0, U, 1.0)) ** (1.0 / alpha), np.inf)
    return np.minimum(a, A_max)


def default_a_max(problem: ClusterProblem, tol: Tolerances = DEFAULT_TOL) -> float:
    """Twice the largest asymptotic group rate at equal weights, sum power."""
    _, _, rates = weighted_avg_sum_rate(problem, np.ones(problem.A), DualVars.ones(problem.B), tol)
    return 2.0 * float(np.max(rates.r))


def dynamic_scheduler(problem: ClusterProblem, utility: Utility, N: int, T: int, seed: int,
                      V: Optional[float] = None, A_max: Optional[float] = None, U0=None,
                      slot_tol: float = 1e-6, slot_iter: int = 100) -> SchedulerResult:
    """Virtual-queue fairness scheduler on i.i.d. channel draws (sum power).

    In every slot the users' backlogs act as weights for an instantaneous
    weighted sum-rate maximization, arrivals solve the per-slot utility
    problem in closed form and the backlogs are updated.  Slot ``t`` uses
    the random stream of trial ``t``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    A = problem.A
    if A_max is None:
        A_max = default_a_max(problem)
    if V is None:
        V = 100.0 * A_max
    queues = VirtualQueues(np.zeros((A, N)) if U0 is None else U0, V, A_max)
    duals = DualVars.ones(problem.B)
    Q = duals.budget(problem.bs_powers)
    tol = replace(DEFAULT_TOL, kkt_tol=slot_tol)
    U_hist = np.empty((T, A, N))
    inst = np.empty((T, A, N))
    total = np.zeros((A, N))
    avg = np.empty((T, A, N))
    p_prev = None
    for t in range(T):
        draw = draw_channel(problem, N, seed=seed, trial=t)
        # unnormalized per-user columns: per-user powers sum to Q
        H = composite_channel(draw, problem, duals) * math.sqrt(N)
        p, r = _slot_solve(H, queues.U.ravel(), Q, tol, slot_iter, p_prev)
        p_prev = p
        r = r.reshape(A, N)
        a = arrivals(utility, queues.U, V, A_max)
        queues.step(r, a)
        U_hist[t] = queues.U
        inst[t] = r
        total += r
        avg[t] = total / (t + 1)
    return SchedulerResult(avg[-1].copy(), U_hist, inst, avg, A_max, V)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def write_trials_csv(path, samples, group_index=None):
    """Per-trial group rates: ``trial,group,rate``."""
    samples = np.asarray(samples)
    groups = range(samples.shape[1]) if group_index is None else group_index
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["trial", "group", "rate"])
        for t, row in enumerate(samples):
            for k, v in zip(groups, row):
                wr.writerow([t, k, f"{v:.12g}"])


def write_scheduler_csv(path, result: SchedulerResult, stride: int = 1):
    """Scheduler time series: ``t,k,i,U,inst_rate,avg_rate``."""
    T, A, N = result.queues.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "k", "i", "U", "inst_rate", "avg_rate"])
        for t in range(0, T, stride):
            for k in range(A):
                for i in range(N):
                    wr.writerow([t, k, i, f"{result.queues[t, k, i]:.12g}",
                                 f"{result.inst_rates[t, k, i]:.12g}",
                                 f"{result.avg_rates[t, k, i]:.12g}"])
