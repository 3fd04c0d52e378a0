"""Large-system-limit engine for one cooperation cluster.

Everything here works on deterministic equivalents: the per-stage SINR
fixed point, the input-power optimization for a weighted average sum rate,
the asymptotic log-determinant / group-rate evaluation, and handling of the
per-BS Lagrange multipliers ``lambda``.

Conventions
-----------
* Groups keep their cluster-local index ``0..A-1`` in every public array.
  The decoding order ``pi`` (increasing weights, ties broken by index) is
  applied internally.
* Rates are in nats.
* ``g[m, k] = beta[m, k]**2 / lambda[m]`` is the effective gain profile and
  ``c[m, k] = g[m, k] * Q[k]`` its power-weighted version.

The SINR of group ``j`` when the groups in a set ``S`` are present is
``Gamma_j = gamma * Q_j * sum_m g[m, j] * u_m`` where ``u`` solves
``u_m = 1 / (1 + sum_{l in S} c[m, l] / (1 + Gamma_l))``.  The same ``(u, v)``
pair, ``v = 1 / (1 + Gamma)``, feeds the three-term mutual-information limit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConvergenceError
from .geometry import ClusterProblem, detect_symmetric_blocks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Tolerances:
    fp_tol: float = 1e-10
    kkt_tol: float = 1e-8
    grad_tol: float = 1e-6
    num_tol: float = 1e-9
    max_iter: int = 10_000


DEFAULT_TOL = Tolerances()


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Weights:
    """Nonnegative per-group rate weights with their sorting permutation."""

    w: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "w", w)

    @property
    def order(self) -> np.ndarray:
        """Permutation pi with ``w[pi[0]] <= w[pi[1]] <= ...`` (stable)."""
        return np.argsort(self.w, kind="stable")

    @property
    def deltas(self) -> np.ndarray:
        """Increments ``w[pi[k]] - w[pi[k-1]]`` with ``w[pi[-1]] = 0``."""
        return np.diff(self.w[self.order], prepend=0.0)

    def tie_classes(self):
        """Runs of equal weights along the decoding order (lists of positions)."""
        ws = self.w[self.order]
        runs, start = [], 0
        for p in range(1, len(ws) + 1):
            if p == len(ws) or ws[p] != ws[start]:
                runs.append(list(range(start, p)))
                start = p
        return runs


@dataclass(frozen=True)
class DualVars:
    """Per-BS Lagrange multipliers (all strictly positive)."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise ValueError("Lagrange multipliers must be finite and strictly positive")
        object.__setattr__(self, "lam", lam)

    @classmethod
    def ones(cls, B: int) -> "DualVars":
        return cls(np.ones(B))

    def budget(self, bs_powers) -> float:
        return float(np.dot(self.lam, bs_powers))

    def normalized(self) -> "DualVars":
        return DualVars(self.lam / np.mean(self.lam))


@dataclass(frozen=True)
class PowerAllocation:
    """Dual-uplink group powers ``q`` (cluster-local order) and the budget."""

    q: np.ndarray
    budget: float

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        if np.any(~np.isfinite(q)) or np.any(q < 0):
            raise ValueError("powers must be finite and nonnegative")
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class SinrProfile:
    """Asymptotic SINRs per decoding stage.

    ``gamma_table[k, j]`` is the SINR of the group at decoding position ``j``
    when positions ``k..A-1`` are present; entries with ``j < k`` are NaN.
    ``order`` maps positions to group indices.
    """

    gamma_table: np.ndarray
    order: np.ndarray
    residual: float = 0.0

    @property
    def mmse_table(self) -> np.ndarray:
        return 1.0 / (1.0 + self.gamma_table)


@dataclass(frozen=True)
class RatePoint:
    r: np.ndarray
    units: str = "nats"

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.r, dtype=float))
        if np.any(~np.isfinite(r)) or np.any(r < 0):
            raise ValueError("rates must be finite and nonnegative")
        object.__setattr__(self, "r", r)

    def to_bits(self) -> "RatePoint":
        if self.units == "bits":
            return self
        return RatePoint(self.r / np.log(2.0), "bits")


@dataclass
class Alg1Result:
    powers: PowerAllocation
    iterations: int
    ratio_residual: float
    zero_set_violation: float
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# fixed points
# ---------------------------------------------------------------------------

def _gain_profile(problem: ClusterProblem, duals: DualVars) -> np.ndarray:
    lam = duals.lam
    if lam.shape != (problem.B,):
        raise ValueError(f"expected {problem.B} multipliers, got {lam.shape}")
    return problem.beta ** 2 / lam[:, None]


def _stage_masks(order, stages=None):
    """Boolean (S, A) masks: mask[s, order[p]] is True for p >= stage s."""
    A = len(order)
    stages = range(A) if stages is None else stages
    pos = np.empty(A, dtype=int)
    pos[order] = np.arange(A)
    return np.array([pos >= k for k in stages], dtype=bool).reshape(-1, A)


def _solve_sets(g, q, gamma, masks, tol=DEFAULT_TOL):
    """Solve the ``u`` fixed point for several group subsets at once.

    Returns ``(u, Gamma, residual)`` with ``u`` of shape (S, B) and ``Gamma``
    of shape (S, A); ``Gamma`` is 0 outside each mask.  Successive
    substitution from ``u = 1`` (interference-free SINR) is alternated with
    safeguarded Newton steps on the B-dimensional system.
    """
    masks = np.asarray(masks, dtype=bool)
    S = masks.shape[0]
    B, A = g.shape
    cm = (g * q[None, :])[None, :, :] * masks[:, None, :]
    if S == 0:
        return np.ones((0, B)), np.zeros((0, A)), 0.0

    def parts(u):
        gam = gamma * np.einsum("sba,sb->sa", cm, u)
        v = 1.0 / (1.0 + gam)
        den = 1.0 + np.einsum("sba,sa->sb", cm, v)
        return gam, v, den

    def rel_residual(gam, den):
        gam_next = gamma * np.einsum("sba,sb->sa", cm, 1.0 / den)
        scale = np.maximum(np.abs(gam), 1e-300)
        r = np.where(gam > 0, np.abs(gam_next - gam) / scale, np.abs(gam_next - gam))
        return float(np.max(r)) if r.size else 0.0

    u = np.ones((S, B))
    gam, v, den = parts(u)
    res = rel_residual(gam, den)
    eye = np.eye(B)
    for _ in range(tol.max_iter):
        if res <= tol.fp_tol:
            return u, gam, res
        F = u * den - 1.0
        J = eye[None] * den[:, :, None] - gamma * u[:, :, None] * np.einsum(
            "sia,sa,sja->sij", cm, v ** 2, cm)
        try:
            step = np.linalg.solve(J, F[..., None])[..., 0]
            u_new = u - step
        except np.linalg.LinAlgError:
            u_new = None
        if u_new is None or np.any(~np.isfinite(u_new)) or np.any(u_new <= 0) or np.any(u_new > 1):
            u_new = 1.0 / den
        new = parts(u_new)
        res_new = rel_residual(new[0], new[2])
        if res_new > res:
            # fall back to plain substitution
            u_new = 1.0 / den
            new = parts(u_new)
            res_new = rel_residual(new[0], new[2])
        u, res = u_new, res_new
        gam, v, den = new
    if res <= tol.fp_tol:
        return u, gam, res
    raise ConvergenceError("SINR fixed point did not converge", residual=res)


def _order_of(problem: ClusterProblem, weights) -> np.ndarray:
    if weights is None:
        return np.arange(problem.A)
    if not isinstance(weights, Weights):
        weights = Weights(weights)
    return weights.order


def solve_sinr_fixed_point(problem: ClusterProblem, powers: PowerAllocation, duals: DualVars,
                           stage: int, weights=None, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """SINRs of decoding positions ``stage..A-1`` with those positions present.

    The decoding order comes from ``weights`` (identity when omitted).
    """
    order = _order_of(problem, weights)
    if not 0 <= stage < problem.A:
        raise ValueError(f"stage must be in [0, {problem.A})")
    g = _gain_profile(problem, duals)
    _, gam, _ = _solve_sets(g, powers.q, problem.gamma, _stage_masks(order, [stage]), tol)
    return gam[0, order[stage:]]


def sinr_profile(problem: ClusterProblem, powers: PowerAllocation, duals: DualVars,
                 weights=None, tol: Tolerances = DEFAULT_TOL) -> SinrProfile:
    order = _order_of(problem, weights)
    g = _gain_profile(problem, duals)
    _, gam, res = _solve_sets(g, powers.q, problem.gamma, _stage_masks(order), tol)
    table = gam[:, order]
    A = problem.A
    table[np.tril_indices(A, -1)] = np.nan
    return SinrProfile(table, order, res)


def sinr_residual(problem: ClusterProblem, powers: PowerAllocation, duals: DualVars,
                  profile: SinrProfile) -> float:
    """Largest relative violation of the SINR fixed-point equations."""
    g = _gain_profile(problem, duals)[:, profile.order]
    q = powers.q[profile.order]
    A = problem.A
    worst = 0.0
    for k in range(A):
        G = profile.gamma_table[k, k:]
        den = 1.0 + (g[:, k:] * q[k:]) @ (1.0 / (1.0 + G))
        rhs = problem.gamma * q[k:] * ((g[:, k:] / den[:, None]).sum(axis=0))
        r = np.abs(rhs - G) / np.maximum(np.abs(G), 1e-300)
        r = np.where(G > 0, r, np.abs(rhs - G))
        worst = max(worst, float(np.max(r)))
    return worst


# ---------------------------------------------------------------------------
# log-determinants and rates
# ---------------------------------------------------------------------------

def _log_dets_for_masks(g, q, gamma, masks, tol=DEFAULT_TOL) -> np.ndarray:
    """Limit of ``(1/N) E log|I + sum_{l in S} Hbar_l Hbar_l^H Q_l|`` per mask."""
    u, gam, _ = _solve_sets(g, q, gamma, masks, tol)
    v = 1.0 / (1.0 + gam)
    term1 = np.sum(np.log1p(gam), axis=1)
    term2 = -gamma * np.sum(np.log(u), axis=1)
    term3 = np.sum(gam * v, axis=1)
    return np.maximum(term1 + term2 - term3, 0.0)


def asymptotic_log_det(problem: ClusterProblem, powers: PowerAllocation, duals: DualVars,
                       stage: int, weights=None, tol: Tolerances = DEFAULT_TOL) -> float:
    """Large-system log-det with decoding positions ``stage..A-1`` present.

    ``stage == A`` denotes the empty set and returns 0.
    """
    order = _order_of(problem, weights)
    if stage == problem.A:
        return 0.0
    if not 0 <= stage < problem.A:
        raise ValueError(f"stage must be in [0, {problem.A}]")
    g = _gain_profile(problem, duals)
    return float(_log_dets_for_masks(g, powers.q, problem.gamma,
                                     _stage_masks(order, [stage]), tol)[0])


def min_norm_point(oracle, dim: int, tol: float = 1e-12, max_iter: int = 1000) -> np.ndarray:
    """Wolfe's minimum-norm-point algorithm over a polytope given by a linear oracle.

    ``oracle(y)`` must return a vertex minimizing ``<y, x>``.
    """
    x = oracle(np.zeros(dim))
    S = x[None, :]
    lam = np.ones(1)
    for _ in range(max_iter):
        q = oracle(x)
        if x @ x - x @ q <= tol * max(1.0, float(q @ q)):
            break
        if np.any(np.all(np.abs(S - q) <= tol * max(1.0, float(np.max(np.abs(q)))), axis=1)):
            break
        S = np.vstack([S, q])
        lam = np.append(lam, 0.0)
        while True:
            k = len(S)
            K = np.ones((k + 1, k + 1))
            K[:k, :k] = S @ S.T
            K[k, k] = 0.0
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            a = np.linalg.lstsq(K, rhs, rcond=None)[0][:k]
            if np.all(a > tol):
                lam = a
                break
            neg = a <= tol
            theta = np.min(lam[neg] / (lam[neg] - a[neg]))
            lam = theta * a + (1.0 - theta) * lam
            keep = lam > tol
            S, lam = S[keep], lam[keep] / np.sum(lam[keep])
        x = lam @ S
    return x


def tie_averaged_rates(weights: "Weights", log_dets, target=None) -> np.ndarray:
    """Per-group rates from nested log-determinants under successive decoding.

    ``log_dets(masks)`` must return the log-det for each boolean group mask
    (all-False gives 0).  Within a run of exactly equal weights every
    decoding order of the run is optimal and the run's rates may be any
    point of the face spanned by those orders.  Without ``target`` the
    orders are time-shared over the run's cyclic rotations; with ``target``
    the face point closest to ``target`` is returned.  Either way every
    weighted sum is unchanged and exchangeable groups get equal rates.
    """
    base = weights.order
    A = len(base)
    rates = np.zeros(A)
    for cls in weights.tie_classes():
        members = base[cls]
        later = np.zeros(A, dtype=bool)
        later[base[cls[-1] + 1:]] = True
        t = len(members)
        if t == 1:
            m = later.copy()
            m[members] = True
            ld = np.asarray(log_dets(np.array([m, later])), dtype=float)
            rates[members] = ld[0] - ld[1]
            continue
        if target is not None:
            rates[members] = _nearest_face_point(members, later, log_dets,
                                                 np.asarray(target, dtype=float)[members])
            continue
        masks = []
        for shift in range(t):
            rot = np.roll(members, -shift)
            for i in range(t):
                m = later.copy()
                m[rot[i:]] = True
                masks.append(m)
        masks.append(later)
        ld = np.asarray(log_dets(np.array(masks)), dtype=float)
        acc = np.zeros(A)
        for shift in range(t):
            rot = np.roll(members, -shift)
            block = np.append(ld[shift * t:(shift + 1) * t], ld[-1])
            acc[rot] += block[:-1] - block[1:]
        rates[members] = acc[members] / t
    return rates


def _nearest_face_point(members, later, log_dets, target):
    """Point of the tie face closest to ``target`` (members order)."""
    t = len(members)
    A = len(later)

    def vertex(order_idx):
        # order_idx[0] is decoded last, i.e. sees only ``later`` as noise
        masks = []
        for i in range(t + 1):
            m = later.copy()
            m[members[order_idx[:i]]] = True
            masks.append(m)
        ld = np.asarray(log_dets(np.array(masks).reshape(-1, A)), dtype=float)
        out = np.empty(t)
        out[order_idx] = np.diff(ld)
        return out

    def oracle(y):
        return vertex(np.argsort(y, kind="stable")) - target

    return min_norm_point(oracle, t) + target


def group_rates(problem: ClusterProblem, powers: PowerAllocation, duals: DualVars,
                weights=None, tol: Tolerances = DEFAULT_TOL, target=None) -> RatePoint:
    """Asymptotic per-user rate of every group under successive decoding.

    Decoding follows increasing ``weights`` (identity order when omitted);
    see :func:`tie_averaged_rates` for exact ties and ``target``.
    """
    if weights is None:
        weights = Weights(np.arange(problem.A, dtype=float))
    elif not isinstance(weights, Weights):
        weights = Weights(weights)
    g = _gain_profile(problem, duals)

    def log_dets(masks):
        out = np.zeros(len(masks))
        nz = masks.any(axis=1)
        if np.any(nz):
            out[nz] = _log_dets_for_masks(g, powers.q, problem.gamma, masks[nz], tol)
        return out

    rates = tie_averaged_rates(weights, log_dets, target)
    if np.min(rates) < -tol.num_tol * max(1.0, float(np.max(np.abs(rates)))):
        raise ConvergenceError("negative group rate beyond tolerance", residual=float(np.min(rates)))
    return RatePoint(np.maximum(rates, 0.0))


def weighted_objective(problem: ClusterProblem, powers: PowerAllocation, duals: DualVars,
                       weights, tol: Tolerances = DEFAULT_TOL) -> float:
    """``sum_k Delta_k * logdet(stage k)``, i.e. the weighted sum rate for fixed powers."""
    weights = weights if isinstance(weights, Weights) else Weights(weights)
    g = _gain_profile(problem, duals)
    ld = _log_dets_for_masks(g, powers.q, problem.gamma, _stage_masks(weights.order), tol)
    return float(np.dot(weights.deltas, ld))


# ---------------------------------------------------------------------------
# Algorithm 1
# ---------------------------------------------------------------------------

def _kkt_terms(g, gamma, x, order, deltas, tol):
    """Numerators, unit-power marginal terms and denominator of the power update.

    Everything is indexed by decoding position.
    """
    masks = _stage_masks(order)
    u, gam, _ = _solve_sets(g, x, gamma, masks, tol)
    gp = gam[:, order]
    frac = gp / (1.0 + gp)
    upper = np.triu(np.ones((len(order), len(order))))  # k <= j
    num = deltas @ (frac * upper)
    # unit[k, j] = gamma * sum_m g[m, pi_j] u_m: SINR per unit power at stage k
    unit = gamma * (u @ g)[:, order]
    marg = deltas @ (unit * upper)
    return num, marg, float(np.sum(num))


def power_iteration(terms, eligible, Q, x0, tol: Tolerances = DEFAULT_TOL,
                    prune_frac: float = 1e-7, max_reactivations: Optional[int] = None,
                    record_trace: bool = False, labels=None, max_iter: Optional[int] = None,
                    objective=None, strict: bool = True):
    """Fixed-point power update ``x_j <- Q * num_j / sum(num)`` with an active set.

    ``terms(x)`` returns ``(num, marg, den)`` indexed by decoding position:
    ``num_j = sum_{k<=j} Delta_k (1 - mmse_j^{(k)})``, ``marg_j`` the
    marginal utility of position ``j`` per unit power at zero power, and
    ``den = sum(num)``.  Positions whose power falls below
    ``prune_frac * Q`` while ``Q * marg_j <= den`` are switched off; at the
    end switched-off positions failing that test are switched back on.

    With ``objective`` the best iterate seen is returned; with
    ``strict=False`` exhausting ``max_iter`` is not an error.

    Returns ``(x, iterations, ratio_residual, zero_violation, trace)``.
    """
    A = len(x0)
    max_iter = tol.max_iter if max_iter is None else max_iter
    labels = np.arange(A) if labels is None else labels
    x = np.asarray(x0, dtype=float).copy()
    active = eligible & (x > 0)
    trace = []
    reactivations = 0
    max_react = A if max_reactivations is None else max_reactivations
    best_x, best_val = x.copy(), (objective(x) if objective else None)
    it = 0
    settled = False
    while True:
        settled = False
        while it < max_iter:
            it += 1
            num, marg, den = terms(x)
            if not den > 0:
                break
            x_new = np.where(active, Q * num / den, 0.0)
            x_new = Q * x_new / np.sum(x_new)
            prune = active & (x_new < prune_frac * Q) & (Q * marg <= den)
            if np.any(prune) and np.any(active & ~prune):
                active = active & ~prune
                x_new[prune] = 0.0
                x_new = Q * x_new / np.sum(x_new)
            change = float(np.max(np.abs(x_new - x)))
            if record_trace:
                for p in range(A):
                    trace.append((it, int(labels[p]), float(x_new[p]), change))
            x = x_new
            if objective is not None:
                val = objective(x)
                if val > best_val:
                    best_x, best_val = x.copy(), val
            if change <= tol.kkt_tol * Q:
                settled = True
                break
        num, marg, den = terms(x)
        ratio_res = float(np.max(np.abs(np.where(active, x - Q * num / den, 0.0)))) / Q
        off = eligible & ~active
        viol = np.where(off, (Q * marg - den) / den, -np.inf)
        worst = float(np.max(viol)) if np.any(off) else 0.0
        if worst > tol.kkt_tol and reactivations < max_react and it < max_iter:
            p = int(np.argmax(viol))
            active[p] = True
            x[p] = Q / A
            x = Q * x / np.sum(x)
            reactivations += 1
            continue
        break
    if strict and (not settled or ratio_res > tol.kkt_tol):
        raise ConvergenceError("power optimization did not settle", residual=ratio_res, trace=trace)
    if objective is not None and best_val > objective(x):
        x = best_x
    return x, it, ratio_res, max(worst, 0.0), trace


def optimize_powers_alg1(problem: ClusterProblem, weights, duals: DualVars,
                         tol: Tolerances = DEFAULT_TOL, q_init=None,
                         record_trace: bool = False, prune_frac: float = 1e-7) -> Alg1Result:
    """Maximize the weighted asymptotic sum rate over group powers.

    Iterates the KKT ratio update with asymptotic MMSEs taken from the SINR
    fixed point, switching off groups whose zero-power marginal gain does
    not reach the multiplier (see :func:`power_iteration`).  ``q_init``
    (cluster-local order) warm-starts the iteration; the default start is
    ``Q / A`` on every group that carries weight.
    """
    weights = weights if isinstance(weights, Weights) else Weights(weights)
    if not np.any(weights.w > 0):
        raise ValueError("at least one weight must be positive")
    A = problem.A
    if weights.w.shape != (A,):
        raise ValueError(f"expected {A} weights")
    order = weights.order
    deltas = weights.deltas
    g = _gain_profile(problem, duals)
    Q = duals.budget(problem.bs_powers)
    gamma = problem.gamma
    # positions with zero cumulative weight never receive power
    eligible = np.cumsum(deltas) > 0
    x = _initial_powers(q_init, order, eligible, Q)

    def terms(x_pos):
        return _kkt_terms(g, gamma, _unsort(x_pos, order), order, deltas, tol)

    x, it, ratio_res, worst, trace = power_iteration(
        terms, eligible, Q, x, tol, prune_frac=prune_frac, record_trace=record_trace, labels=order)
    return Alg1Result(PowerAllocation(_unsort(x, order), Q), it, ratio_res, worst, trace)


def _initial_powers(q_init, order, eligible, Q):
    A = len(order)
    if q_init is None:
        return np.where(eligible, Q / np.count_nonzero(eligible), 0.0)
    x = np.asarray(q_init, dtype=float)[order].copy()
    x[~eligible] = 0.0
    if not np.sum(x) > 0:
        x = np.where(eligible, 1.0, 0.0)
    x = np.where(eligible & (x <= 0), np.sum(x) * 1e-3 / A, x)
    return Q * x / np.sum(x)


def _unsort(x_pos, order):
    out = np.empty_like(x_pos)
    out[order] = x_pos
    return out


def kkt_check(problem: ClusterProblem, weights, duals: DualVars, powers: PowerAllocation,
              tol: Tolerances = DEFAULT_TOL):
    """Return ``(ratio_residual, zero_set_violation, budget_gap)``.

    ``ratio_residual`` is the worst ``|Q_j - Q num_j / sum(num)| / Q`` over
    groups with positive power; ``zero_set_violation`` the worst relative
    excess of ``Q * marginal_j`` over ``sum(num)`` for zero-power groups that
    carry weight (<= 0 means satisfied); ``budget_gap`` is
    ``|sum(Q_j) - Q| / Q``.
    """
    weights = weights if isinstance(weights, Weights) else Weights(weights)
    order = weights.order
    deltas = weights.deltas
    g = _gain_profile(problem, duals)
    Q = duals.budget(problem.bs_powers)
    num, marg, den = _kkt_terms(g, problem.gamma, powers.q, order, deltas, tol)
    x = powers.q[order]
    eligible = np.cumsum(deltas) > 0
    on = x > 0
    ratio = float(np.max(np.abs(np.where(on, x - Q * num / den, 0.0)))) / Q
    off = eligible & ~on
    zero = float(np.max((Q * marg[off] - den) / den)) if np.any(off) else -np.inf
    return ratio, zero, abs(float(np.sum(powers.q)) - Q) / Q


# ---------------------------------------------------------------------------
# weighted sum rate and lambda
# ---------------------------------------------------------------------------

def weighted_avg_sum_rate(problem: ClusterProblem, weights, duals: DualVars,
                          tol: Tolerances = DEFAULT_TOL, q_init=None, target=None):
    """``G_W(lambda)``: optimal weighted sum rate with its powers and rates.

    ``target`` selects the rate point among tied weights (see
    :func:`tie_averaged_rates`); it never changes the returned value.
    """
    weights = weights if isinstance(weights, Weights) else Weights(weights)
    Q = duals.budget(problem.bs_powers)
    if not np.any(weights.w > 0):
        zeros = np.zeros(problem.A)
        return 0.0, PowerAllocation(zeros, Q), RatePoint(zeros)
    res = optimize_powers_alg1(problem, weights, duals, tol, q_init=q_init)
    rates = group_rates(problem, res.powers, duals, weights, tol, target)
    value = float(np.dot(weights.w, rates.r))
    return value, res.powers, rates


def _g_value(problem, weights, lam, tol, q_init=None):
    duals = DualVars(lam)
    if q_init is not None:
        q_init = np.asarray(q_init, dtype=float)
    value, _, _ = weighted_avg_sum_rate(problem, weights, duals, tol, q_init=q_init)
    return value


def grad_lambda_numeric(problem: ClusterProblem, weights, duals: DualVars, eps: float = 1e-4,
                        tol: Tolerances = DEFAULT_TOL, executor=None, stencil: int = 3) -> np.ndarray:
    """Central-difference gradient of ``G_W`` with respect to each ``lambda_m``.

    ``stencil=5`` uses the fourth-order five-point formula instead.  With an
    ``executor`` the 2B (or 4B) evaluations run concurrently; the result does
    not depend on it.
    """
    lam = duals.lam
    if not eps > 0 or eps >= np.min(lam) / (2 if stencil == 5 else 1):
        raise ValueError("eps must be positive and smaller than every lambda")
    B = problem.B
    offsets = (1.0, -1.0) if stencil == 3 else (2.0, 1.0, -1.0, -2.0)
    points = []
    for m in range(B):
        for o in offsets:
            l2 = lam.copy()
            l2[m] += o * eps
            points.append(l2)

    def run(l2):
        return _g_value(problem, weights, l2, tol)

    vals = list(executor.map(run, points)) if executor is not None else [run(p) for p in points]
    vals = np.array(vals).reshape(B, len(offsets))
    if stencil == 3:
        return (vals[:, 0] - vals[:, 1]) / (2.0 * eps)
    return (-vals[:, 0] + 8.0 * vals[:, 1] - 8.0 * vals[:, 2] + vals[:, 3]) / (12.0 * eps)


def symmetry_failure(problem: ClusterProblem, weights=None, tolerance: float = 1e-9):
    """Why the symmetric shortcut does not apply, or ``None`` if it does."""
    p = problem.bs_powers
    if np.any(np.abs(p - p[0]) > tolerance * np.max(p)):
        return "BS powers are not all equal"
    if problem.A % problem.B:
        return f"B={problem.B} does not divide A={problem.A}"
    blocks = detect_symmetric_blocks(problem, tolerance)
    if blocks is None:
        return "no partition into strongly symmetric blocks exists"
    if weights is not None:
        w = weights.w if isinstance(weights, Weights) else np.asarray(weights, dtype=float)
        for blk in blocks:
            if np.any(w[list(blk)] != w[blk[0]]):
                return f"weights are not constant on block {blk}"
    return None


def optimize_lambda(problem: ClusterProblem, weights, mode: str = "sum_power_relax",
                    tol: Tolerances = DEFAULT_TOL, eps: float = 1e-4, max_steps: int = 500,
                    alpha_ls: float = 0.3, beta_ls: float = 0.5, step0: float = 0.1) -> DualVars:
    """Choose the per-BS multipliers.

    ``sum_power_relax`` and ``symmetric_shortcut`` return all ones (the
    latter after checking the symmetry conditions).  ``gradient_descent``
    minimizes ``G_W`` by backtracking gradient steps, keeping the mean of
    ``lambda`` at 1.
    """
    B = problem.B
    if mode == "sum_power_relax":
        return DualVars.ones(B)
    if mode == "symmetric_shortcut":
        why = symmetry_failure(problem, weights)
        if why is not None:
            raise ValueError(f"symmetric shortcut not applicable: {why}")
        return DualVars.ones(B)
    if mode != "gradient_descent":
        raise ValueError(f"unknown lambda mode {mode!r}")
    if B == 1:
        return DualVars.ones(1)
    lam = np.ones(B)
    G = _g_value(problem, weights, lam, tol)
    grad = np.zeros(B)
    for _ in range(max_steps):
        grad = grad_lambda_numeric(problem, weights, DualVars(lam), eps, tol)
        if np.max(np.abs(grad)) <= tol.grad_tol:
            return DualVars(lam)
        t = step0
        accepted = False
        while t > 1e-12:
            cand = lam - t * grad
            if np.all(cand > 2 * eps):
                cand = cand / np.mean(cand)
                G_new = _g_value(problem, weights, cand, tol)
                if G_new <= G - alpha_ls * t * float(np.dot(grad, grad)):
                    accepted = True
                    break
            t *= beta_ls
        if not accepted:
            break
        lam, G = cand, G_new
    res = float(np.max(np.abs(grad)))
    if res <= tol.grad_tol:
        return DualVars(lam)
    raise ConvergenceError("lambda descent stalled", residual=res)


def write_sinr_csv(path, profile: SinrProfile):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "position", "group", "sinr", "mmse"])
        A = len(profile.order)
        for k in range(A):
            for j in range(k, A):
                G = profile.gamma_table[k, j]
                w.writerow([k, j, int(profile.order[j]), f"{G:.12g}", f"{1.0 / (1.0 + G):.12g}"])


def write_alg1_trace_csv(path, trace):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "j", "Q_j", "residual"])
        for it, j, qj, res in trace:
            w.writerow([it, j, f"{qj:.12g}", f"{res:.12g}"])
