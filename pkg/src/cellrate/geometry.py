"""Cellular layouts, pathloss gains and per-cluster problem reduction.

A :class:`Scenario` holds base-station (BS) and user-group positions, the
cooperation-cluster partition and the pathloss model.  :func:`gain_matrix`
turns it into linear amplitude gains, and :func:`cluster_problem` reduces one
cluster to a noise-normalized :class:`ClusterProblem` in which inter-cluster
interference (ICI) has been folded into the per-group noise floor.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError

SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class PathlossModel:
    """Log-distance pathloss with an optional sector antenna pattern.

    ``PL_dB(d) = fixed_offset_db + exponent_coeff_db_per_decade * log10(d / d_ref)``
    with ``d`` clamped from below at ``min_distance_km``.  For sectored
    antennas the attenuation ``min(12 (theta / beamwidth_3db)^2, front_to_back)``
    is added on top.
    """

    fixed_offset_db: float = 130.19
    exponent_coeff_db_per_decade: float = 37.6
    reference_distance_km: float = 1.0
    min_distance_km: float = 0.036
    antenna_pattern: str = "omni"
    front_to_back_db: float = 25.0
    beamwidth_3db_deg: float = 70.0

    def __post_init__(self):
        if not (self.reference_distance_km > 0 and self.min_distance_km > 0):
            raise ConfigError("pathloss distances must be positive")
        if self.antenna_pattern not in ("omni", "sector"):
            raise ConfigError(f"unknown antenna pattern {self.antenna_pattern!r}")
        if self.antenna_pattern == "sector" and not self.beamwidth_3db_deg > 0:
            raise ConfigError("beamwidth_3db_deg must be positive")


@dataclass
class Scenario:
    """A full network: positions, powers, clusters and pathloss model.

    ``clusters`` is a list of ``(bs_indices, group_indices)`` pairs.  When
    ``alpha`` is given (explicit layouts) it overrides the geometric gains.
    """

    bs_positions: np.ndarray
    bs_orientations: np.ndarray
    group_positions: np.ndarray
    gamma: float
    bs_powers: np.ndarray
    clusters: list
    pathloss_params: PathlossModel = field(default_factory=PathlossModel)
    wraparound: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None

    def __post_init__(self):
        self.bs_powers = np.asarray(self.bs_powers, dtype=float)
        self.clusters = [(tuple(int(m) for m in bs), tuple(int(k) for k in gr))
                         for bs, gr in self.clusters]
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if np.any(~np.isfinite(self.bs_powers)) or np.any(self.bs_powers <= 0):
            raise ConfigError("every BS power must be positive and finite")
        M, K = self.n_bs, self.n_groups
        if len(self.bs_powers) != M:
            raise ConfigError(f"expected {M} BS powers, got {len(self.bs_powers)}")
        _check_partition([bs for bs, _ in self.clusters], M, "BS")
        _check_partition([gr for _, gr in self.clusters], K, "group")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=float)
            if self.alpha.shape != (M, K):
                raise ConfigError(f"alpha must be {M}x{K}, got {self.alpha.shape}")
            if np.any(~np.isfinite(self.alpha)) or np.any(self.alpha < 0):
                raise ConfigError("alpha entries must be finite and nonnegative")

    @property
    def n_bs(self) -> int:
        if self.alpha is not None and len(self.bs_positions) == 0:
            return self.alpha.shape[0]
        return len(self.bs_positions)

    @property
    def n_groups(self) -> int:
        if self.alpha is not None and len(self.group_positions) == 0:
            return self.alpha.shape[1]
        return len(self.group_positions)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def cluster_of_group(self, k: int) -> int:
        for ell, (_, groups) in enumerate(self.clusters):
            if k in groups:
                return ell
        raise IndexError(f"group {k} is in no cluster")


def _check_partition(parts, n, what):
    seen = [i for part in parts for i in part]
    if any(len(p) == 0 for p in parts):
        raise ConfigError(f"every cluster needs at least one {what}")
    if sorted(seen) != list(range(n)):
        raise ConfigError(f"cluster {what} sets must partition 0..{n - 1}")


@dataclass(frozen=True)
class GainMatrix:
    """M x K linear amplitude gains ``alpha[m, k]`` from BS m to group k."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim != 2 or np.any(~np.isfinite(a)) or np.any(a < 0):
            raise ValueError("alpha must be a finite nonnegative matrix")
        object.__setattr__(self, "alpha", a)


@dataclass(frozen=True)
class ClusterProblem:
    """Noise-normalized single-cluster instance.

    Attributes
    ----------
    beta : ndarray, shape (B, A)
        Effective amplitude gains ``alpha / sigma``.
    bs_powers : ndarray, shape (B,)
        Per-BS power budgets.
    gamma : float
        BS antennas per user-group size.
    bs_index, group_index : tuple of int
        Global indices of the cluster's BSs and groups.
    """

    beta: np.ndarray
    bs_powers: np.ndarray
    gamma: float
    bs_index: tuple = ()
    group_index: tuple = ()

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        powers = np.atleast_1d(np.asarray(self.bs_powers, dtype=float))
        if np.any(~np.isfinite(beta)) or np.any(beta < 0):
            raise ValueError("beta entries must be finite and nonnegative")
        if beta.shape[0] < 1 or beta.shape[1] < 1:
            raise ValueError("a cluster needs at least one BS and one group")
        if powers.shape != (beta.shape[0],):
            raise ValueError("one power per BS is required")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "bs_powers", powers)
        if not self.bs_index:
            object.__setattr__(self, "bs_index", tuple(range(beta.shape[0])))
        if not self.group_index:
            object.__setattr__(self, "group_index", tuple(range(beta.shape[1])))

    @property
    def B(self) -> int:
        return self.beta.shape[0]

    @property
    def A(self) -> int:
        return self.beta.shape[1]


# ---------------------------------------------------------------------------
# pathloss
# ---------------------------------------------------------------------------

def pathloss_gain(model: PathlossModel, distance_km, angle_off_boresight_deg=0.0):
    """Linear amplitude gain ``10 ** (-(PL_dB + A_dB) / 20)``.

    Works elementwise on arrays.  Distances below ``model.min_distance_km``
    are clamped, never rejected.
    """
    d = np.asarray(distance_km, dtype=float)
    theta = np.asarray(angle_off_boresight_deg, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(~np.isfinite(theta)):
        raise ValueError("distance and angle must be finite")
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    d = np.maximum(d, model.min_distance_km)
    loss_db = (model.fixed_offset_db
               + model.exponent_coeff_db_per_decade * np.log10(d / model.reference_distance_km))
    loss_db = loss_db + sector_attenuation_db(model, theta)
    out = 10.0 ** (-loss_db / 20.0)
    return float(out) if out.ndim == 0 else out


def sector_attenuation_db(model: PathlossModel, angle_deg):
    theta = np.asarray(angle_deg, dtype=float)
    if model.antenna_pattern == "omni":
        return np.zeros_like(theta)
    theta = (theta + 180.0) % 360.0 - 180.0
    return np.minimum(12.0 * (theta / model.beamwidth_3db_deg) ** 2, model.front_to_back_db)


def _min_image(delta, wraparound):
    """Shortest displacement vectors under a torus with the given lattice."""
    if wraparound is None:
        return delta
    a1, a2 = np.asarray(wraparound, dtype=float)
    best = delta.copy()
    best_d2 = np.sum(delta ** 2, axis=-1)
    for i, j in itertools.product(range(-2, 3), repeat=2):
        if i == 0 and j == 0:
            continue
        cand = delta + i * a1 + j * a2
        d2 = np.sum(cand ** 2, axis=-1)
        take = d2 < best_d2 - 1e-12
        best[take] = cand[take]
        best_d2 = np.where(take, d2, best_d2)
    return best


def displacement(scenario: Scenario, from_points, to_points):
    """Pairwise displacement ``to - from`` (shape ``(len(from), len(to), 2)``)."""
    p = np.asarray(from_points, dtype=float)[:, None, :]
    q = np.asarray(to_points, dtype=float)[None, :, :]
    return _min_image(q - p, scenario.wraparound)


def gain_matrix(scenario: Scenario) -> GainMatrix:
    """Pathloss amplitude gains for every BS/group pair.

    On a torus the nearest image is used; images at the same distance (to
    1e-9 relative) are resolved by taking the strongest gain so that the
    result respects the lattice symmetry.
    """
    if scenario.alpha is not None:
        return GainMatrix(scenario.alpha.copy())
    model = scenario.pathloss_params
    delta = (np.asarray(scenario.group_positions, dtype=float)[None, :, :]
             - np.asarray(scenario.bs_positions, dtype=float)[:, None, :])
    if scenario.wraparound is None:
        images = delta[None]
    else:
        a1, a2 = np.asarray(scenario.wraparound, dtype=float)
        images = np.stack([delta + i * a1 + j * a2
                           for i, j in itertools.product(range(-2, 3), repeat=2)])
    dist = np.hypot(images[..., 0], images[..., 1])
    bearing = np.degrees(np.arctan2(images[..., 1], images[..., 0]))
    off = bearing - np.asarray(scenario.bs_orientations, dtype=float)[None, :, None]
    gains = pathloss_gain(model, dist, off)
    nearest = dist <= dist.min(axis=0) * (1.0 + 1e-9) + 1e-12
    return GainMatrix(np.max(np.where(nearest, gains, 0.0), axis=0))


# ---------------------------------------------------------------------------
# cluster reduction
# ---------------------------------------------------------------------------

def ici_noise(scenario: Scenario, gains: GainMatrix, cluster_index: int, group_index: int) -> float:
    """Noise-plus-ICI variance ``1 + sum_{m outside cluster} alpha^2 P_m``."""
    bs_in, groups = scenario.clusters[cluster_index]
    if group_index not in groups:
        raise ValueError(f"group {group_index} is not in cluster {cluster_index}")
    outside = np.ones(scenario.n_bs, dtype=bool)
    outside[list(bs_in)] = False
    a = gains.alpha[outside, group_index]
    return float(1.0 + np.sum(a ** 2 * scenario.bs_powers[outside]))


def cluster_problem(scenario: Scenario, gains: GainMatrix, cluster_index: int) -> ClusterProblem:
    bs_in, groups = scenario.clusters[cluster_index]
    sigma = np.sqrt([ici_noise(scenario, gains, cluster_index, k) for k in groups])
    beta = gains.alpha[np.ix_(bs_in, groups)] / sigma[None, :]
    return ClusterProblem(beta=beta, bs_powers=scenario.bs_powers[list(bs_in)],
                          gamma=scenario.gamma, bs_index=bs_in, group_index=groups)


def all_cluster_problems(scenario: Scenario, gains: Optional[GainMatrix] = None):
    gains = gain_matrix(scenario) if gains is None else gains
    return [cluster_problem(scenario, gains, ell) for ell in range(scenario.n_clusters)]


def detect_symmetric_blocks(problem: ClusterProblem, tolerance: float = 1e-9,
                            max_nodes: int = 100_000):
    """Partition the groups into strongly symmetric B x B blocks.

    Returns a list of tuples of local group indices, or ``None`` when B does
    not divide A, BS powers differ, or no partition exists.  In every block
    each row of ``beta`` restricted to the block is a permutation of the
    first row, and likewise for columns.
    """
    beta = problem.beta
    B, A = beta.shape
    p = problem.bs_powers
    if np.any(np.abs(p - p[0]) > tolerance * np.max(np.abs(p))):
        return None
    if B == 1:
        return [(k,) for k in range(A)]
    if A % B:
        return None
    atol = tolerance * max(float(np.max(np.abs(beta))), 1e-300)

    def same(x, y):
        return np.allclose(np.sort(x), np.sort(y), rtol=tolerance, atol=atol)

    classes = []
    for k in range(A):
        for cls in classes:
            if same(beta[:, cls[0]], beta[:, k]):
                cls.append(k)
                break
        else:
            classes.append([k])

    nodes = 0

    def split(cols):
        nonlocal nodes
        if not cols:
            return []
        head, rest = cols[0], cols[1:]
        for combo in itertools.combinations(rest, B - 1):
            nodes += 1
            if nodes > max_nodes:
                return None
            block = (head,) + combo
            sub = beta[:, block]
            if all(same(sub[m], sub[0]) for m in range(1, B)):
                remaining = [c for c in rest if c not in combo]
                tail = split(remaining)
                if tail is not None:
                    return [block] + tail
        return None

    blocks = []
    for cls in classes:
        if len(cls) % B:
            return None
        part = split(cls)
        if part is None:
            return None
        blocks.extend(part)
    return sorted(blocks)


# ---------------------------------------------------------------------------
# layouts
# ---------------------------------------------------------------------------

def build_linear_scenario(n_groups: int, cell_radius_km: float, gamma: float,
                          power_per_bs: float, cooperation: str = "none",
                          pathloss: Optional[PathlossModel] = None) -> Scenario:
    """Two facing BSs at +-R with ``n_groups`` equally spaced groups between them."""
    if n_groups < 2:
        raise ConfigError("the linear layout needs at least 2 groups")
    if cooperation not in ("none", "full"):
        raise ConfigError(f"linear layout cooperation must be none|full, got {cooperation!r}")
    if cooperation == "none" and n_groups % 2:
        raise ConfigError("no-cooperation split needs an even number of groups")
    if not cell_radius_km > 0:
        raise ConfigError("cell radius must be positive")
    R = float(cell_radius_km)
    xs = -R + 2.0 * R * np.arange(1, n_groups + 1) / (n_groups + 1)
    groups = np.column_stack([xs, np.zeros(n_groups)])
    bss = np.array([[-R, 0.0], [R, 0.0]])
    half = n_groups // 2
    if cooperation == "none":
        clusters = [((0,), tuple(range(half))), ((1,), tuple(range(half, n_groups)))]
    else:
        clusters = [((0, 1), tuple(range(n_groups)))]
    return Scenario(bs_positions=bss, bs_orientations=np.array([0.0, 180.0]),
                    group_positions=groups, gamma=gamma,
                    bs_powers=np.full(2, float(power_per_bs)), clusters=clusters,
                    pathloss_params=pathloss or PathlossModel())


def hex7_cell_centers(cell_radius_km: float) -> np.ndarray:
    D = SQRT3 * cell_radius_km
    e1 = np.array([D, 0.0])
    e2 = np.array([D / 2.0, D * SQRT3 / 2.0])
    return np.array([0 * e1, e1, e2, e2 - e1, -e1, -e2, e1 - e2])


def hex7_wraparound(cell_radius_km: float) -> np.ndarray:
    """Lattice vectors of the 7-cell torus (each cell sees 6 neighbours)."""
    D = SQRT3 * cell_radius_km
    e1 = np.array([D, 0.0])
    e2 = np.array([D / 2.0, D * SQRT3 / 2.0])
    return np.array([2 * e1 + e2, -e1 + 3 * e2])


def _unit(deg):
    r = math.radians(deg)
    return np.array([math.cos(r), math.sin(r)])


def build_hex7_scenario(cell_radius_km: float, gamma: float, power_per_bs: float,
                        cooperation: str = "none", pathloss: Optional[PathlossModel] = None,
                        boresights_deg: Sequence[float] = (90.0, 210.0, 330.0),
                        grid_fractions: Sequence[float] = (0.25, 0.75)) -> Scenario:
    """Seven three-sector cells on a wrap-around torus.

    BS ``3 c + s`` serves sector ``s`` of cell ``c``; its four groups sit at
    the centres of the sub-rhombi obtained by halving the sector rhombus
    along its midlines (``grid_fractions`` sets the two coordinates used
    along each rhombus edge).  Groups are numbered ``4 * bs + g``.
    """
    if cooperation not in ("none", "sector", "full"):
        raise ConfigError(f"hex7 cooperation must be none|sector|full, got {cooperation!r}")
    if not cell_radius_km > 0:
        raise ConfigError("cell radius must be positive")
    R = float(cell_radius_km)
    centers = hex7_cell_centers(R)
    f1, f2 = grid_fractions
    bs_pos, bs_dir, grp = [], [], []
    for c in centers:
        for b in boresights_deg:
            bs_pos.append(c)
            bs_dir.append(b)
            a_vec = R * _unit(b - 60.0)
            c_vec = R * _unit(b + 60.0)
            for s, t in ((f1, f1), (f1, f2), (f2, f1), (f2, f2)):
                grp.append(c + s * a_vec + t * c_vec)
    n_sec = len(boresights_deg)
    M = len(bs_pos)
    if cooperation == "none":
        clusters = [((m,), tuple(range(4 * m, 4 * m + 4))) for m in range(M)]
    elif cooperation == "sector":
        clusters = []
        for c in range(len(centers)):
            bs = tuple(range(n_sec * c, n_sec * (c + 1)))
            clusters.append((bs, tuple(k for m in bs for k in range(4 * m, 4 * m + 4))))
    else:
        clusters = [(tuple(range(M)), tuple(range(4 * M)))]
    model = pathloss or PathlossModel(antenna_pattern="sector")
    return Scenario(bs_positions=np.array(bs_pos), bs_orientations=np.array(bs_dir),
                    group_positions=np.array(grp), gamma=gamma,
                    bs_powers=np.full(M, float(power_per_bs)), clusters=clusters,
                    pathloss_params=model, wraparound=hex7_wraparound(R))


# ---------------------------------------------------------------------------
# config + dumps
# ---------------------------------------------------------------------------

_PATHLOSS_KEYS = {"fixed_offset_db", "exponent_coeff_db_per_decade", "reference_distance_km",
                  "min_distance_km", "antenna_pattern", "front_to_back_db", "beamwidth_3db_deg"}


def _reject_unknown(section, allowed, where):
    extra = set(section) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _positive(value, name):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number") from None
    if not (math.isfinite(v) and v > 0):
        raise ConfigError(f"{name} must be positive and finite")
    return v


def pathloss_from_config(section: Optional[dict], default_pattern: str = "omni") -> PathlossModel:
    section = dict(section or {})
    _reject_unknown(section, _PATHLOSS_KEYS, "pathloss")
    section.setdefault("antenna_pattern", default_pattern)
    return PathlossModel(**section)


def _power_from_config(section):
    section = section or {}
    _reject_unknown(section, {"per_bs", "per_bs_db"}, "power")
    if "per_bs" in section and "per_bs_db" in section:
        raise ConfigError("give power.per_bs or power.per_bs_db, not both")
    if "per_bs_db" in section:
        return 10.0 ** (float(section["per_bs_db"]) / 10.0)
    if "per_bs" in section:
        val = section["per_bs"]
        if isinstance(val, (list, tuple)):
            return [_positive(v, "power.per_bs") for v in val]
        return _positive(val, "power.per_bs")
    raise ConfigError("power section needs per_bs or per_bs_db")


def scenario_from_config(cfg: dict) -> Scenario:
    """Build a Scenario from a JSON-compatible mapping.

    Sections: ``layout`` (``type`` = linear | hex7 | explicit), ``pathloss``,
    ``clusters`` and ``power``.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("scenario must be a mapping")
    _reject_unknown(cfg, {"layout", "pathloss", "clusters", "power"}, "scenario")
    if "layout" not in cfg:
        raise ConfigError("scenario.layout is required")
    layout = dict(cfg["layout"])
    kind = layout.pop("type", None)
    clusters = cfg.get("clusters", {}) or {}
    power = _power_from_config(cfg.get("power"))
    if kind == "linear":
        _reject_unknown(layout, {"n_groups", "cell_radius_km", "gamma"}, "layout")
        _reject_unknown(clusters, {"cooperation"}, "clusters")
        if isinstance(power, list):
            raise ConfigError("linear layout takes a scalar power")
        return build_linear_scenario(
            int(layout.get("n_groups", 8)), _positive(layout.get("cell_radius_km", 1.0), "cell_radius_km"),
            _positive(layout.get("gamma", 4), "gamma"), power, clusters.get("cooperation", "none"),
            pathloss_from_config(cfg.get("pathloss"), "omni"))
    if kind == "hex7":
        _reject_unknown(layout, {"cell_radius_km", "gamma", "boresights_deg", "grid_fractions"}, "layout")
        _reject_unknown(clusters, {"cooperation"}, "clusters")
        if isinstance(power, list):
            raise ConfigError("hex7 layout takes a scalar power")
        extra = {}
        if "boresights_deg" in layout:
            extra["boresights_deg"] = tuple(float(x) for x in layout["boresights_deg"])
        if "grid_fractions" in layout:
            fr = tuple(float(x) for x in layout["grid_fractions"])
            if len(fr) != 2 or not all(0 < x < 1 for x in fr):
                raise ConfigError("grid_fractions must be two numbers in (0, 1)")
            extra["grid_fractions"] = fr
        return build_hex7_scenario(
            _positive(layout.get("cell_radius_km", 1.0), "cell_radius_km"),
            _positive(layout.get("gamma", 4), "gamma"), power, clusters.get("cooperation", "none"),
            pathloss_from_config(cfg.get("pathloss"), "sector"), **extra)
    if kind == "explicit":
        _reject_unknown(layout, {"alpha", "gamma"}, "layout")
        _reject_unknown(clusters, {"bs", "groups"}, "clusters")
        if "alpha" not in layout:
            raise ConfigError("explicit layout needs an alpha matrix")
        alpha = np.asarray(layout["alpha"], dtype=float)
        if alpha.ndim != 2:
            raise ConfigError("alpha must be a 2-D matrix")
        M, K = alpha.shape
        if "bs" in clusters or "groups" in clusters:
            if "bs" not in clusters or "groups" not in clusters:
                raise ConfigError("explicit clusters need both bs and groups lists")
            if len(clusters["bs"]) != len(clusters["groups"]):
                raise ConfigError("clusters.bs and clusters.groups differ in length")
            parts = list(zip(clusters["bs"], clusters["groups"]))
        else:
            parts = [(range(M), range(K))]
        powers = np.broadcast_to(np.asarray(power, dtype=float), (M,)).copy()
        return Scenario(bs_positions=np.zeros((0, 2)), bs_orientations=np.zeros(0),
                        group_positions=np.zeros((0, 2)),
                        gamma=_positive(layout.get("gamma", 1), "gamma"),
                        bs_powers=powers, clusters=parts, alpha=alpha)
    raise ConfigError(f"unknown layout type {kind!r}")


def write_gain_csv(path, gains: GainMatrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "k", "alpha"])
        M, K = gains.alpha.shape
        for m in range(M):
            for k in range(K):
                w.writerow([m, k, f"{gains.alpha[m, k]:.12g}"])


def write_beta_csv(path, problem: ClusterProblem):
    """Dump ``beta`` with global BS/group labels."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "k", "beta"])
        for i, m in enumerate(problem.bs_index):
            for j, k in enumerate(problem.group_index):
                w.writerow([m, k, f"{problem.beta[i, j]:.12g}"])
