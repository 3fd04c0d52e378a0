import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellrate.errors import ConvergenceError
from cellrate.fairness import (Utility, inner_r_star, project_simplex, snap_ties, solve_fairness,
                               solve_system, subgradient, update_weights, utility_value,
                               write_convergence_csv, write_rates_csv)
from cellrate.geometry import ClusterProblem, build_linear_scenario
from cellrate.limitcore import DualVars, Weights, weighted_avg_sum_rate

from conftest import symmetric_2x8


class TestUtility:
    def test_kinds(self):
        assert Utility.pfs().is_log and not Utility.pfs().uses_simplex
        assert Utility.hfs().uses_simplex
        assert Utility.alpha_fair(1.0).is_log
        with pytest.raises(ValueError):
            Utility("maxmin")
        with pytest.raises(ValueError):
            Utility.alpha_fair(0.0)

    def test_values(self):
        assert utility_value(Utility.pfs(), [1.0, math.e]) == pytest.approx(1.0)
        assert utility_value(Utility.hfs(), [3.0, 1.0, 2.0]) == 1.0
        assert utility_value(Utility.alpha_fair(2.0), [1.0, 2.0]) == pytest.approx(-1.5)

    @given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=6))
    def test_alpha_one_is_pfs(self, r):
        assert utility_value(Utility.alpha_fair(1.0), r) == utility_value(Utility.pfs(), r)

    def test_zero_rate_log(self):
        with pytest.raises(ValueError):
            utility_value(Utility.pfs(), [1.0, 0.0])


class TestInner:
    def test_pfs(self):
        np.testing.assert_allclose(inner_r_star(Utility.pfs(), [2.0, 4.0]), [0.5, 0.25])
        np.testing.assert_array_equal(inner_r_star(Utility.pfs(), np.ones(3)), np.ones(3))

    def test_alpha(self):
        np.testing.assert_allclose(inner_r_star(Utility.alpha_fair(2.0), [4.0]), [0.5])

    def test_hfs_mean(self):
        np.testing.assert_array_equal(inner_r_star(Utility.hfs(), [0.2, 0.3, 0.5], [1, 2, 3]),
                                      [2.0, 2.0, 2.0])

    def test_zero_weight(self):
        with pytest.raises(ValueError, match="dual unbounded"):
            inner_r_star(Utility.pfs(), [1.0, 0.0])

    def test_subgradient(self):
        np.testing.assert_array_equal(subgradient([1, 1], [1.0, 2.0], [2.0, 1.0]), [-1.0, 1.0])
        np.testing.assert_array_equal(subgradient([1, 1], [1.0, 2.0], [1.0, 2.0]), [0.0, 0.0])
        w = np.array([2.0, 0.5])
        assert np.all(subgradient(w, 1 / w, inner_r_star(Utility.pfs(), w)) == 0)


class TestUpdate:
    def test_arithmetic(self):
        w = update_weights([1.0, 1.0], [0.2, -0.2], 1.0, Utility.pfs())
        np.testing.assert_allclose(w.w, [0.8, 1.2])

    def test_zero_subgradient(self):
        assert update_weights([0.3, 0.7], [0.0, 0.0], 2.0, Utility.hfs()).w.tolist() == [0.3, 0.7]

    def test_floor(self):
        assert update_weights([1.0], [5.0], 1.0, Utility.pfs(), w_floor=1e-8).w[0] == 1e-8

    def test_step_positive(self):
        with pytest.raises(ValueError):
            update_weights([1.0], [1.0], 0.0, Utility.pfs())

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    def test_simplex_projection(self, v):
        w = project_simplex(v)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.integers(0, 1000))
    def test_projection_is_nearest(self, v, seed):
        # any other simplex point is at least as far away
        w = project_simplex(v)
        rng = np.random.default_rng(seed)
        other = rng.dirichlet(np.ones(len(v)))
        assert np.linalg.norm(w - v) <= np.linalg.norm(other - v) + 1e-12

    def test_snap_ties(self):
        w = np.array([1.0, 1.0 + 1e-9, 2.0])
        out = snap_ties(w, 1e-6)
        assert out[0] == out[1] and out[2] == 2.0


class TestSolve:
    def test_pfs_symmetric_equal_weights(self):
        p = ClusterProblem(np.full((1, 3), 0.8), [10.0], 2.0)
        res = solve_fairness(p, Utility.pfs())
        assert res.converged
        assert np.ptp(res.weights.w) == 0
        v, _, r = weighted_avg_sum_rate(p, np.ones(3), DualVars.ones(1))
        np.testing.assert_allclose(res.rates.r, r.r, rtol=1e-3)

    def test_pfs_stationarity_and_duality(self):
        p = ClusterProblem(np.array([[1.0, 0.6, 0.3], [0.2, 0.5, 0.9]]), [5.0, 5.0], 1.0)
        res = solve_fairness(p, Utility.pfs(), conv_tol=1e-5)
        assert res.converged
        assert np.max(np.abs(res.weights.w * res.rates.r - 1)) <= 1e-4
        gaps = [t[2] for t in res.trace]
        assert min(gaps) >= -1e-9
        best = np.minimum.accumulate(gaps)
        assert np.all(np.diff(best) <= 0)

    def test_hfs_equalizes(self):
        p = ClusterProblem(np.array([[1.0, 0.6, 0.3], [0.2, 0.5, 0.9]]), [5.0, 5.0], 1.0)
        res = solve_fairness(p, Utility.hfs())
        assert res.converged
        assert res.weights.w.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.ptp(res.rates.r) <= 2e-4 * np.mean(res.rates.r)  # |R - mean| <= conv_tol each
        np.testing.assert_allclose(res.aux_rates, np.mean(res.rates.r))

    def test_block_tying(self):
        res = solve_fairness(symmetric_2x8(), Utility.pfs(), "symmetric_shortcut")
        assert res.converged
        assert res.blocks == [(0, 4), (1, 5), (2, 6), (3, 7)]
        w = res.weights.w
        assert all(w[a] == w[b] for a, b in res.blocks)
        np.testing.assert_array_equal(res.duals.lam, [1.0, 1.0])

    def test_alpha_fair_between(self):
        p = ClusterProblem(np.array([[1.0, 0.4]]), [10.0], 1.0)
        r_pf = solve_fairness(p, Utility.pfs()).rates.r
        r_a = solve_fairness(p, Utility.alpha_fair(3.0)).rates.r
        # stronger fairness narrows the rate spread
        assert np.ptp(r_a) < np.ptp(r_pf)

    def test_nonconvergence_flagged(self):
        p = ClusterProblem(np.array([[1.0, 0.6, 0.3], [0.2, 0.5, 0.9]]), [5.0, 5.0], 1.0)
        res = solve_fairness(p, Utility.pfs(), max_outer=1)
        assert not res.converged and res.residual > 0
        with pytest.raises(ConvergenceError):
            solve_fairness(p, Utility.pfs(), max_outer=1, raise_on_failure=True)

    def test_cooperation_helps(self, two_cell_full, two_cell_none):
        full = solve_fairness(two_cell_full, Utility.pfs())
        none = [solve_fairness(p, Utility.pfs()) for p in two_cell_none]
        r_none = np.concatenate([r.rates.r for r in none])
        assert utility_value(Utility.pfs(), full.rates.r) > utility_value(Utility.pfs(), r_none)

    def test_outputs(self, tmp_path):
        s = build_linear_scenario(4, 1.0, 4, 1e12, "none")
        results = solve_system(s, Utility.pfs())
        from cellrate.geometry import all_cluster_problems
        write_rates_csv(tmp_path / "r.csv", all_cluster_problems(s), results)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "cluster,group,rate_bits" and len(lines) == 5
        write_convergence_csv(tmp_path / "c.csv", results[0].trace)
        assert (tmp_path / "c.csv").read_text().startswith("n,utility,gap,step\n")
