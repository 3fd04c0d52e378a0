import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from cellrate.fairness import Utility
from cellrate.geometry import ClusterProblem
from cellrate.limitcore import (DualVars, PowerAllocation, Weights, group_rates, optimize_powers_alg1,
                                sinr_profile)
from cellrate.montecarlo import (VirtualQueues, antennas_per_bs, arrivals, complex_normal,
                                 draw_channel, dual_mac_group_rates, dynamic_scheduler,
                                 finite_n_power_opt, mc_ergodic_rates, mc_log_det, mc_mmse,
                                 mc_mmse_table, trial_rng, write_scheduler_csv, write_trials_csv)

import oracles

TOY = ClusterProblem(np.array([[1.0, 0.6, 0.3], [0.2, 0.5, 0.9]]), [2.0, 3.0], 1.0)


def scalar_problem(beta=1.0, gamma=1.0):
    return ClusterProblem(np.array([[beta]]), [1.0], gamma)


class TestChannels:
    def test_scalar_draw(self):
        d = draw_channel(scalar_problem(), 1, seed=0, trial=0)
        assert d.blocks.shape == (1, 1, 1, 1) and d.blocks.dtype == complex

    def test_unit_variance(self):
        x = complex_normal(np.random.default_rng(1), 10_000)
        assert 0.97 <= np.mean(np.abs(x) ** 2) <= 1.03
        assert abs(np.mean(x.real ** 2) - 0.5) < 0.02

    def test_reproducible(self):
        a = draw_channel(TOY, 4, seed=9, trial=3).blocks
        b = draw_channel(TOY, 4, seed=9, trial=3).blocks
        c = draw_channel(TOY, 4, seed=9, trial=4).blocks
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_trial_streams_independent_of_order(self):
        x = trial_rng(5, 7).standard_normal(3)
        trial_rng(5, 6).standard_normal(100)
        assert np.array_equal(trial_rng(5, 7).standard_normal(3), x)

    def test_nonintegral_antennas(self):
        with pytest.raises(ValueError):
            antennas_per_bs(1.5, 3)
        assert antennas_per_bs(1.5, 4) == 6
        with pytest.raises(ValueError):
            draw_channel(ClusterProblem(np.ones((1, 1)), [1.0], 0.5), 3, seed=0)


class TestInstantaneous:
    def test_zero_power(self):
        d = draw_channel(TOY, 4, seed=1)
        r = dual_mac_group_rates(d, TOY, PowerAllocation(np.zeros(3), 5.0), DualVars.ones(2))
        assert np.all(r == 0)

    def test_scalar_rate(self):
        p = scalar_problem(beta=0.7)
        d = draw_channel(p, 1, seed=2)
        h = d.blocks[0, 0, 0, 0]
        r = dual_mac_group_rates(d, p, PowerAllocation([3.0], 1.0), DualVars.ones(1))
        assert r[0] == pytest.approx(math.log1p(0.49 * 3.0 * abs(h) ** 2), rel=1e-12)

    def test_mmse_zero_power(self):
        d = draw_channel(TOY, 4, seed=1)
        q = PowerAllocation([1.0, 0.0, 2.0], 5.0)
        assert mc_mmse(d, TOY, q, DualVars.ones(2), 0, 1) == 1.0

    def test_mmse_high_power(self):
        p = scalar_problem(gamma=2.0)
        d = draw_channel(p, 8, seed=3)
        assert mc_mmse(d, p, PowerAllocation([1e6], 1.0), DualVars.ones(1), 0, 0) < 1e-3

    def test_mmse_stage_order(self):
        d = draw_channel(TOY, 2, seed=0)
        with pytest.raises(ValueError):
            mc_mmse(d, TOY, PowerAllocation([1, 1, 1], 5.0), DualVars.ones(2), 2, 1)


class TestOracles:
    def test_scalar_ergodic_rate(self):
        p = scalar_problem(beta=1.0)
        mean, se = mc_ergodic_rates(p, PowerAllocation([5.0], 1.0), DualVars.ones(1), None,
                                    N=1, trials=4000, seed=11)
        assert abs(mean.r[0] - oracles.rayleigh_capacity(5.0)) <= 2 * se[0]

    def test_zero_power_estimate(self):
        mean, se = mc_ergodic_rates(TOY, PowerAllocation(np.zeros(3), 5.0), DualVars.ones(2),
                                    None, N=2, trials=4, seed=0)
        assert np.all(mean.r == 0) and np.all(se == 0)

    def test_trials_lower_bound(self):
        with pytest.raises(ValueError):
            mc_ergodic_rates(TOY, PowerAllocation(np.ones(3), 3.0), DualVars.ones(2), None, 2, 1, 0)

    def test_rates_match_asymptotic(self):
        w = Weights([0.5, 1.0, 0.8])
        d = DualVars.ones(2)
        q = optimize_powers_alg1(TOY, w, d).powers
        asym = group_rates(TOY, q, d, w).r
        mean, _ = mc_ergodic_rates(TOY, q, d, w, N=16, trials=2000, seed=4)
        np.testing.assert_allclose(mean.r, asym, rtol=0.03)

    def test_error_shrinks_with_n(self):
        p = scalar_problem()
        q = PowerAllocation([1.0], 1.0)
        exact = oracles.mp_log_det(1.0, 1.0)

        # per-draw fluctuations of the normalized log-det shrink like 1/N
        def err(N):
            return np.mean([abs(mc_log_det(p, q, DualVars.ones(1), 0, N, 50, seed=s)[0] - exact)
                            for s in range(10)])
        assert err(64) < err(16)

    def test_mmse_table_matches_fixed_point(self):
        q = PowerAllocation([1.0, 2.0, 0.5], 3.5)
        d = DualVars([0.8, 1.2])
        w = Weights([0.5, 1.0, 0.8])
        mean, _ = mc_mmse_table(TOY, q, d, N=64, trials=100, seed=2, weights=w)
        ref = sinr_profile(TOY, q, d, w).mmse_table
        iu = np.triu_indices(3)
        np.testing.assert_allclose(mean[iu], ref[iu], rtol=0.02)

    def test_executor_bit_identical(self):
        q = PowerAllocation([1.0, 2.0, 0.5], 3.5)
        serial = mc_mmse_table(TOY, q, DualVars.ones(2), N=4, trials=40, seed=2)[0]
        with ThreadPoolExecutor(3) as ex:
            par = mc_mmse_table(TOY, q, DualVars.ones(2), N=4, trials=40, seed=2, executor=ex)[0]
        assert serial.tobytes() == par.tobytes()


class TestFiniteN:
    def test_symmetric_equal_split(self):
        p = ClusterProblem(np.full((1, 3), 0.8), [3.0], 2.0)
        res = finite_n_power_opt(p, np.ones(3), DualVars.ones(1), N=32, trials=100, seed=1)
        np.testing.assert_allclose(res.powers.q, 1.0, rtol=0.05)
        assert res.powers.q.sum() == pytest.approx(3.0)

    def test_matches_asymptotic(self):
        w = [0.5, 1.0, 0.8]
        asym = optimize_powers_alg1(TOY, w, DualVars.ones(2)).powers.q
        fin = finite_n_power_opt(TOY, w, DualVars.ones(2), N=32, trials=200, seed=3).powers.q
        np.testing.assert_allclose(fin, asym, rtol=0.05, atol=0.05 * asym.sum() / 3)

    def test_dead_group_off(self):
        p = ClusterProblem(np.array([[1.0, 1e-4]]), [1.0], 1.0)
        res = finite_n_power_opt(p, [1.0, 1.0], DualVars.ones(1), N=8, trials=50, seed=0)
        assert res.powers.q[1] == pytest.approx(0.0, abs=1e-6)


class TestScheduler:
    def test_arrivals_pfs(self):
        a = arrivals(Utility.pfs(), np.array([0.0, 1.0, 100.0]), 10.0, 5.0)
        np.testing.assert_allclose(a, [5.0, 5.0, 0.1])

    def test_arrivals_hfs(self):
        U = np.array([1.0, 2.0])
        assert np.all(arrivals(Utility.hfs(), U, 4.0, 2.0) == 2.0)
        assert np.all(arrivals(Utility.hfs(), U, 2.0, 2.0) == 0.0)
        assert np.all(arrivals(Utility.hfs(), U, 3.0, 2.0) == 1.0)

    def test_arrivals_zero_cap(self):
        assert np.all(arrivals(Utility.pfs(), np.zeros(4), 1.0, 0.0) == 0)

    def test_queue_nonnegative(self):
        q = VirtualQueues(np.array([1.0, 0.5]), 1.0, 1.0)
        np.testing.assert_allclose(q.step(np.array([2.0, 0.1]), np.array([0.0, 0.2])), [0.0, 0.6])
        with pytest.raises(ValueError):
            VirtualQueues(np.array([-1.0]), 1.0, 1.0)

    def test_single_slot(self):
        p = ClusterProblem(np.array([[1.0, 0.5]]), [4.0], 2.0)
        U0 = np.array([[1.0, 2.0], [3.0, 0.5]])
        res = dynamic_scheduler(p, Utility.pfs(), N=2, T=1, seed=0, V=10.0, A_max=3.0, U0=U0)
        a = arrivals(Utility.pfs(), U0, 10.0, 3.0)
        np.testing.assert_allclose(res.queues[0], np.maximum(U0 - res.inst_rates[0], 0) + a)

    def test_zero_arrivals_drain(self):
        p = ClusterProblem(np.array([[1.0, 0.5]]), [4.0], 2.0)
        res = dynamic_scheduler(p, Utility.pfs(), N=2, T=30, seed=0, V=1.0, A_max=0.0,
                                U0=np.full((2, 2), 1.0))
        assert np.all(res.queues[-1] == 0)
        assert np.all(res.queues >= 0)

    def test_reproducible_and_outputs(self, tmp_path):
        p = ClusterProblem(np.array([[1.0, 0.5]]), [4.0], 2.0)
        a = dynamic_scheduler(p, Utility.pfs(), N=2, T=20, seed=3)
        b = dynamic_scheduler(p, Utility.pfs(), N=2, T=20, seed=3)
        assert a.avg_rates.tobytes() == b.avg_rates.tobytes()
        assert a.V == pytest.approx(100 * a.A_max)
        write_scheduler_csv(tmp_path / "s.csv", a)
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "t,k,i,U,inst_rate,avg_rate" and len(lines) == 1 + 20 * 4
        write_trials_csv(tmp_path / "t.csv", a.inst_rates[:, :, 0])
        assert (tmp_path / "t.csv").read_text().startswith("trial,group,rate\n")

    def test_users_statistically_equivalent(self):
        p = ClusterProblem(np.array([[1.0, 0.5]]), [4.0], 2.0)
        res = dynamic_scheduler(p, Utility.pfs(), N=4, T=400, seed=1)
        r = res.inst_rates[100:]
        for k in range(2):
            means = r[:, k, :].mean(axis=0)
            se = r[:, k, :].std(axis=0, ddof=1) / math.sqrt(r.shape[0])
            assert np.ptp(means) <= 3 * math.sqrt(2) * np.max(se) + 0.05 * np.mean(means)
