import math

import numpy as np
import pytest

from hacwap import critical as crit
from hacwap import model
from hacwap import statistics as st_mod
from hacwap.numerics import DomainError, chisq_quantile, noncentral_chisq_cdf, rng_stream
from conftest import random_spd


def st_from(s, t, sigma, beta0=0.0):
    return model.STPair(np.asarray(s, float), np.asarray(t, float), beta0,
                        model.c_beta0(beta0, sigma), sigma)


@pytest.fixture(scope="module")
def bank5():
    return crit.SimBank.generate(2000, 5, seed=3)


class TestBank:
    def test_minimum_size(self):
        with pytest.raises(DomainError):
            crit.SimBank.generate(100, 2, 0)

    def test_read_only_and_reproducible(self):
        a, b = crit.SimBank.generate(600, 2, 5), crit.SimBank.generate(600, 2, 5)
        np.testing.assert_array_equal(a.draws, b.draws)
        with pytest.raises(ValueError):
            a.draws[0, 0] = 1.0


class TestQuantile:
    def test_order_statistic_convention(self):
        v = np.arange(1.0, 101.0)
        assert crit.empirical_quantile(v, 0.05) == 95.0
        assert crit.empirical_quantile(np.full(50, 2.5), 0.1) == 2.5

    def test_nan_guard(self):
        v = np.ones(100)
        v[:2] = np.nan
        with pytest.raises(DomainError):
            crit.empirical_quantile(v, 0.05)

    def test_chisq_limit(self):
        bank = crit.SimBank.generate(10_000, 5, seed=1)
        q = crit.conditional_quantile(lambda d, t: np.sum(d * d, 1), None, 0.05, bank)
        assert abs(q - chisq_quantile(0.05, 5)) < 0.15

    def test_monotone_transform(self, bank5, rng):
        vals = rng.standard_normal(bank5.size)
        obs = 1.7
        plain = obs > crit.empirical_quantile(vals, 0.05)
        assert plain == (math.exp(obs) > crit.empirical_quantile(np.exp(vals), 0.05))


class TestFixedTests:
    def test_ar_zero_accepts(self):
        assert not crit.ar_test(st_from([0, 0], [1, 1], np.eye(4))).reject

    def test_strict_rejection(self):
        c = chisq_quantile(0.05, 1)
        rep = crit.TestReport("x", c, c)
        assert not rep.reject

    def test_ar_null_rate(self, rng):
        sigma = random_spd(rng, 6)
        hits = 0
        for _ in range(10_000):
            st = model.simulate_st(0.0, np.array([1.0, 0.5, -1.0]), sigma, 0.0, rng)
            hits += crit.ar_test(st).reject
        assert abs(hits / 10_000 - 0.05) < 0.007

    def test_k1_power_formula(self):
        rng = rng_stream(4)
        sigma = np.array([[1.0, 0.3], [0.3, 2.0]])
        mu, beta = np.array([2.0]), 1.0
        b0 = np.array([1.0, 0.0])
        power = 1 - noncentral_chisq_cdf(chisq_quantile(0.05, 1), 1,
                                         beta ** 2 * mu[0] ** 2 / (b0 @ sigma @ b0))
        S, T = model.simulate_st(beta, mu, sigma, 0.0, rng, size=20_000)
        rate = np.mean(S[:, 0] ** 2 > chisq_quantile(0.05, 1))
        assert abs(rate - power) < 0.015

    def test_k1_lm_posu_equal_ar(self, rng):
        sigma = random_spd(rng, 2)
        for _ in range(200):
            st = model.simulate_st(0.5, np.array([1.0]), sigma, 0.0, rng)
            ar = crit.ar_test(st)
            assert crit.lm_test(st).reject == ar.reject
            assert crit.posu_test(st, np.array([1.0])).reject == ar.reject

    def test_posu_zero_direction(self):
        with pytest.raises(DomainError):
            crit.posu_test(st_from([1, 0], [1, 1], np.eye(4)), np.zeros(2))

    def test_posu_power(self):
        rng = rng_stream(6)
        sigma = np.kron(np.array([[1.0, 0.9], [0.9, 1.0]]), np.eye(3))
        mu, beta = np.ones(3), 0.4
        v = model.c_beta0(0.0, sigma) @ mu
        S, _ = model.simulate_st(beta, mu, sigma, 0.0, rng, size=20_000)
        rate = np.mean((S @ v) ** 2 / (v @ v) > chisq_quantile(0.05, 1))
        expect = crit.power_envelope([beta], mu, sigma, 0.0).two_sided[0]
        assert abs(rate - expect) < 0.015


class TestCQLR:
    def test_k1_matches_ar(self, rng):
        bank = crit.SimBank.generate(1000, 1, 0)
        sigma = random_spd(rng, 2)
        for _ in range(1000):
            st = model.simulate_st(rng.normal(), np.array([1.0]), sigma, 0.0, rng)
            assert crit.cqlr_test(st, 0.05, bank).reject == crit.ar_test(st).reject

    def test_null_rate(self, rng, bank5):
        sigma = random_spd(rng, 10)
        mu = rng.normal(0, 1, 5)
        hits = 0
        for _ in range(10_000):
            st = model.simulate_st(0.0, mu, sigma, 0.0, rng)
            hits += crit.cqlr_test(st, 0.05, bank5).reject
        assert abs(hits / 10_000 - 0.05) < 0.007

    def test_large_t_limit(self, rng, bank5):
        sigma = random_spd(rng, 10)
        t = rng.standard_normal(5)
        t *= 100 / np.linalg.norm(t)
        rep = crit.cqlr_test(st_from(rng.standard_normal(5), t, sigma), 0.05, bank5)
        assert abs(rep.critical - chisq_quantile(0.05, 1)) < 0.2


class TestSU:
    def test_constant_ratio(self, bank5):
        sol = crit.su_solve(np.ones(bank5.size), bank5, 0.05)
        # every draw ties with the threshold; the solver basis supplies the randomisation
        assert abs(sol.decisions.mean() - 0.05) <= 1 / bank5.size + 1e-12
        np.testing.assert_allclose(sol.kappa1, 0, atol=1e-12)

    def test_no_constraints(self, rng):
        bank = crit.SimBank(np.zeros((1000, 0)), 0)
        r = rng.exponential(size=1000)
        sol = crit.su_solve(r, bank, 0.05)
        assert sol.kappa1.size == 0
        assert sol.kappa0 == pytest.approx(crit.empirical_quantile(r, 0.05))

    def test_bank_moments_and_rule(self, bank5, rng):
        r = np.exp(rng.normal(0, 2, bank5.size) + bank5.draws @ rng.normal(0, 1, 5))
        sol = crit.su_solve(r, bank5, 0.05)
        J = bank5.size
        x = sol.decisions
        assert abs(x.mean() - 0.05) <= 1 / J
        assert np.all(np.abs(x @ bank5.draws / J) <= 3 / math.sqrt(J))
        thr = sol.threshold(bank5.draws)
        strict = np.abs(r - thr) > 1e-9 * r.max()
        np.testing.assert_array_equal(x[strict] == 1.0, (r > thr)[strict])
        assert sol.active_count <= 6

    def test_infeasible_ratio(self, bank5):
        r = np.ones(bank5.size)
        r[0] = np.inf
        with pytest.raises(DomainError):
            crit.su_solve(r, bank5, 0.05)


class TestWapTests:
    def test_similar_and_su_null_rate(self):
        rng = rng_stream(13)
        sigma = np.kron(np.array([[1.0, 0.9], [0.9, 1.0]]), np.diag([5.0, 1.0]))
        bank = crit.SimBank.generate(1000, 2, 1)
        w = st_mod.WeightSpec.mm2(sigma, 10.0, nodes=64)
        kern = st_mod.WapKernel(w, sigma, 0.0)
        mu = np.array([1.0, 1.0])
        reps = 2000
        sim = su = 0
        prod = []
        for _ in range(reps):
            st = model.simulate_st(0.0, mu, sigma, 0.0, rng)
            sim += crit.wap_similar_test(st, w, 0.05, bank, kernel=kern).reject
            rep = crit.wap_su_test(st, w, 0.05, bank, kernel=kern)
            su += rep.reject
            prod.append(rep.reject * st.s)
        se = math.sqrt(0.05 * 0.95 / reps)
        assert abs(sim / reps - 0.05) < 3 * se
        assert abs(su / reps - 0.05) < 3 * se
        prod = np.array(prod)
        assert np.all(np.abs(prod.mean(0)) < 3 * prod.std(0) / math.sqrt(reps))

    def test_lu_zero_fixed_point_and_k1_equivalence(self):
        rng = rng_stream(14)
        sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
        bank = crit.SimBank.generate(1000, 1, 2)
        w = st_mod.WeightSpec.mm2(sigma, 10.0, nodes=64)
        kern = st_mod.WapKernel(w, sigma, 0.0)
        sol = crit.lu_multipliers(kern, bank, np.array([2.0]), 0.05, n_t=50, seed=0)
        assert np.all(np.abs(sol.residuals) <= sol.tolerance)
        for _ in range(500):
            st = model.simulate_st(rng.normal(0, 0.5), np.array([2.0]), sigma, 0.0, rng)
            lu = crit.wap_lu_test(st, w, 0.05, bank, kernel=kern, solution=sol)
            sim = crit.wap_similar_test(st, w, 0.05, bank, kernel=kern)
            assert lu.reject == sim.reject

    def test_lu_solves_moment(self):
        sigma = np.kron(np.array([[1.0, 0.9], [0.9, 1.0]]), np.diag([5.0, 1.0]))
        bank = crit.SimBank.generate(1000, 2, 3)
        w = st_mod.WeightSpec.mm1(sigma, 10.0, nodes=121, rule="trapezoid")
        kern = st_mod.WapKernel(w, sigma, 0.0)
        sol = crit.lu_multipliers(kern, bank, np.array([[2.0, 2.0]]), 0.05, n_t=40, seed=1)
        assert sol.tolerance == pytest.approx(3 / math.sqrt(1000 * 40))
        assert np.all(np.abs(sol.residuals) <= sol.tolerance)

    def test_lu_rejects_zero_anchor(self):
        sigma = np.eye(4)
        kern = st_mod.WapKernel(st_mod.WeightSpec.mm2(sigma, 10.0, nodes=32), sigma, 0.0)
        with pytest.raises(DomainError):
            crit.lu_multipliers(kern, crit.SimBank.generate(500, 2, 0), np.zeros(2))


class TestEnvelope:
    def test_null_and_symmetry(self):
        sigma = np.kron(np.array([[1.0, 0.9], [0.9, 1.0]]), np.eye(3))
        mu = np.ones(3)
        env = crit.power_envelope([-0.5, 0.0, 0.5], mu, sigma, 0.0)
        assert env.two_sided[1] == pytest.approx(0.05)
        assert env.two_sided[0] == pytest.approx(env.two_sided[2])
        assert np.all(env.one_sided >= 0.0) and np.all(env.two_sided <= 1.0)
