import math

import numpy as np
import pytest
from scipy import stats

from oracles import bisect_inverse, brute_force_km
from qrtd.augmented import (
    AugmentedEquation,
    History,
    MonteCarloQ,
    PositedModel,
    ZeroModel,
    dr_estimating_equation,
    fit_dr,
    m_function,
    monte_carlo_q,
)
from qrtd.censoring import fit_censor_km
from qrtd.data import CovariatePath, Dataset, Subject
from qrtd.errors import DataError
from qrtd.estimator import EstimatingEquation, SolverConfig, fit
from qrtd.simulation import ScenarioConfig, failure_time, gamma_medians, generate
from qrtd.timewarp import warp_integral

from conftest import make_subject

BETA0 = np.array([-1.0, 1.0, 1.0])


class LinearQ(PositedModel):
    """Q(s) = z * (beta0 * s - q); simple enough to expand by hand."""

    def q_value(self, s, beta, history, q):
        return history.z * (beta[0] * s - q)


class HugeQ(PositedModel):
    def q_value(self, s, beta, history, q):
        return np.full(history.z.shape, 1e9)


def five_subjects():
    rows = [(1.0, 1, 0.5), (2.0, 0, -1.0), (2.0, 1, 2.0), (3.0, 0, 0.3), (4.0, 1, 1.0)]
    return Dataset([make_subject(y, d, z=(1.0, z), values=[[1.0, z]]) for y, d, z in rows])


def hand_augmentation(dataset, beta, q):
    pairs = [(s.y, s.delta) for s in dataset]
    km = brute_force_km(pairs)
    total = np.zeros(dataset.dim)
    g_prev, lam_prev = 1.0, 0.0
    for t, g, lam in km:
        dlam = lam - lam_prev
        for s in dataset:
            if s.y < t:
                continue
            dn = float((not s.delta) and s.y == t)
            total += s.z * (beta[0] * t - q) * (dn - dlam) / g_prev
        g_prev, lam_prev = g, lam
    return total / len(dataset)


def dosage_history(z, s, w=(), s1=None):
    bp = [0.0] + list(w)
    vals = [[1.0, 0.0, 0.0]]
    if len(w) >= 1:
        vals.append([1.0, s1, 0.0])
    return History(np.asarray(z, dtype=float), CovariatePath(bp, vals), s)


class TestMFunction:
    def test_examples(self):
        z = (1.0, 3.0)
        path = CovariatePath([0.0], [[1.0, 0.0]])
        late = Subject(2.0, True, path, z)
        early = Subject(0.5, True, path, z)
        np.testing.assert_array_equal(m_function(late, [0.0, 0.0], 0.5), [0.5, 1.5])
        np.testing.assert_array_equal(m_function(early, [0.0, 0.0], 0.5), [-0.5, -1.5])

    def test_censored(self):
        with pytest.raises(DataError):
            m_function(make_subject(1.0, False), [0.0], 0.5)

    def test_matches_exact_equation(self, sim_small):
        data, _ = sim_small
        eq = EstimatingEquation(data, 0.5)
        from qrtd.censoring import ipcw_survival

        g, _ = ipcw_survival(eq.curve, data.packed.y)
        total = sum(m_function(s, BETA0, 0.5) / g[i] for i, s in enumerate(data) if s.delta)
        np.testing.assert_allclose(total / len(data), eq(BETA0), rtol=1e-12, atol=1e-15)


class TestAugmentedEquation:
    def test_zero_model_bitwise(self, sim_small):
        data, _ = sim_small
        aug = AugmentedEquation(data, 0.5, ZeroModel(), a=20.0)
        base = EstimatingEquation(data, 0.5, a=20.0)
        for beta in (BETA0, BETA0 + 0.3):
            assert np.array_equal(aug(beta), base(beta))
            assert np.array_equal(aug.jacobian(beta), base.jacobian(beta))

    def test_no_censoring_bitwise(self):
        data, _ = generate(ScenarioConfig(n=80, seed=3, target_censoring=0.0))
        model = monte_carlo_q(ScenarioConfig(), draws=4)
        aug = AugmentedEquation(data, 0.5, model, a=20.0)
        assert np.array_equal(aug(BETA0), EstimatingEquation(data, 0.5, a=20.0)(BETA0))

    def test_hand_expanded(self):
        data = five_subjects()
        for beta in ([0.3, 0.0], [-0.2, 1.0]):
            got = AugmentedEquation(data, 0.4, LinearQ(), a=20.0).augmentation(beta)
            np.testing.assert_allclose(got, hand_augmentation(data, beta, 0.4), rtol=1e-13, atol=1e-16)

    def test_horizon_all_matches_observed(self):
        data = five_subjects()
        obs = AugmentedEquation(data, 0.4, LinearQ(), horizon="observed")([0.3, 0.5])
        every = AugmentedEquation(data, 0.4, LinearQ(), horizon="all")([0.3, 0.5])
        np.testing.assert_allclose(every, obs, rtol=1e-14, atol=1e-16)

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            AugmentedEquation(five_subjects(), 0.4, LinearQ(), horizon="future")

    def test_bound_check(self):
        eq = AugmentedEquation(five_subjects(), 0.4, HugeQ())
        with pytest.raises(AssertionError, match="bound"):
            eq([0.0, 0.0])
        AugmentedEquation(five_subjects(), 0.4, HugeQ(), check_bounds=False)([0.0, 0.0])

    def test_function_form(self):
        data = five_subjects()
        curve = fit_censor_km(data)
        np.testing.assert_array_equal(
            dr_estimating_equation(data, [0.3, 0.5], 0.4, curve, LinearQ()),
            AugmentedEquation(data, 0.4, LinearQ(), curve)([0.3, 0.5]),
        )

    def test_jacobian_matches_difference(self, sim_small):
        data, _ = sim_small
        eq = AugmentedEquation(data, 0.5, monte_carlo_q(ScenarioConfig(), draws=8), a=20.0)
        h = 1e-5
        fd = np.column_stack([(eq(BETA0 + h * e) - eq(BETA0 - h * e)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(eq.jacobian(BETA0), fd, rtol=1e-3, atol=1e-6)


class TestMonteCarloQ:
    fixed = ScenarioConfig()
    random = ScenarioConfig(changepoints="random")

    @pytest.mark.parametrize("scenario", [fixed, random])
    def test_centered_at_time_zero(self, scenario):
        model = MonteCarloQ(scenario, draws=50)
        for z in ([1.0, 0.4, 2.0], [1.0, 3.0, 0.1]):
            np.testing.assert_allclose(model.q_value(0.0, BETA0, dosage_history(z, 0.0), 0.5), 0.0, atol=1e-12)

    def test_certain_outcome(self):
        # exp(beta0) * s > 1 already, so the warp at failure must exceed 1
        model = MonteCarloQ(self.fixed, draws=10)
        z = np.array([1.0, 0.5, 0.5])
        beta = np.array([1.0, 1.0, 1.0])
        np.testing.assert_allclose(model.q_value(0.5, beta, dosage_history(z, 0.5), 0.5), z * 0.5, rtol=1e-14)

    def test_revealed_path_against_quadrature(self):
        w1, w2, s1, s2 = 0.6, 0.9, 0.7, 1.3
        z = np.array([1.0, 0.2, 0.4])
        path = CovariatePath([0.0, w1, w2], [[1, 0, 0], [1, s1, 0], [1, 0, s2]])
        s = 1.0
        beta = np.array([-0.7, 0.5, 1.4])
        true_clock = lambda t: warp_integral(path, (0.0, 1.0, 1.0), t)
        t_star = bisect_inverse(lambda t: warp_integral(path, beta, t), 1.0)
        tau_star, clock_s = true_clock(t_star), true_clock(s)
        law = stats.gamma(s1, scale=math.exp(1.0) / gamma_medians(np.array([s1]))[0])
        expected = law.sf(max(tau_star, clock_s)) / law.sf(clock_s)
        got = MonteCarloQ(self.fixed, draws=5).q_value(s, beta, History(z, path, s), 0.5)
        np.testing.assert_allclose(got, z * (expected - 0.5), rtol=1e-9)

    @pytest.mark.parametrize("case", ["fixed-0", "fixed-1", "random-0", "random-1"])
    def test_against_rejection_sampling(self, case):
        design, regime = case.split("-")
        scenario = self.fixed if design == "fixed" else self.random
        z = np.array([1.0, 0.6, 1.2])
        beta = np.array([-0.8, 0.7, 1.3])
        s1_known = 1.1
        rng = np.random.default_rng(42)
        n = 400_000
        if design == "fixed":
            s, w1 = (0.3, None) if regime == "0" else (0.75, 0.6)
            w1a, w2a = np.full(n, 0.6), np.full(n, 0.9)
        else:
            s, w1 = (0.3, None) if regime == "0" else (0.5, 0.2)
            if regime == "0":
                w1a = s + rng.exponential(0.25, n)
                w2a = w1a + rng.exponential(0.25, n)
            else:
                w1a = np.full(n, w1)
                w2a = s + rng.exponential(0.25, n)
        s1 = z[1] / 2 + rng.gamma(4.0, 0.2, n) if regime == "0" else np.full(n, s1_known)
        s2 = z[2] / 2 + rng.gamma(4.0, 0.2, n)
        tau = rng.gamma(s1, 1.0 / gamma_medians(s1)) * math.exp(1.0)
        t = failure_time(tau, w1a, w2a, s1, s2, BETA0)
        keep = t >= s
        rates = np.exp(np.column_stack([np.zeros(n), s1 * beta[1], s2 * beta[2]]) + beta[0])
        lengths = np.column_stack([np.minimum(t, w1a), np.clip(np.minimum(t, w2a) - w1a, 0, None),
                                   np.clip(t - w2a, 0, None)])
        j = (rates * lengths).sum(axis=1)
        target = np.mean(j[keep] > 1.0)
        se = math.sqrt(target * (1 - target) / keep.sum())
        hist = dosage_history(z, s) if regime == "0" else dosage_history(z, s, (w1,), s1_known)
        got = MonteCarloQ(scenario, draws=20_000, seed=1).q_value(s, beta, hist, 0.5)[0] + 0.5
        assert got == pytest.approx(target, abs=5 * se + 0.01)

    def test_common_draws(self):
        model = MonteCarloQ(self.random, draws=30, seed=3)
        h = dosage_history([1.0, 0.4, 0.9], 0.2)
        a = model.q_value(0.2, BETA0 + 0.2, h, 0.5)
        assert np.array_equal(a, model.q_value(0.2, BETA0 + 0.2, h, 0.5))
        b = MonteCarloQ(self.random, draws=30, seed=4).q_value(0.2, BETA0 + 0.2, h, 0.5)
        assert not np.array_equal(a, b)

    def test_bad_draws(self):
        with pytest.raises(ValueError):
            MonteCarloQ(self.fixed, draws=0)

    def test_rejects_other_designs(self):
        with pytest.raises(DataError):
            AugmentedEquation(five_subjects(), 0.5, MonteCarloQ(self.fixed, draws=2))


class TestFitDR:
    def test_zero_model_returns_ipcw_estimate(self, sim_small):
        data, _ = sim_small
        ipcw = fit(data, 0.5)
        dr = fit_dr(data, 0.5, model=ZeroModel())
        assert np.array_equal(dr.beta, ipcw.beta)
        assert dr.residual_norm == ipcw.residual_norm

    def test_monte_carlo_model_converges(self, sim_small):
        data, _ = sim_small
        res = fit_dr(data, 0.5, model=monte_carlo_q(ScenarioConfig(), draws=8))
        assert res.converged
        np.testing.assert_allclose(res.beta, BETA0, atol=0.8)

    def test_explicit_starts(self, sim_small):
        data, _ = sim_small
        cfg = SolverConfig(starts=[BETA0], n_random_starts=0)
        res = fit_dr(data, 0.5, cfg, model=ZeroModel())
        assert np.array_equal(res.beta, fit(data, 0.5, cfg).beta)
