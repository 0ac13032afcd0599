import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from qrtd.estimator import SolverConfig
from qrtd.simulation import (
    STUDY_COLUMNS,
    ScenarioConfig,
    calibrate_censoring_rate,
    draw_intrinsic_time,
    failure_time,
    gamma_median,
    gamma_medians,
    generate,
    iq_sd,
    run_study,
    summarize,
)
from qrtd.timewarp import warp_integral

from oracles import bisect_inverse


class TestGammaMedian:
    def test_exponential(self):
        assert gamma_median(1.0) == pytest.approx(math.log(2), rel=1e-12)

    def test_shape_four(self):
        assert gamma_median(4.0) == pytest.approx(3.67206074885, rel=1e-10)

    def test_against_distribution(self):
        shapes = np.array([0.05, 0.3, 1.7, 12.0, 250.0])
        np.testing.assert_allclose(gamma_medians(shapes), stats.gamma.median(shapes), rtol=1e-11)

    def test_monotone(self):
        m = gamma_medians(np.linspace(0.1, 20, 200))
        assert np.all(np.diff(m) > 0)

    @pytest.mark.parametrize("shape", [0.0, -1.0, float("nan")])
    def test_bad_shape(self, shape):
        with pytest.raises(ValueError):
            gamma_median(shape)


class TestIntrinsicTime:
    def test_median_is_one(self):
        rng = np.random.default_rng(0)
        s1 = np.full(200_000, 0.8)
        tau_tilde = np.asarray(draw_intrinsic_time(s1, 0.0, rng))
        assert np.mean(tau_tilde <= 1.0) == pytest.approx(0.5, abs=0.005)

    def test_intercept_shift(self):
        a = draw_intrinsic_time(np.array([0.8, 2.0]), 0.0, np.random.default_rng(1))
        b = draw_intrinsic_time(np.array([0.8, 2.0]), -1.0, np.random.default_rng(1))
        np.testing.assert_allclose(b, a * math.e, rtol=1e-15)

    def test_scalar(self):
        assert isinstance(draw_intrinsic_time(1.5, 0.0, np.random.default_rng(2)), float)


class TestFailureTime:
    beta = (-1.0, 1.0, 1.0)

    @pytest.mark.parametrize("tau", [0.3, 0.7, 1.5, 4.0])
    def test_inverts_clock(self, tau):
        w1, w2, s1, s2 = 0.6, 0.9, 0.8, 1.1
        t = failure_time(tau, w1, w2, s1, s2, self.beta, check=True)
        from qrtd.data import CovariatePath

        path = CovariatePath([0, w1, w2], [[1, 0, 0], [1, s1, 0], [1, 0, s2]])
        clock = lambda u: warp_integral(path, (0.0,) + self.beta[1:], u)
        assert t == pytest.approx(bisect_inverse(clock, tau), rel=1e-12)

    def test_regimes(self):
        w1, w2, s1, s2 = 0.6, 0.9, 0.8, 1.1
        assert failure_time(0.5, w1, w2, s1, s2, self.beta) == 0.5
        mid = w1 + 0.1 * math.exp(0.8)
        assert failure_time(mid, w1, w2, s1, s2, self.beta) == pytest.approx(0.7, rel=1e-14)
        assert failure_time(w1 + 0.3 * math.exp(0.8), w1, w2, s1, s2, self.beta) == pytest.approx(w2)

    def test_no_effect_is_identity(self):
        tau = np.array([0.2, 0.75, 3.0])
        t = failure_time(tau, 0.6, 0.9, 0.8, 1.1, (-1.0, 0.0, 0.0))
        np.testing.assert_allclose(t, tau, rtol=1e-15)

    def test_bad_changepoints(self):
        with pytest.raises(ValueError):
            failure_time(1.0, 0.9, 0.6, 1.0, 1.0, self.beta)

    @given(st.floats(1e-4, 50), st.floats(0.01, 2), st.floats(0.01, 2),
           st.floats(0, 5), st.floats(0, 5), st.floats(-2, 2), st.floats(-2, 2))
    def test_residual(self, tau, w1, gap, s1, s2, b1, b2):
        failure_time(tau, w1, w1 + gap, s1, s2, (0.0, b1, b2), check=True)


class TestGenerate:
    def test_deterministic(self):
        sc = ScenarioConfig(n=50, seed=4, censoring_rate=0.3)
        a, ta = generate(sc)
        b, tb = generate(sc)
        assert a == b
        assert np.array_equal(ta.tau, tb.tau)

    def test_layout(self, sim_small):
        data, truth = sim_small
        s = data[3]
        np.testing.assert_array_equal(s.path.breakpoints, [0.0, 0.6, 0.9])
        np.testing.assert_array_equal(s.path.values, [[1, 0, 0], [1, truth.s1[3], 0], [1, 0, truth.s2[3]]])
        np.testing.assert_array_equal(s.z, [1.0, truth.z1[3], truth.z2[3]])
        assert s.y == min(truth.t_true[3], truth.c[3])

    def test_full_warp_median_is_one(self):
        data, truth = generate(ScenarioConfig(n=20_000, seed=3, censoring_rate=0.0))
        beta = (-1.0, 1.0, 1.0)
        j = np.array([warp_integral(s.path, beta, t) for s, t in zip(data, truth.t_true)])
        np.testing.assert_allclose(j, truth.tau_tilde, rtol=1e-10)
        assert np.mean(j <= 1.0) == pytest.approx(0.5, abs=0.012)

    def test_random_changepoints(self):
        _, truth = generate(ScenarioConfig(n=40_000, seed=2, changepoints="random", censoring_rate=0.0))
        assert truth.w1.mean() == pytest.approx(0.25, rel=0.03)
        assert (truth.w2 - truth.w1).mean() == pytest.approx(0.25, rel=0.03)

    def test_censoring_independent_of_covariates(self):
        _, truth = generate(ScenarioConfig(n=20_000, seed=5, censoring_rate=0.4))
        assert abs(np.corrcoef(truth.c, truth.s1)[0, 1]) < 0.03
        assert abs(np.corrcoef(truth.c, truth.z2)[0, 1]) < 0.03

    def test_no_censoring(self):
        data, _ = generate(ScenarioConfig(n=30, seed=1, target_censoring=0.0))
        assert data.n_events == 30


class TestCalibration:
    def test_hits_target(self):
        sc = ScenarioConfig(n=100_000, seed=8, target_censoring=0.2)
        data, _ = generate(sc)
        assert 0.195 <= 1 - data.n_events / len(data) <= 0.205

    def test_monotone_in_target(self):
        rates = [calibrate_censoring_rate(ScenarioConfig(target_censoring=t), size=20_000)
                 for t in (0.1, 0.2, 0.4)]
        assert rates[0] < rates[1] < rates[2]

    def test_zero_target(self):
        assert calibrate_censoring_rate(ScenarioConfig(target_censoring=0.0)) == 0.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ScenarioConfig(target_censoring=0.95)


class TestSummaries:
    def test_iq_sd_normal(self):
        x = np.random.default_rng(0).normal(0, 1, 200_000)
        assert iq_sd(x) == pytest.approx(1.0, abs=0.01)

    def test_single_trial(self):
        s = summarize([0.3])
        assert s["mean"] == 0.3 and s["sd"] is None and s["iqsd"] is None

    def test_coverage(self):
        assert summarize([1, 2, 3], covered=[True, False, None])["coverage"] == 0.5


class TestStudy:
    grid = [ScenarioConfig(n=60, target_censoring=0.2)]
    config = SolverConfig(n_random_starts=1)

    def test_worker_invariance_and_csv(self):
        a = run_study(self.grid, trials=3, seed=9, config=self.config, workers=1)
        b = run_study(self.grid, trials=3, seed=9, config=self.config, workers=2)
        assert a.rows == b.rows
        text = a.to_csv("comment")
        lines = text.splitlines()
        assert lines[0] == "# comment"
        assert lines[1].split(",") == list(STUDY_COLUMNS)
        assert len(lines) == 2 + 3
        assert a.row("fixed", 60, 0.2, "beta1")["coverage"] is None

    def test_bootstrap_coverage_column(self):
        rep = run_study(self.grid, trials=2, B=3, seed=1, config=self.config)
        cov = rep.row("fixed", 60, 0.2, "beta0")["coverage"]
        assert cov is None or 0.0 <= cov <= 1.0

    def test_trials_positive(self):
        with pytest.raises(ValueError):
            run_study(self.grid, trials=0)
