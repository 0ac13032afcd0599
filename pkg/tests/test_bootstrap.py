import numpy as np
import pytest

from qrtd.bootstrap import bootstrap, replicate_rng, unit_exponential
from qrtd.errors import BootstrapError
from qrtd.estimator import SolverConfig, fit


def ones(rng, n):
    return np.ones(n)


@pytest.fixture(scope="module")
def point(sim_small):
    data, _ = sim_small
    return fit(data, 0.5)


class TestReplicateStreams:
    def test_depends_only_on_seed_and_index(self):
        a = unit_exponential(replicate_rng(3, 7), 5)
        b = unit_exponential(replicate_rng(3, 7), 5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, unit_exponential(replicate_rng(3, 8), 5))
        assert not np.array_equal(a, unit_exponential(replicate_rng(4, 7), 5))

    def test_unit_exponential_moments(self):
        w = unit_exponential(np.random.default_rng(0), 200_000)
        assert w.min() > 0
        assert w.mean() == pytest.approx(1.0, abs=0.01)
        assert w.var() == pytest.approx(1.0, abs=0.02)


class TestBootstrap:
    def test_unit_weights_give_zero_se(self, sim_small, point):
        data, _ = sim_small
        res = bootstrap(data, 0.5, B=5, point=point, weight_sampler=ones)
        assert np.all(res.replicates == point.beta)
        assert np.all(res.se == 0.0)
        assert np.array_equal(res.ci_lower, res.ci_upper)

    def test_deterministic(self, sim_small, point):
        data, _ = sim_small
        a = bootstrap(data, 0.5, B=6, seed=5, point=point)
        b = bootstrap(data, 0.5, B=6, seed=5, point=point)
        assert np.array_equal(a.replicates, b.replicates)

    def test_prefix_stable_in_b(self, sim_small, point):
        # replicate b never depends on how many others are drawn
        data, _ = sim_small
        a = bootstrap(data, 0.5, B=4, seed=2, point=point)
        b = bootstrap(data, 0.5, B=6, seed=2, point=point)
        assert a.n_failed == 0 and b.n_failed == 0
        assert np.array_equal(a.replicates, b.replicates[:4])

    def test_worker_count_invariance(self, sim_small, point):
        data, _ = sim_small
        a = bootstrap(data, 0.5, B=4, seed=1, point=point, workers=1)
        b = bootstrap(data, 0.5, B=4, seed=1, point=point, workers=2)
        assert np.array_equal(a.replicates, b.replicates)

    def test_intervals(self, sim_small, point):
        data, _ = sim_small
        res = bootstrap(data, 0.5, B=20, seed=0, point=point)
        assert np.all(res.se > 0)
        assert np.all(res.ci_lower < res.estimate) and np.all(res.estimate < res.ci_upper)
        assert np.all(res.pct_lower <= res.pct_upper)
        np.testing.assert_allclose(res.se, res.replicates.std(axis=0, ddof=1))
        np.testing.assert_allclose(res.ci_upper - res.ci_lower, 2 * 1.959963984540054 * res.se)

    def test_all_failures_raise(self, sim_small, point):
        data, _ = sim_small
        impossible = SolverConfig(tolerance=1e-300, max_iterations=1, polish=False, n_random_starts=0)
        with pytest.raises(BootstrapError, match="converged"):
            bootstrap(data, 0.5, impossible, B=3, point=point)

    @pytest.mark.parametrize("kw", [{"B": 1}, {"level": 1.0}, {"level": 0.0}])
    def test_bad_arguments(self, sim_small, point, kw):
        data, _ = sim_small
        with pytest.raises(ValueError):
            bootstrap(data, 0.5, point=point, **kw)
