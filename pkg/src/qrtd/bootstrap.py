"""Weighted (multiplier) bootstrap for the quantile coefficients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import norm

from .censoring import fit_censor_km
from .data import Dataset
from .errors import BootstrapError
from .estimator import QuantileFit, SolverConfig, default_starts, fit
from .parallel import pmap

__all__ = ["BootstrapResult", "bootstrap", "replicate_rng", "unit_exponential"]


@dataclass(frozen=True)
class BootstrapResult:
    """Replicate estimates and the intervals built from them.

    ``ci_lower``/``ci_upper`` are normal intervals around the point
    estimate using the replicate SD; ``pct_lower``/``pct_upper`` are
    percentile intervals of the replicates.
    """

    estimate: np.ndarray
    replicates: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    pct_lower: np.ndarray
    pct_upper: np.ndarray
    level: float
    n_failed: int
    B: int
    seed: int


def unit_exponential(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.exponential(1.0, n)


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Independent stream for replicate ``b``; depends only on (seed, b)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def _replicate(args):
    dataset, q, config, point, seed, b, sampler = args
    w = sampler(replicate_rng(seed, b), len(dataset))
    # the point estimate is tried first; further starts only if it fails
    starts = [point] + default_starts(dataset, q, config)
    cfg = config.with_(starts=starts, n_random_starts=0, early_stop=True)
    curve = fit_censor_km(dataset, w)
    res = fit(dataset, q, cfg, subject_weights=w, curve=curve)
    return res.beta.copy(), res.converged


def bootstrap(
    dataset: Dataset,
    q: float,
    config: SolverConfig | None = None,
    B: int = 500,
    level: float = 0.95,
    seed: int = 0,
    point: QuantileFit | None = None,
    weight_sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None,
    workers: int | None = None,
) -> BootstrapResult:
    """Multiplier bootstrap with unit-exponential subject weights.

    Each replicate refits the censoring curve with its weights and
    minimises the weighted estimating equation.  Replicates that do not
    converge are dropped and counted in ``n_failed``.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    config = config or SolverConfig()
    if point is None:
        point = fit(dataset, q, config)
    sampler = weight_sampler or unit_exponential
    jobs = [(dataset, q, config, point.beta, seed, b, sampler) for b in range(B)]
    results = pmap(_replicate, jobs, workers, chunksize=max(1, B // 32))
    reps = np.array([beta for beta, ok in results if ok])
    n_failed = B - len(reps)
    if len(reps) < 2:
        raise BootstrapError(f"only {len(reps)} of {B} bootstrap replicates converged")
    se = reps.std(axis=0, ddof=1)
    z = norm.ppf(0.5 + level / 2)
    est = point.beta
    alpha = 1.0 - level
    pct_lo, pct_hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2], axis=0)
    return BootstrapResult(
        estimate=np.array(est),
        replicates=reps,
        se=se,
        ci_lower=est - z * se,
        ci_upper=est + z * se,
        pct_lower=pct_lo,
        pct_upper=pct_hi,
        level=level,
        n_failed=n_failed,
        B=B,
        seed=seed,
    )
