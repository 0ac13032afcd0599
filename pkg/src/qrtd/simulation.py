"""Synthetic data with dosage-step covariates and Monte-Carlo studies.

Each subject receives two drug dosages: ``s1`` on ``[w1, w2)`` and ``s2``
from ``w2`` on.  Its covariate-only clock ``tau`` is drawn so that the
full warp integral exp(beta0) * tau has conditional median 1, and the
failure time is the closed-form inverse of that clock.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammainc, gammaincinv

from .bootstrap import bootstrap
from .data import CovariatePath, Dataset
from .errors import BootstrapError, CalibrationError
from .estimator import SolverConfig, fit
from .parallel import pmap
from .timewarp import invert_segments, warp_integral

__all__ = [
    "ScenarioConfig",
    "SimSubjectTruth",
    "SimulationTruth",
    "gamma_median",
    "gamma_medians",
    "draw_intrinsic_time",
    "failure_time",
    "calibrate_censoring_rate",
    "simulate_truth",
    "generate",
    "iq_sd",
    "summarize",
    "TrialResult",
    "StudyReport",
    "run_study",
]

IQR_NORMAL = 1.349
CALIBRATION_SIZE = 100_000


@dataclass(frozen=True)
class ScenarioConfig:
    """Design of one simulation scenario.

    ``changepoints`` is ``"fixed"`` (dosage changes at ``fixed_w``) or
    ``"random"`` (``w1`` and ``w2 - w1`` exponential with mean
    ``changepoint_mean``).  ``censoring_rate`` skips calibration when set.
    """

    n: int = 200
    beta_true: tuple[float, float, float] = (-1.0, 1.0, 1.0)
    q: float = 0.5
    changepoints: str = "fixed"
    fixed_w: tuple[float, float] = (0.6, 0.9)
    changepoint_mean: float = 0.25
    target_censoring: float = 0.2
    seed: int = 0
    censoring_rate: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0.0 <= self.target_censoring <= 0.9:
            raise ValueError("target_censoring must lie in [0, 0.9]")
        if self.changepoints not in ("fixed", "random"):
            raise ValueError("changepoints must be 'fixed' or 'random'")
        if len(self.beta_true) != 3:
            raise ValueError("beta_true has three coordinates (intercept, dosage 1, dosage 2)")
        if self.changepoints == "fixed" and not 0 < self.fixed_w[0] < self.fixed_w[1]:
            raise ValueError("fixed changepoints need 0 < w1 < w2")

    @property
    def label(self) -> str:
        return "fixed" if self.changepoints == "fixed" else "random"


@dataclass(frozen=True)
class SimSubjectTruth:
    tau: float
    tau_tilde: float
    t_true: float
    c: float
    s1: float
    s2: float
    v1: float
    v2: float
    z1: float
    z2: float
    w1: float
    w2: float


@dataclass(frozen=True)
class SimulationTruth:
    """Latent variables of a generated sample, one array per field."""

    tau: np.ndarray
    tau_tilde: np.ndarray
    t_true: np.ndarray
    c: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    censoring_rate: float = 0.0

    def __len__(self):
        return self.tau.shape[0]

    def subject(self, i: int) -> SimSubjectTruth:
        return SimSubjectTruth(**{
            k: float(getattr(self, k)[i]) for k in SimSubjectTruth.__dataclass_fields__
        })

    @property
    def y(self) -> np.ndarray:
        return np.minimum(self.t_true, self.c)

    @property
    def delta(self) -> np.ndarray:
        return self.t_true <= self.c

    def to_rows(self) -> list[dict]:
        names = list(SimSubjectTruth.__dataclass_fields__)
        cols = [getattr(self, k) for k in names]
        return [dict(zip(names, (float(c[i]) for c in cols))) for i in range(len(self))]


def gamma_median(shape: float, tol: float = 1e-12) -> float:
    """Median of the unit-scale gamma distribution, by bisection on its CDF."""
    if not shape > 0:
        raise ValueError(f"shape must be positive, got {shape!r}")
    return float(gamma_medians(np.array([shape], dtype=float), tol)[0])


def gamma_medians(shapes, tol: float = 1e-12) -> np.ndarray:
    """Vectorised :func:`gamma_median`.

    Bisection on the CDF, stopped once the bracket is narrower than
    ``tol * max(m, 1)``.  The bracket is seeded tightly around scipy's
    inverse incomplete gamma and widened to (0, shape + 1] wherever that
    seed fails to bracket the root.
    """
    shapes = np.asarray(shapes, dtype=float)
    if np.any(~(shapes > 0)):
        raise ValueError("gamma shapes must be positive")
    guess = gammaincinv(shapes, 0.5)
    lo = guess * (1 - 1e-9)
    hi = guess * (1 + 1e-9)
    ok = (gammainc(shapes, lo) <= 0.5) & (gammainc(shapes, hi) >= 0.5) & np.isfinite(guess)
    # the gamma median lies below the mean
    lo = np.where(ok, lo, 0.0)
    hi = np.where(ok, hi, shapes + 1.0)
    for _ in range(2000):
        width = hi - lo
        if np.all(width <= tol * np.maximum(hi, 1.0)):
            break
        mid = 0.5 * (lo + hi)
        below = gammainc(shapes, mid) < 0.5
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def draw_intrinsic_time(s1, beta0: float, rng: np.random.Generator):
    """Covariate-only clock value tau = tau_tilde * exp(-beta0).

    ``tau_tilde`` is gamma with shape ``s1`` and scale 1/median, so it has
    median 1 and exp(beta0) * tau (the full warp integral at the failure
    time) does too.
    """
    s1_arr = np.asarray(s1, dtype=float)
    tau_tilde = rng.gamma(s1_arr, 1.0 / gamma_medians(np.atleast_1d(s1_arr)).reshape(s1_arr.shape))
    tau = tau_tilde * math.exp(-beta0)
    return tau if np.ndim(s1) else float(tau)


def _dosage_path(w1, w2, s1, s2):
    return CovariatePath([0.0, w1, w2], [[1.0, 0.0, 0.0], [1.0, s1, 0.0], [1.0, 0.0, s2]])


def failure_time(tau, w1, w2, s1, s2, beta, check: bool = False):
    """Failure time whose covariate-only clock reaches ``tau``.

    Closed form over the three dosage regimes.  Results that fall outside
    their regime through rounding are recomputed by inverting the clock
    directly; ``check`` asserts the defining relation at every output.
    """
    b1, b2 = float(beta[1]), float(beta[2])
    tau, w1, w2, s1, s2 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (tau, w1, w2, s1, s2)))
    scalar = tau.ndim == 0
    tau, w1, w2, s1, s2 = (np.atleast_1d(v) for v in (tau, w1, w2, s1, s2))
    if np.any(~(w1 > 0)) or np.any(~(w2 > w1)):
        raise ValueError("changepoints must satisfy 0 < w1 < w2")
    a = (w2 - w1) * np.exp(b1 * s1)
    first = tau <= w1
    third = tau >= w1 + a
    t = np.where(
        first,
        tau,
        np.where(
            third,
            w2 + (tau - w1 - a) * np.exp(-b2 * s2),
            w1 + (tau - w1) * np.exp(-b1 * s1),
        ),
    )
    second = ~first & ~third
    bad = (second & ~((t > w1) & (t <= w2))) | (third & (t < w2))
    if np.any(bad):
        t = t.copy()
        t[bad] = _invert_clock(tau[bad], w1[bad], w2[bad], s1[bad], s2[bad], b1, b2)
    if check:
        clock = _clock(t, w1, w2, s1, s2, b1, b2)
        err = np.abs(clock - tau) / np.maximum(tau, 1.0)
        if np.any(err > 1e-9):
            raise AssertionError(f"clock residual {err.max():.3g} exceeds 1e-9")
    return float(t[0]) if scalar else t


def _segments(w1, w2, s1, s2, b1, b2):
    zeros = np.zeros_like(w1)
    starts = np.stack([zeros, w1, w2], axis=-1)
    ends = np.stack([w1, w2, np.full_like(w1, np.inf)], axis=-1)
    rates = np.stack([np.ones_like(w1), np.exp(b1 * s1), np.exp(b2 * s2)], axis=-1)
    return starts, ends, rates


def _clock(t, w1, w2, s1, s2, b1, b2):
    starts, ends, rates = _segments(w1, w2, s1, s2, b1, b2)
    length = np.clip(np.minimum(ends, t[..., None]) - starts, 0.0, None)
    return np.sum(rates * length, axis=-1)


def _invert_clock(tau, w1, w2, s1, s2, b1, b2):
    starts, ends, rates = _segments(w1, w2, s1, s2, b1, b2)
    return invert_segments(starts, ends, rates, tau)


def _draw_latent(scenario: ScenarioConfig, n: int, rng: np.random.Generator) -> dict:
    z1 = rng.exponential(1.0, n)
    z2 = rng.exponential(1.0, n)
    v1 = rng.gamma(4.0, 0.2, n)
    v2 = rng.gamma(4.0, 0.2, n)
    s1 = v1 + z1 / 2
    s2 = v2 + z2 / 2
    if scenario.changepoints == "fixed":
        w1 = np.full(n, float(scenario.fixed_w[0]))
        w2 = np.full(n, float(scenario.fixed_w[1]))
    else:
        w1 = rng.exponential(scenario.changepoint_mean, n)
        w2 = w1 + rng.exponential(scenario.changepoint_mean, n)
    beta = scenario.beta_true
    tau_tilde = rng.gamma(s1, 1.0 / gamma_medians(s1))
    tau = tau_tilde * math.exp(-beta[0])
    t = failure_time(tau, w1, w2, s1, s2, beta)
    return dict(tau=tau, tau_tilde=tau_tilde, t_true=t, s1=s1, s2=s2,
                v1=v1, v2=v2, z1=z1, z2=z2, w1=w1, w2=w2)


def _censoring_fraction(t, rate):
    # expected censored fraction given the failure times, E[1 - exp(-rate T)]
    return float(np.mean(-np.expm1(-rate * t)))


def calibrate_censoring_rate(scenario: ScenarioConfig, size: int = CALIBRATION_SIZE) -> float:
    """Exponential censoring rate giving the target censored fraction.

    Bisection on the rate against a Monte-Carlo estimate of Pr(C < T)
    over ``size`` simulated failure times (drawn once, from the scenario
    seed).  A zero target means no censoring and returns 0.
    """
    return _calibrate(
        scenario.changepoints, tuple(scenario.fixed_w), scenario.changepoint_mean,
        tuple(scenario.beta_true), scenario.target_censoring, scenario.seed, size,
    )


@lru_cache(maxsize=64)
def _calibrate(changepoints, fixed_w, cp_mean, beta, target, seed, size):
    if target == 0:
        return 0.0
    if not 0.0 < target <= 0.9:
        raise CalibrationError(f"censoring target {target} is outside (0, 0.9]")
    scenario = ScenarioConfig(n=size, beta_true=beta, changepoints=changepoints, fixed_w=fixed_w,
                              changepoint_mean=cp_mean, target_censoring=target)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xCA1,)))
    t = _draw_latent(scenario, size, rng)["t_true"]
    lo, hi = 0.0, 1.0
    while _censoring_fraction(t, hi) < target:
        hi *= 2.0
        if hi > 1e8:
            raise CalibrationError(f"censoring target {target} unreachable")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _censoring_fraction(t, mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return 0.5 * (lo + hi)


def simulate_truth(scenario: ScenarioConfig, rng: np.random.Generator | None = None) -> SimulationTruth:
    """Draw latent variables and censoring times for ``scenario.n`` subjects."""
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    rate = scenario.censoring_rate
    if rate is None:
        rate = calibrate_censoring_rate(scenario)
    lat = _draw_latent(scenario, scenario.n, rng)
    c = rng.exponential(1.0 / rate, scenario.n) if rate > 0 else np.full(scenario.n, np.inf)
    return SimulationTruth(c=c, censoring_rate=rate, **lat)


def generate(scenario: ScenarioConfig, rng: np.random.Generator | None = None):
    """Generate a dataset and its latent-variable sidecar.

    Paths have breakpoints (0, w1, w2) and values (1, 0, 0), (1, s1, 0),
    (1, 0, s2); instruments are (1, z1, z2).
    """
    truth = simulate_truth(scenario, rng)
    n = len(truth)
    y = truth.y
    delta = truth.delta
    breakpoints = np.stack([np.zeros(n), truth.w1, truth.w2], axis=1)
    values = np.zeros((n, 3, 3))
    values[:, :, 0] = 1.0
    values[:, 1, 1] = truth.s1
    values[:, 2, 2] = truth.s2
    z = np.stack([np.ones(n), truth.z1, truth.z2], axis=1)
    return Dataset.from_arrays(y, delta, z, breakpoints, values), truth


def iq_sd(x) -> float:
    """Interquartile range divided by 1.349 (normal-consistent spread)."""
    q25, q75 = np.percentile(np.asarray(x, dtype=float), [25, 75])
    return float((q75 - q25) / IQR_NORMAL)


def summarize(estimates, truth=None, covered=None) -> dict:
    """Mean, median, SD and IQ-SD of one coefficient's estimates.

    Dispersion needs two or more values and is ``None`` otherwise.
    """
    x = np.asarray(estimates, dtype=float)
    out = {
        "mean": float(np.mean(x)),
        "median": float(np.median(x)),
        "sd": float(np.std(x, ddof=1)) if x.size > 1 else None,
        "iqsd": iq_sd(x) if x.size > 1 else None,
        "coverage": None,
    }
    if covered is not None:
        cov = np.asarray([c for c in covered if c is not None], dtype=float)
        out["coverage"] = float(cov.mean()) if cov.size else None
    return out


@dataclass(frozen=True)
class TrialResult:
    beta: tuple
    converged: bool
    se: tuple | None = None
    ci_lower: tuple | None = None
    ci_upper: tuple | None = None
    boot_failed: int = 0


def trial_seed(master: int, scenario_index: int, trial: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(scenario_index, trial)).generate_state(1)[0])


def _run_trial(args) -> TrialResult:
    scenario, seed, B, level, config = args
    data, _ = generate(replace(scenario, seed=seed))
    est = fit(data, scenario.q, config)
    if B <= 0:
        return TrialResult(tuple(est.beta), est.converged)
    try:
        res = bootstrap(data, scenario.q, config, B=B, level=level, seed=seed, point=est, workers=1)
    except BootstrapError:
        return TrialResult(tuple(est.beta), est.converged, boot_failed=B)
    return TrialResult(tuple(est.beta), est.converged, tuple(res.se),
                       tuple(res.ci_lower), tuple(res.ci_upper), res.n_failed)


COEF_NAMES = ("beta0", "beta1", "beta2")
STUDY_COLUMNS = ("scenario", "n", "censoring", "coefficient", "mean", "median", "sd", "iqsd", "coverage")


@dataclass
class StudyReport:
    rows: list[dict]
    trials: dict = field(default_factory=dict)
    seed: int = 0
    B: int = 0

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            for line in header_comment.splitlines():
                buf.write(f"# {line}\n")
        w = csv.DictWriter(buf, fieldnames=STUDY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                        for k in STUDY_COLUMNS})
        return buf.getvalue()

    def row(self, scenario: str, n: int, censoring: float, coefficient: str) -> dict:
        for r in self.rows:
            if (r["scenario"], r["n"], r["censoring"], r["coefficient"]) == (scenario, n, censoring, coefficient):
                return r
        raise KeyError((scenario, n, censoring, coefficient))


def run_study(grid: Iterable[ScenarioConfig], trials: int, B: int = 0, seed: int = 0,
              config: SolverConfig | None = None, level: float = 0.95,
              workers: int | None = None) -> StudyReport:
    """Repeat generate -> fit -> bootstrap over scenarios and summarise.

    Every trial uses its own seed derived from ``(seed, scenario index,
    trial)``, so results do not depend on ``workers``.  Coverage is the
    fraction of trials whose normal bootstrap interval holds the truth.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    config = config or SolverConfig()
    rows, by_scenario = [], {}
    for si, scenario in enumerate(grid):
        if scenario.censoring_rate is None:
            scenario = replace(scenario, seed=seed,
                               censoring_rate=calibrate_censoring_rate(replace(scenario, seed=seed)))
        jobs = [(scenario, trial_seed(seed, si, t), B, level, config) for t in range(trials)]
        results = pmap(_run_trial, jobs, workers)
        by_scenario[si] = results
        est = np.array([r.beta for r in results])
        for j, name in enumerate(COEF_NAMES):
            covered = None
            if B > 0:
                covered = [
                    None if r.ci_lower is None else (r.ci_lower[j] <= scenario.beta_true[j] <= r.ci_upper[j])
                    for r in results
                ]
            stats = summarize(est[:, j], covered=covered)
            rows.append({"scenario": scenario.label, "n": scenario.n,
                         "censoring": scenario.target_censoring, "coefficient": name, **stats})
    return StudyReport(rows, by_scenario, seed, B)
