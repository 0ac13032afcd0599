"""Inverse-probability-of-censoring weighted quantile estimating equation.

The estimating function is

    U(beta) = n^-1 sum_i w_i delta_i z_i / G(y_i) * (k(J_i(beta) - 1) - q)

with J_i the warp integral of subject i up to its follow-up time and k
either the exact indicator of a positive argument or its logistic
smoothing 1 / (1 + exp(-a x)).  Estimates minimise ||U|| over beta.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize
from scipy.special import expit

from .censoring import CensorCurve, fit_censor_km, ipcw_survival
from .data import Dataset
from .errors import NoEventsError, WarpRangeError
from .timewarp import Coefficients, segment_rates

__all__ = [
    "SolverConfig",
    "QuantileFit",
    "EstimatingEquation",
    "smoothed_indicator",
    "estimating_equation",
    "objective",
    "objective_gradient",
    "default_starts",
    "fit",
    "solve_norm",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Settings for the norm minimisation.

    ``smoothing_a=None`` uses the exact indicator.  ``starts=None`` uses
    the data-driven defaults from :func:`default_starts`; explicit
    starts are tried before the ``n_random_starts`` random ones.  With
    ``early_stop`` the search ends at the first start that converges.
    ``root_first`` tries a quasi-Newton root step from each start before
    the simplex search, which saves evaluations when U is expensive.
    """

    smoothing_a: float | None = 20.0
    tolerance: float = 1e-6
    max_iterations: int = 2000
    starts: Sequence[Sequence[float]] | None = None
    n_random_starts: int = 4
    seed: int = 0
    polish: bool = True
    early_stop: bool = False
    root_first: bool = False

    def __post_init__(self):
        if self.smoothing_a is not None and not self.smoothing_a > 0:
            raise ValueError("smoothing_a must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")

    def with_(self, **changes) -> SolverConfig:
        return replace(self, **changes)


@dataclass(frozen=True)
class QuantileFit:
    coefficients: Coefficients
    residual_norm: float
    converged: bool
    n_events_used: int
    clamp_count: int
    start_index: int
    smoothing_a: float | None = None
    candidates: tuple = field(default=(), repr=False)

    @property
    def beta(self) -> np.ndarray:
        return self.coefficients.beta

    @property
    def q(self) -> float:
        return self.coefficients.q


def smoothed_indicator(x, a):
    """Logistic approximation 1 / (1 + exp(-a x)) to the indicator of x > 0."""
    if not a > 0:
        raise ValueError("a must be positive")
    return expit(a * np.asarray(x, dtype=float))


class EstimatingEquation:
    """U(beta) and its Jacobian for one dataset, censoring curve and weights.

    Everything that does not depend on beta is computed once here, which
    matters inside the solver loop.
    """

    def __init__(self, dataset: Dataset, q: float, curve: CensorCurve | None = None,
                 a: float | None = None, subject_weights=None):
        if not 0.0 < q < 1.0:
            raise ValueError(f"quantile level must lie in (0, 1), got {q}")
        if dataset.n_events == 0:
            raise NoEventsError()
        if a is not None and not a > 0:
            raise ValueError("a must be positive")
        packed = dataset.packed
        n = len(dataset)
        w = np.ones(n) if subject_weights is None else np.asarray(subject_weights, dtype=float)
        if w.shape != (n,):
            raise ValueError(f"expected {n} subject weights, got shape {w.shape}")
        if curve is None:
            curve = fit_censor_km(dataset, None if subject_weights is None else w)
        ghat, clamps = ipcw_survival(curve, packed.y)
        self.dataset = dataset
        self.q = float(q)
        self.a = a
        self.curve = curve
        self.clamp_count = clamps
        self.n = n
        self.dim = dataset.dim
        # failures only; censored subjects contribute nothing
        events = packed.delta
        self.n_events = int(events.sum())
        self._idx = np.flatnonzero(events)
        sub = packed._replace(
            y=packed.y[events], delta=packed.delta[events], z=packed.z[events],
            starts=packed.starts[events], ends=packed.ends[events],
            values=packed.values[events],
        )
        self._packed = sub
        self._coef = (w[events] / ghat[events])[:, None] * sub.z / n
        # segment lengths inside [0, y] do not depend on beta
        self._length = np.clip(np.minimum(sub.ends, sub.y[:, None]) - sub.starts, 0.0, None)
        self._active = self._length > 0
        self._values = np.ascontiguousarray(sub.values)

    def warp(self, beta, with_jacobian=False):
        """Warp integrals of the failures at their follow-up times."""
        rates = segment_rates(self._values, beta, active=self._active)
        contrib = np.where(self._active, rates, 0.0) * self._length
        if not with_jacobian:
            return contrib.sum(axis=1)
        return contrib.sum(axis=1), np.einsum("nk,nkd->nd", contrib, self._values)

    def _kappa(self, j):
        if self.a is None:
            return (j > 1.0).astype(float)
        return expit(self.a * (j - 1.0))

    def __call__(self, beta) -> np.ndarray:
        return self._coef.T @ (self._kappa(self.warp(beta)) - self.q)

    def jacobian(self, beta) -> np.ndarray:
        """dU/dbeta of the smoothed equation (zero almost everywhere when exact)."""
        if self.a is None:
            return np.zeros((self.dim, self.dim))
        j, dj = self.warp(beta, with_jacobian=True)
        s = expit(self.a * (j - 1.0))
        slope = self.a * s * (1.0 - s)
        return self._coef.T @ (slope[:, None] * dj)

    def terms(self, beta) -> np.ndarray:
        """Per-subject contributions (n, d) whose column sums give U."""
        out = np.zeros((self.n, self.dim))
        j = self.warp(beta)
        out[self._idx] = self._coef * (self._kappa(j) - self.q)[:, None]
        return out


def estimating_equation(dataset: Dataset, beta, q: float, curve: CensorCurve | None = None,
                        a: float | None = None, subject_weights=None) -> np.ndarray:
    """Evaluate U at ``beta``; ``a=None`` uses the exact indicator."""
    return EstimatingEquation(dataset, q, curve, a, subject_weights)(beta)


def objective(equation: Callable, beta) -> float:
    """Squared Euclidean norm of an estimating function."""
    u = equation(beta)
    return float(u @ u)


def objective_gradient(equation: EstimatingEquation, beta) -> np.ndarray:
    """Analytic gradient of ||U||^2 for the smoothed equation."""
    u = equation(beta)
    return 2.0 * equation.jacobian(beta).T @ u


def default_starts(dataset: Dataset, q: float, config: SolverConfig) -> list[np.ndarray]:
    """Starting points: intercept-only guess, zero vector, random perturbations.

    The intercept-only guess solves the estimating equation exactly when
    covariates have no effect and there is no censoring.
    """
    d = dataset.dim
    packed = dataset.packed
    if config.starts is not None:
        starts = [np.asarray(s, dtype=float) for s in config.starts]
        base = starts[0]
    else:
        y = packed.y[packed.delta]
        y = y[y > 0]
        guess = np.zeros(d)
        if y.size:
            guess[0] = -np.log(np.quantile(y, 1.0 - q))
        base = guess
        starts = [guess, np.zeros(d)]
    rng = np.random.default_rng(config.seed)
    starts += [base + rng.normal(0.0, 0.5, d) for _ in range(config.n_random_starts)]
    return starts


def _safe_norm2(equation, beta):
    try:
        u = equation(beta)
    except WarpRangeError:
        return np.inf
    val = float(u @ u)
    return val if np.isfinite(val) else np.inf


def _root(equation, jacobian, x0):
    """Powell hybrid root search; returns (x, ||U||^2), inf on failure."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sol = optimize.root(equation, x0, jac=jacobian, method="hybr",
                                options={"xtol": 1e-13, "maxfev": 200 * (len(x0) + 1)})
    except WarpRangeError:
        return x0, np.inf
    return np.asarray(sol.x, dtype=float), _safe_norm2(equation, sol.x)


def _descend(equation, jacobian, x0, config):
    """Simplex descent on ||U||^2 followed by an optional root polish."""
    x0 = np.asarray(x0, dtype=float)
    f0 = _safe_norm2(equation, x0)
    if not np.isfinite(f0):
        raise WarpRangeError(
            f"non-finite objective at start beta={np.array2string(x0, precision=6)}"
        )
    tol2 = config.tolerance ** 2
    if f0 <= tol2:
        return x0, f0
    if config.root_first and config.smoothing_a is not None:
        x, f = _root(equation, jacobian, x0)
        if f <= tol2:
            return x, f
    res = optimize.minimize(
        lambda b: _safe_norm2(equation, b), x0, method="Nelder-Mead",
        options={
            "maxiter": config.max_iterations,
            "xatol": 1e-6,
            "fatol": tol2 * 1e-2,
            "initial_simplex": x0 + np.vstack([np.zeros(len(x0)), 0.25 * np.eye(len(x0))]),
        },
    )
    x, f = np.asarray(res.x, dtype=float), float(res.fun)
    if not f <= f0:
        x, f = x0, f0
    if config.polish and config.smoothing_a is not None and f > tol2 * 1e-6:
        xp, fp = _root(equation, jacobian, x)
        if fp < f:
            x, f = xp, fp
    if not np.isfinite(f):
        raise WarpRangeError(f"non-finite objective at beta={np.array2string(x, precision=6)}")
    return x, f


def solve_norm(equation: Callable, jacobian: Callable | None, starts, config: SolverConfig):
    """Minimise ||equation(beta)|| from each start and pick the winner.

    Candidates within tolerance count as tied on residual and the one with
    the smallest ||beta|| wins; otherwise the smallest residual wins.
    Returns ``(beta, residual_norm, converged, start_index, candidates)``.
    """
    candidates = []
    for k, x0 in enumerate(starts):
        x, f = _descend(equation, jacobian, x0, config)
        norm = float(np.sqrt(f))
        candidates.append((x, norm, k))
        log.debug("start %d: residual %.3g at %s", k, norm, x)
        if config.early_stop and norm <= config.tolerance:
            break

    def rank(c):
        x, norm, k = c
        converged = norm <= config.tolerance
        return (0.0 if converged else norm, float(np.linalg.norm(x)), k)

    best = min(candidates, key=rank)
    x, norm, k = best
    return x, norm, norm <= config.tolerance, k, tuple(candidates)


def fit(dataset: Dataset, q: float, config: SolverConfig | None = None,
        subject_weights=None, curve: CensorCurve | None = None) -> QuantileFit:
    """Estimate the quantile coefficients by minimising ||U||.

    With ``subject_weights`` the censoring curve is refitted with the same
    weights (unless ``curve`` is given) and each failure's contribution is
    multiplied by its weight.
    """
    config = config or SolverConfig()
    eq = EstimatingEquation(dataset, q, curve, config.smoothing_a, subject_weights)
    if eq.n_events < dataset.dim + 1:
        warnings.warn(
            f"only {eq.n_events} events for {dataset.dim} coefficients; "
            "the estimate is poorly determined",
            RuntimeWarning,
            stacklevel=2,
        )
    starts = default_starts(dataset, q, config)
    beta, norm, converged, k, cands = solve_norm(eq, eq.jacobian, starts, config)
    return QuantileFit(
        coefficients=Coefficients(beta, q),
        residual_norm=norm,
        converged=converged,
        n_events_used=eq.n_events,
        clamp_count=eq.clamp_count,
        start_index=k,
        smoothing_a=config.smoothing_a,
        candidates=cands,
    )
