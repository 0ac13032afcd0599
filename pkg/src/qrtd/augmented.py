"""Augmented (doubly-robust) estimating equation.

The IPCW equation uses censored subjects only through the censoring
curve.  The augmentation adds, for every subject, the integral of a
posited conditional expectation Q against the censoring martingale:

    sum over censoring jump times t <= y_i of
        Q_i(t) * (dN_i(t) - dLambda(t)) / G(t-)

where dN_i jumps at the subject's own censoring time.  Q is supplied by a
:class:`PositedModel`; :func:`monte_carlo_q` builds one from the known
simulation law.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import gammaincc

from .censoring import GHAT_FLOOR, CensorCurve, cumhaz_at, fit_censor_km, survival_at
from .data import CovariatePath, Dataset, Subject
from .errors import DataError
from .estimator import (
    EstimatingEquation,
    QuantileFit,
    SolverConfig,
    default_starts,
    fit,
    solve_norm,
)
from .simulation import ScenarioConfig, gamma_medians
from .timewarp import Coefficients, integrate_segments, invert_segments, warp_integral

__all__ = [
    "History",
    "PositedModel",
    "ZeroModel",
    "MonteCarloQ",
    "monte_carlo_q",
    "m_function",
    "AugmentedEquation",
    "dr_estimating_equation",
    "fit_dr",
]


@dataclass(frozen=True)
class History:
    """What is known about a subject at time ``s``: instrument and path on [0, s]."""

    z: np.ndarray
    path: CovariatePath
    s: float


class PositedModel:
    """Working model supplying Q(s, beta, H(s)) = E[m(H, beta) | T >= s, H(s)].

    Subclasses implement :meth:`q_value`.  :meth:`prepare` and
    :meth:`evaluate` batch the calls needed by one estimating equation;
    the defaults simply loop over :meth:`q_value`.
    """

    name = "posited"
    draws = 1
    seed = 0

    def q_value(self, s: float, beta, history: History, q: float) -> np.ndarray:
        raise NotImplementedError

    def prepare(self, dataset: Dataset, subject_index: np.ndarray, times: np.ndarray) -> Any:
        return dataset, subject_index, times

    def evaluate(self, prepared, beta, q: float) -> np.ndarray:
        """Q for every (subject, time) pair, shape (pairs, d)."""
        dataset, idx, times = prepared
        out = np.empty((len(idx), dataset.dim))
        for k, (i, t) in enumerate(zip(idx, times)):
            s = dataset[i]
            out[k] = self.q_value(t, beta, History(s.z, s.path, t), q)
        return out


class ZeroModel(PositedModel):
    """Q identically zero; the augmented equation reduces to the IPCW one."""

    name = "zero"

    def q_value(self, s, beta, history, q):
        return np.zeros(history.z.shape[0])

    def prepare(self, dataset, subject_index, times):
        return len(subject_index), dataset.dim

    def evaluate(self, prepared, beta, q):
        return np.zeros(prepared)


def m_function(subject: Subject, beta, q: float) -> np.ndarray:
    """z * (1[warp integral up to the failure time > 1] - q) for an observed failure."""
    if not subject.delta:
        raise DataError("m_function needs an observed failure time (delta = 1)")
    j = warp_integral(subject.path, beta, subject.y)
    return subject.z * (float(j > 1.0) - q)


def _z_key(z) -> int:
    digest = hashlib.blake2b(np.ascontiguousarray(z, dtype=float).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


#: Elements per block when evaluating (keys x draws) arrays.
_BLOCK = 1 << 18


@dataclass
class _KeyGroup:
    """Continuation keys sharing a draw count, with their pairs sorted by key."""

    loc: np.ndarray      # subject (local index) of each key
    regime: np.ndarray   # number of changepoints revealed: 0, 1 or 2
    anchor: np.ndarray   # time the residual waits start from (random design)
    draws: int
    pair: np.ndarray     # original pair positions, sorted by key
    key: np.ndarray      # key of each sorted pair
    clock: np.ndarray    # true covariate clock of each sorted pair
    per_pair: bool = False
    den: np.ndarray | None = None

    def blocks(self):
        step = max(1, _BLOCK // self.draws)
        for k0 in range(0, self.loc.size, step):
            k1 = min(k0 + step, self.loc.size)
            p0, p1 = np.searchsorted(self.key, [k0, k1])
            yield k0, k1, p0, p1


class MonteCarloQ(PositedModel):
    """Q under the simulation law of :mod:`qrtd.simulation`.

    Unknown future quantities (dosages not yet revealed by the path and,
    for random changepoints, the residual waiting times) are drawn ``draws``
    times per subject.  The draws depend only on the model seed and the
    subject's instrument, so they are common across beta and across calls.
    Given a continuation the covariate clock tau is integrated out exactly
    through its gamma survival function, which also reweights the draws by
    the probability of surviving to ``s``.  Fully revealed paths need no
    draws at all.

    Only three-segment dosage paths (breakpoints 0, w1, w2) are supported.
    """

    def __init__(self, scenario: ScenarioConfig, draws: int = 1000, seed: int = 0,
                 name: str = "monte-carlo"):
        if draws < 1:
            raise ValueError("draws must be at least 1")
        self.scenario = scenario
        self.draws = int(draws)
        self.seed = int(seed)
        self.name = name
        self._b0, self._b1, self._b2 = (float(b) for b in scenario.beta_true)

    def _subject_draws(self, z):
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(_z_key(z),)))
        m = self.draws
        return rng.gamma(4.0, 0.2, m), rng.gamma(4.0, 0.2, m), rng.exponential(1.0, m), rng.exponential(1.0, m)

    def prepare(self, dataset, subject_index, times):
        packed = dataset.packed
        if packed.starts.shape[1] != 3 or dataset.dim != 3:
            raise DataError("monte-carlo Q needs three-segment dosage paths with three coordinates")
        idx = np.asarray(subject_index, dtype=np.int64)
        t = np.asarray(times, dtype=float)
        subj, loc = np.unique(idx, return_inverse=True)
        ns, m = subj.size, self.draws
        z = packed.z[subj]
        draws = [self._subject_draws(zi) for zi in z]
        v1, v2, e1, e2 = (np.array([d[k] for d in draws]).reshape(ns, m) for k in range(4))
        e0 = math.exp(self._b0)
        sub = {
            "w1": packed.starts[subj, 1], "w2": packed.starts[subj, 2],
            "s1": packed.values[subj, 1, 1], "s2": packed.values[subj, 2, 2],
            "s1_draw": v1 + z[:, 1:2] / 2, "s2_draw": v2 + z[:, 2:3] / 2,
            "e1": e1, "e2": e2,
        }
        # unrevealed first dosages are placeholders; their scale is never read
        sub["scale"] = e0 * gamma_medians(np.where(sub["s1"] > 0, sub["s1"], 1.0))
        sub["scale_draw"] = e0 * gamma_medians(sub["s1_draw"])
        regime = (sub["w1"][loc] < t).astype(np.int64) + (sub["w2"][loc] < t)
        rates0 = np.exp(packed.values[idx] @ np.array([0.0, self._b1, self._b2]))
        clock = integrate_segments(packed.starts[idx], packed.ends[idx], rates0, t)

        random = self.scenario.changepoints == "random"
        pos = np.arange(idx.size)
        groups = []
        for known in (True, False):
            sel = pos[(regime == 2) == known]
            if random and not known:
                code = sel  # one key per pair
            else:
                code = loc[sel] * 3 + regime[sel]
            uniq, first, inv = np.unique(code, return_index=True, return_inverse=True)
            order = np.argsort(inv, kind="stable")
            g = _KeyGroup(
                loc=loc[sel][first], regime=regime[sel][first],
                anchor=t[sel][first] if random and not known else np.zeros(uniq.size),
                draws=1 if known else m,
                pair=sel[order], key=inv.reshape(-1)[order], clock=clock[sel][order],
                per_pair=random and not known,
            )
            g.den = np.empty(g.pair.size)
            for k0, k1, p0, p1 in g.blocks():
                _, _, s1, _, scale = self._continuation(sub, g, k0, k1)
                pk = g.key[p0:p1] - k0
                g.den[p0:p1] = gammaincc(s1[pk], g.clock[p0:p1, None] * scale[pk]).sum(axis=1)
            groups.append(g)
        return {"sub": sub, "groups": groups, "z": packed.z[idx], "n_pairs": idx.size}

    def _continuation(self, sub, g, k0, k1):
        """Arrays (w1, w2, s1, s2, scale) of shape (keys, draws) for keys k0..k1."""
        loc, reg = g.loc[k0:k1], g.regime[k0:k1, None]
        k = loc.size
        if g.draws == 1:
            return (sub["w1"][loc, None], sub["w2"][loc, None], sub["s1"][loc, None],
                    sub["s2"][loc, None], sub["scale"][loc, None])
        first = reg == 0
        s1 = np.where(first, sub["s1_draw"][loc], sub["s1"][loc, None])
        scale = np.where(first, sub["scale_draw"][loc], sub["scale"][loc, None])
        s2 = sub["s2_draw"][loc]
        sc = self.scenario
        if sc.changepoints == "fixed":
            w1 = np.full((k, g.draws), float(sc.fixed_w[0]))
            w2 = np.full((k, g.draws), float(sc.fixed_w[1]))
        else:
            mean = sc.changepoint_mean
            anchor = g.anchor[k0:k1, None]
            w1 = np.where(first, anchor + mean * sub["e1"][loc], sub["w1"][loc, None])
            w2 = np.where(first, w1 + mean * sub["e2"][loc], anchor + mean * sub["e2"][loc])
        return w1, w2, s1, s2, scale

    def _tau_star(self, beta, w1, w2, s1, s2):
        """True clock value at the time the beta-warp of the continuation reaches 1.

        Closed form over the three segments; the warp reaches 1 in the first
        segment whose cumulative mass covers it.
        """
        b0, b1, b2 = beta
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lead = math.exp(b0)
            m0 = lead * w1
            g1 = self._b1 * s1
            m1 = np.exp(b0 + b1 * s1) * (w2 - w1)
            in_first = m0 >= 1.0
            in_second = ~in_first & (m0 + m1 >= 1.0)
            tau2 = w1 + (1.0 - m0) * np.exp(g1 - b0 - b1 * s1)
            tau3 = w1 + (w2 - w1) * np.exp(g1) + (1.0 - m0 - m1) * np.exp(self._b2 * s2 - b0 - b2 * s2)
            out = np.where(in_first, math.exp(-b0), np.where(in_second, tau2, tau3))
        return np.where(np.isnan(out), np.inf, out)

    def _prob(self, prep, beta):
        """Pr(beta-warp at T > 1 | T >= s, history) for every pair."""
        beta = np.asarray(beta, dtype=float)
        sub = prep["sub"]
        p = np.empty(prep["n_pairs"])
        for g in prep["groups"]:
            for k0, k1, p0, p1 in g.blocks():
                if p1 == p0:
                    continue
                w1, w2, s1, s2, scale = self._continuation(sub, g, k0, k1)
                tau = self._tau_star(beta, w1, w2, s1, s2)
                pk = g.key[p0:p1] - k0
                clock, den = g.clock[p0:p1], g.den[p0:p1]
                if g.per_pair:
                    numer = gammaincc(s1, np.maximum(tau, clock[:, None]) * scale).sum(axis=1)
                else:
                    numer = gammaincc(s1, tau * scale).sum(axis=1)[pk]
                    # survival to s already past some tau*: those draws are capped at the clock
                    slow = clock > tau.min(axis=1)[pk]
                    if np.any(slow):
                        ks = pk[slow]
                        x = np.maximum(tau[ks], clock[slow, None])
                        numer[slow] = gammaincc(s1[ks], x * scale[ks]).sum(axis=1)
                with np.errstate(invalid="ignore", divide="ignore"):
                    pg = numer / den
                degenerate = ~(den > 0)
                if np.any(degenerate):
                    ks = pk[degenerate]
                    pg[degenerate] = np.mean(tau[ks] <= clock[degenerate, None], axis=1)
                p[g.pair[p0:p1]] = np.clip(pg, 0.0, 1.0)
        return p

    def evaluate(self, prepared, beta, q):
        p = self._prob(prepared, beta)
        return prepared["z"] * (p - q)[:, None]

    def q_value(self, s, beta, history, q):
        if not s >= 0:
            raise ValueError("s must be non-negative")
        path = history.path
        if path.n_segments < 3:
            # a history cut at s: placeholder segments after s are never read
            last = max(float(path.breakpoints[-1]), float(s))
            pad = 3 - path.n_segments
            path = CovariatePath(
                np.concatenate([path.breakpoints, last + 1.0 + np.arange(pad)]),
                np.vstack([path.values, np.tile(path.values[:1], (pad, 1))]),
            )
        dummy = Dataset((Subject(max(s, 1.0), False, path, history.z),))
        prep = self.prepare(dummy, np.array([0]), np.array([float(s)]))
        return self.evaluate(prep, beta, q)[0]


def monte_carlo_q(scenario: ScenarioConfig, draws: int = 1000, seed: int = 0) -> MonteCarloQ:
    """Posited model equal to the simulation law with the scenario's parameters."""
    return MonteCarloQ(scenario, draws=draws, seed=seed)


class AugmentedEquation:
    """IPCW equation plus the censoring-martingale augmentation.

    ``horizon='all'`` pairs every subject with every censoring jump and
    lets the at-risk indicator remove the jumps after its follow-up.
    """

    def __init__(self, dataset: Dataset, q: float, model: PositedModel,
                 curve: CensorCurve | None = None, a: float | None = None,
                 horizon: str = "observed", check_bounds: bool = True):
        if curve is None:
            curve = fit_censor_km(dataset)
        self.base = EstimatingEquation(dataset, q, curve, a)
        self.model = model
        self.q = float(q)
        self.n = len(dataset)
        self.dim = dataset.dim
        self.check_bounds = check_bounds
        packed = dataset.packed
        y, delta = packed.y, packed.delta
        times = np.asarray(curve.jump_times, dtype=float)
        dlam = np.asarray(curve.increments, dtype=float)
        g_left = np.maximum(np.asarray(survival_at(curve, times, "left"), dtype=float), GHAT_FLOOR)
        if horizon == "observed":
            at_risk = times[None, :] <= y[:, None]
        elif horizon == "all":
            at_risk = np.ones((self.n, times.size), dtype=bool)
        else:
            raise ValueError("horizon must be 'observed' or 'all'")
        idx, jdx = np.nonzero(at_risk)
        risk = (times[jdx] <= y[idx]).astype(float)
        own = (~delta[idx]) & (times[jdx] == y[idx])
        self._idx = idx
        self._times = times[jdx]
        self._weight = (own.astype(float) - risk * dlam[jdx]) / g_left[jdx]
        self._prepared = None if isinstance(model, ZeroModel) else model.prepare(dataset, idx, times[jdx])
        if check_bounds:
            zmax = np.abs(packed.z).max(axis=1)
            g_min = np.full(self.n, 1.0)
            np.minimum.at(g_min, idx, g_left[jdx])
            cum = np.asarray(cumhaz_at(curve, y), dtype=float)
            self._bound = zmax * (1.0 + cum) / g_min

    def augmentation_terms(self, beta) -> np.ndarray:
        """Per-subject augmentation (n, d), before division by n."""
        out = np.zeros((self.n, self.dim))
        if self._prepared is None or self._idx.size == 0:
            return out
        qv = self.model.evaluate(self._prepared, beta, self.q)
        contrib = qv * self._weight[:, None]
        for d in range(self.dim):
            out[:, d] = np.bincount(self._idx, weights=contrib[:, d], minlength=self.n)
        if self.check_bounds:
            over = np.abs(out).max(axis=1) > self._bound * (1 + 1e-9)
            if np.any(over):
                raise AssertionError(
                    f"augmentation of subject {int(np.flatnonzero(over)[0])} exceeds its bound"
                )
        return out

    def augmentation(self, beta) -> np.ndarray:
        return self.augmentation_terms(beta).sum(axis=0) / self.n

    def __call__(self, beta) -> np.ndarray:
        return self.base(beta) + self.augmentation(beta)

    def jacobian(self, beta) -> np.ndarray:
        jac = self.base.jacobian(beta)
        if self._prepared is None:
            return jac + 0.0
        beta = np.asarray(beta, dtype=float)
        aug_jac = np.empty((self.dim, self.dim))
        for k in range(self.dim):
            h = 1e-6 * max(1.0, abs(beta[k]))
            up, dn = beta.copy(), beta.copy()
            up[k] += h
            dn[k] -= h
            aug_jac[:, k] = (self.augmentation(up) - self.augmentation(dn)) / (2 * h)
        return jac + aug_jac


def dr_estimating_equation(dataset: Dataset, beta, q: float, curve: CensorCurve | None,
                           model: PositedModel, a: float | None = None) -> np.ndarray:
    """Evaluate the augmented estimating function at ``beta``."""
    return AugmentedEquation(dataset, q, model, curve, a)(beta)


def fit_dr(dataset: Dataset, q: float, config: SolverConfig | None = None,
           model: PositedModel | None = None, pilot: QuantileFit | None = None) -> QuantileFit:
    """Minimise the norm of the augmented equation.

    Uses the machinery of :func:`qrtd.estimator.fit`, except that unless
    ``config.starts`` is given the IPCW estimate (``pilot``, fitted when
    absent) is the first start, each start tries a root step before the
    simplex, and the search stops at the first converged start.  With a
    zero model the IPCW estimate is therefore returned unchanged.
    """
    config = config or SolverConfig()
    model = model or ZeroModel()
    eq = AugmentedEquation(dataset, q, model, None, config.smoothing_a)
    if config.starts is None:
        pilot = pilot or fit(dataset, q, config)
        starts = [pilot.beta] + default_starts(dataset, q, config)
        config = config.with_(root_first=True, early_stop=True)
    else:
        starts = default_starts(dataset, q, config)
    beta, norm, converged, k, cands = solve_norm(eq, eq.jacobian, starts, config)
    return QuantileFit(
        coefficients=Coefficients(beta, q),
        residual_norm=norm,
        converged=converged,
        n_events_used=eq.base.n_events,
        clamp_count=eq.base.clamp_count,
        start_index=k,
        smoothing_a=config.smoothing_a,
        candidates=cands,
    )
