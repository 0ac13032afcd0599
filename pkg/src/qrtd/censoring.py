"""Product-limit and Nelson-Aalen estimates of the censoring distribution.

Censoring (``delta == 0``) is the event of interest here and failures act
as censored observations.  At a time shared by a failure and a censoring,
the failure is taken to happen first, so failed subjects are no longer at
risk for that censoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset

__all__ = [
    "CensorCurve",
    "GHAT_FLOOR",
    "fit_censor_km",
    "survival_at",
    "cumhaz_at",
    "cumhaz_increments",
    "ipcw_survival",
]

#: Lower clamp applied to the censoring survival before it is inverted.
GHAT_FLOOR = 1e-10


@dataclass(frozen=True)
class CensorCurve:
    """Right-continuous step estimate of G and its cumulative hazard.

    ``survival[j]`` and ``cumhaz[j]`` are the values on
    ``[jump_times[j], jump_times[j+1])``; both curves equal their
    starting values (1 and 0) before the first jump.  ``increments[j]`` is
    the Nelson-Aalen jump at ``jump_times[j]``.  Arrays may hold
    ``fractions.Fraction`` objects when the fit was done in exact
    arithmetic.
    """

    jump_times: np.ndarray
    survival: np.ndarray
    cumhaz: np.ndarray
    increments: np.ndarray
    at_risk: np.ndarray
    n_censored: np.ndarray


def fit_censor_km(dataset: Dataset, weights=None) -> CensorCurve:
    """Kaplan-Meier estimate of the censoring survival function.

    Parameters
    ----------
    dataset : Dataset
        Only ``y`` and ``delta`` of each subject are used.
    weights : array_like, optional
        Strictly positive per-subject weights multiplying both the
        censoring and at-risk counts.  Any numeric type is accepted;
        ``Fraction`` weights give an exact rational computation.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot fit a censoring curve to an empty dataset")
    packed = dataset.packed
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights)
        if w.shape != (n,):
            raise ValueError(f"expected {n} weights, got shape {w.shape}")
        if w.dtype != object and not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if not all(wi > 0 for wi in w):
            raise ValueError("weights must be strictly positive")
    return _product_limit(packed.y, packed.delta, w)


def _product_limit(y, delta, w):
    order = np.argsort(y, kind="stable")
    y = y[order]
    cens = ~delta[order]
    w = w[order]

    times, first = np.unique(y, return_index=True)
    # weight leaving the risk set at each distinct time, split by type
    w_cens = np.where(cens, w, w * 0)
    w_fail = np.where(cens, w * 0, w)
    cens_at = np.add.reduceat(w_cens, first)
    fail_at = np.add.reduceat(w_fail, first)
    leaving = cens_at + fail_at
    # weight with y >= t, then drop same-time failures (they go first)
    at_risk_all = np.cumsum(leaving[::-1])[::-1]
    at_risk = at_risk_all - fail_at

    has_jump = np.array([c > 0 for c in cens_at], dtype=bool)
    jump_times = times[has_jump]
    d = cens_at[has_jump]
    r = at_risk[has_jump]
    increments = d / r
    survival = np.cumprod((r - d) / r)
    cumhaz = np.cumsum(increments)
    return CensorCurve(jump_times, survival, cumhaz, increments, r, d)


def _step_index(curve: CensorCurve, t, side: str):
    if side == "right":
        return np.searchsorted(curve.jump_times, t, side="right") - 1
    if side == "left":
        return np.searchsorted(curve.jump_times, t, side="left") - 1
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def _lookup(t, idx, initial, steps):
    vals = np.concatenate([np.full(1, initial, dtype=steps.dtype), steps])
    out = vals[idx + 1]
    if np.ndim(t) == 0:
        return out.item() if isinstance(out, np.generic) else out
    return out


def survival_at(curve: CensorCurve, t, side: str = "right"):
    """G evaluated at ``t``; ``side='left'`` gives the left limit G(t-)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("time must be non-negative")
    return _lookup(t, _step_index(curve, t_arr, side), 1, curve.survival)


def cumhaz_at(curve: CensorCurve, t, side: str = "right"):
    """Nelson-Aalen cumulative hazard of censoring at ``t``."""
    t_arr = np.asarray(t, dtype=float)
    return _lookup(t, _step_index(curve, t_arr, side), 0, curve.cumhaz)


def cumhaz_increments(curve: CensorCurve) -> list[tuple[float, float]]:
    return [(t, dl) for t, dl in zip(curve.jump_times.tolist(), curve.increments.tolist())]


def ipcw_survival(curve: CensorCurve, y, floor: float = GHAT_FLOOR):
    """Censoring survival at each follow-up time, safe to divide by.

    Where G(y) is 0 (only possible at or beyond the last censoring) the
    left limit G(y-) is used instead; the result is then clamped below at
    ``floor``.  Returns the values and the number of clamped entries.
    """
    y = np.asarray(y, dtype=float)
    g = np.asarray(survival_at(curve, y, "right"), dtype=float)
    zero = g <= 0
    if np.any(zero):
        g = g.copy()
        g[zero] = np.asarray(survival_at(curve, y[zero], "left"), dtype=float)
    clamped = g < floor
    return np.maximum(g, floor), int(clamped.sum())
