"""Time-warp integral of exp(beta'X(t)) over step-function covariate paths.

For a step path the integral is an exact finite sum over segments, so no
quadrature is involved.  The array kernels take segment ``starts``,
``ends`` and ``rates`` (the values of exp(beta'x) per segment) with the
segment axis last and broadcast over any leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CovariatePath, PackedData
from .errors import WarpRangeError

__all__ = [
    "Coefficients",
    "MAX_EXPONENT",
    "warp_integral",
    "warp_inverse",
    "segment_rates",
    "integrate_segments",
    "invert_segments",
    "packed_warp",
]

#: Largest linear predictor accepted before exp() is considered to overflow.
MAX_EXPONENT = 700.0


@dataclass(frozen=True)
class Coefficients:
    beta: np.ndarray
    q: float

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).reshape(-1)
        beta.flags.writeable = False
        if not np.all(np.isfinite(beta)):
            raise ValueError("coefficients must be finite")
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"quantile level must lie in (0, 1), got {self.q}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "q", float(self.q))

    @property
    def intercept(self) -> float:
        return float(self.beta[0])

    @property
    def effects(self) -> np.ndarray:
        return self.beta[1:]


def segment_rates(values, beta, active=None):
    """exp(beta'x) per segment, refusing linear predictors above 700.

    ``active`` masks the segments whose rate is actually used; overflow
    is only reported for those.
    """
    beta = np.asarray(beta, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != beta.shape[-1]:
        raise ValueError(
            f"dimension mismatch: covariates have {values.shape[-1]} "
            f"coordinates, beta has {beta.shape[-1]}"
        )
    eta = values @ beta
    if eta.max(initial=-np.inf) > MAX_EXPONENT:
        bad = eta > MAX_EXPONENT
        if active is not None:
            bad &= active
    else:
        bad = None
    if bad is not None and bad.any():
        raise WarpRangeError(
            f"linear predictor {float(np.max(eta[bad])):.6g} exceeds {MAX_EXPONENT:g} "
            f"at beta={np.array2string(beta, precision=6)}"
        )
    with np.errstate(over="ignore"):
        return np.exp(eta)


def integrate_segments(starts, ends, rates, upper):
    """Sum of rate * |segment ∩ [0, upper]| over the last axis."""
    upper = np.asarray(upper, dtype=float)[..., None]
    length = np.clip(np.minimum(ends, upper) - starts, 0.0, None)
    return np.sum(np.where(length > 0, rates, 0.0) * length, axis=-1)


def invert_segments(starts, ends, rates, target):
    """Time at which the running integral first reaches ``target``.

    Segments must be contiguous from 0 and the last real segment must
    have an infinite end; trailing zero-length padding is ignored.
    """
    target = np.asarray(target, dtype=float)
    length = ends - starts
    with np.errstate(invalid="ignore"):
        mass = np.where(np.isfinite(length), rates * length, np.inf)
    cum = np.cumsum(mass, axis=-1)
    before = np.concatenate([np.zeros_like(cum[..., :1]), cum[..., :-1]], axis=-1)
    # first segment whose cumulative mass reaches the target
    k = np.argmax(cum >= target[..., None], axis=-1)[..., None]
    seg_start = np.take_along_axis(starts, k, axis=-1)[..., 0]
    seg_before = np.take_along_axis(before, k, axis=-1)[..., 0]
    seg_rate = np.take_along_axis(rates, k, axis=-1)[..., 0]
    return seg_start + (target - seg_before) / seg_rate


def warp_integral(path: CovariatePath, beta, upper: float) -> float:
    """Integral of exp(beta'X(t)) over [0, upper]."""
    if not upper >= 0:
        raise ValueError(f"upper limit must be non-negative, got {upper!r}")
    starts = path.breakpoints
    rates = segment_rates(path.values, beta, active=starts < upper)
    return float(integrate_segments(starts, path.segment_ends(), rates, upper))


def warp_inverse(path: CovariatePath, beta, target: float) -> float:
    """The time theta with warp_integral(path, beta, theta) == target."""
    if not target > 0:
        raise ValueError(f"target must be positive, got {target!r}")
    rates = segment_rates(path.values, beta)
    return float(invert_segments(path.breakpoints, path.segment_ends(), rates, target))


def packed_warp(packed: PackedData, beta, upper=None, with_jacobian=False):
    """Warp integrals of every subject up to ``upper`` (default: its y).

    With ``with_jacobian`` also returns the (n, d) matrix of derivatives
    with respect to beta.
    """
    upper = packed.y if upper is None else np.asarray(upper, dtype=float)
    length = np.clip(np.minimum(packed.ends, upper[:, None]) - packed.starts, 0.0, None)
    active = length > 0
    rates = segment_rates(packed.values, beta, active=active)
    # unused segments may overflow; keep inf * 0 out of the sums
    contrib = np.where(active, rates, 0.0) * length
    total = contrib.sum(axis=1)
    if not with_jacobian:
        return total
    jac = np.einsum("nk,nkd->nd", contrib, packed.values)
    return total, jac
