"""Censored observations with step-function time-dependent covariates.

A covariate path is stored as segment start times ``0 = t_0 < t_1 < ...``
and one value vector per segment.  Segment ``k`` covers ``[t_k, t_{k+1})``
and the last segment extends to infinity.  The first coordinate of every
value vector is the constant 1 that carries the intercept.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "CovariatePath",
    "Subject",
    "Dataset",
    "PackedData",
    "path_value",
    "validate",
]


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class CovariatePath:
    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = _frozen(self.breakpoints).reshape(-1)
        vals = _frozen(self.values)
        if vals.ndim == 1:
            vals = _frozen(vals.reshape(1, -1))
        if vals.ndim != 2 or vals.shape[0] != bp.shape[0]:
            raise ValueError(
                f"need one value vector per breakpoint, got {bp.shape[0]} "
                f"breakpoints and values of shape {vals.shape}"
            )
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value) -> CovariatePath:
        return cls([0.0], [value])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_segments(self) -> int:
        return self.values.shape[0]

    def segment_ends(self) -> np.ndarray:
        return np.append(self.breakpoints[1:], np.inf)

    def violations(self) -> list[str]:
        out = []
        bp = self.breakpoints
        if bp.size == 0:
            return ["path has no segments"]
        if bp[0] != 0.0:
            out.append("first breakpoint must be 0")
        if np.any(np.diff(bp) <= 0):
            out.append("breakpoints must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            out.append("non-finite covariate value")
        elif np.any(self.values[:, 0] != 1.0):
            out.append("intercept coordinate of path must be exactly 1")
        return out

    def __eq__(self, other):
        if not isinstance(other, CovariatePath):
            return NotImplemented
        return np.array_equal(self.breakpoints, other.breakpoints) and np.array_equal(
            self.values, other.values
        )

    __hash__ = None


def path_value(path: CovariatePath, t: float) -> np.ndarray:
    """Covariate vector in force at time ``t``.

    Segments are half-open, so at a breakpoint the new segment's value
    applies.
    """
    if not t >= 0:
        raise ValueError(f"time must be non-negative, got {t!r}")
    k = int(np.searchsorted(path.breakpoints, t, side="right")) - 1
    return path.values[max(k, 0)]


@dataclass(frozen=True, eq=False)
class Subject:
    """One observation: follow-up ``y``, event flag ``delta``, path and instrument ``z``."""

    y: float
    delta: bool
    path: CovariatePath
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "delta", bool(self.delta))
        object.__setattr__(self, "z", _frozen(self.z).reshape(-1))

    @property
    def dim(self) -> int:
        return self.z.shape[0]

    def violations(self) -> list[str]:
        out = []
        if not (np.isfinite(self.y) and self.y >= 0):
            out.append("follow-up time must be finite and non-negative")
        if not np.all(np.isfinite(self.z)):
            out.append("non-finite instrument value")
        elif self.z.size == 0 or self.z[0] != 1.0:
            out.append("intercept coordinate of z must be exactly 1")
        out.extend(self.path.violations())
        if self.path.dim != self.dim:
            out.append(
                f"path dimension {self.path.dim} differs from z dimension {self.dim}"
            )
        return out

    def __eq__(self, other):
        if not isinstance(other, Subject):
            return NotImplemented
        return (
            self.y == other.y
            and self.delta == other.delta
            and self.path == other.path
            and np.array_equal(self.z, other.z)
        )

    __hash__ = None


class PackedData(NamedTuple):
    """Array view of a dataset used by the vectorised numerical kernels.

    Paths are padded to a common number of segments with zero-length
    segments, so integrals over padding vanish.
    """

    y: np.ndarray  # (n,)
    delta: np.ndarray  # (n,) bool
    z: np.ndarray  # (n, d)
    starts: np.ndarray  # (n, K)
    ends: np.ndarray  # (n, K), inf on each subject's last real segment
    values: np.ndarray  # (n, K, d)


@dataclass(frozen=True, eq=False)
class Dataset:
    subjects: tuple[Subject, ...]

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, i):
        return self.subjects[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return len(self) == len(other) and all(
            a == b for a, b in zip(self.subjects, other.subjects)
        )

    __hash__ = None

    @property
    def dim(self) -> int:
        return self.subjects[0].dim

    @property
    def n_events(self) -> int:
        return int(sum(s.delta for s in self.subjects))

    @cached_property
    def packed(self) -> PackedData:
        n = len(self.subjects)
        d = self.dim
        k_max = max(s.path.n_segments for s in self.subjects)
        starts = np.zeros((n, k_max))
        ends = np.zeros((n, k_max))
        values = np.zeros((n, k_max, d))
        for i, s in enumerate(self.subjects):
            k = s.path.n_segments
            starts[i, :k] = s.path.breakpoints
            ends[i, :k] = s.path.segment_ends()
            values[i, :k] = s.path.values
        y = np.array([s.y for s in self.subjects])
        delta = np.array([s.delta for s in self.subjects], dtype=bool)
        z = np.array([s.z for s in self.subjects])
        for a in (y, delta, z, starts, ends, values):
            a.flags.writeable = False
        return PackedData(y, delta, z, starts, ends, values)

    @classmethod
    def from_arrays(
        cls,
        y: Sequence[float],
        delta: Sequence[bool],
        z,
        breakpoints,
        values,
    ) -> Dataset:
        """Build a dataset where every path shares the same segment count.

        ``breakpoints`` has shape (n, K) and ``values`` shape (n, K, d).
        """
        subjects = tuple(
            Subject(yi, di, CovariatePath(bp, v), zi)
            for yi, di, zi, bp, v in zip(y, delta, z, breakpoints, values)
        )
        return cls(subjects)


def validate(dataset: Dataset) -> list[str]:
    """All invariant violations in ``dataset``; empty when it is usable."""
    if len(dataset) == 0:
        return ["dataset is empty"]
    out = []
    dim = dataset.subjects[0].dim
    for i, s in enumerate(dataset.subjects):
        out.extend(f"subject {i}: {msg}" for msg in s.violations())
        if s.dim != dim:
            out.append(f"subject {i}: dimension {s.dim} differs from dataset dimension {dim}")
    if not any(s.delta for s in dataset.subjects):
        out.append("no events: every subject is censored")
    return out
