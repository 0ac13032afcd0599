"""Counting-process CSV files.

One row per constant-covariate interval::

    id,start,stop,event,x1,x2,...,z_1,z_2,...

Rows of a subject must tile ``[0, Y]`` without gaps or overlaps, and only
the last one may carry ``event = 1``.  Lines starting with ``#`` are
comments.  Instruments come either from the ``z_*`` columns or, with the
``covariates-at-Y`` rule, from the covariate values on the last row.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .data import CovariatePath, Dataset, Subject, path_value
from .errors import IngestError

__all__ = [
    "CountingProcessRow",
    "AnalysisConfig",
    "CountingProcessTable",
    "INSTRUMENT_RULES",
    "ingest",
    "ingest_table",
    "build_dataset",
    "emit",
    "emit_rows",
]

INSTRUMENT_RULES = ("columns", "covariates-at-Y")
REQUIRED = ("id", "start", "stop", "event")


@dataclass(frozen=True)
class CountingProcessRow:
    subject_id: str
    start: float
    stop: float
    event: int
    covariates: tuple[float, ...]
    instruments: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.start >= 0:
            raise IngestError(f"start {self.start!r} must be non-negative", subject=self.subject_id)
        if not self.stop > self.start:
            raise IngestError(f"stop {self.stop!r} must exceed start {self.start!r}",
                              subject=self.subject_id)
        if self.event not in (0, 1):
            raise IngestError(f"event must be 0 or 1, got {self.event!r}", subject=self.subject_id)


@dataclass(frozen=True)
class AnalysisConfig:
    """What to fit and how; shared by the command-line front end."""

    q_list: tuple[float, ...] = (0.5,)
    smoothing_a: float | None = 20.0
    B: int = 0
    level: float = 0.95
    seed: int = 0
    instrument_rule: str = "columns"

    def __post_init__(self):
        q = tuple(float(v) for v in self.q_list)
        if not q:
            raise ValueError("q_list must not be empty")
        bad = [v for v in q if not 0.0 < v < 1.0]
        if bad:
            raise ValueError(f"quantile levels must lie in (0, 1), got {bad}")
        if self.instrument_rule not in INSTRUMENT_RULES:
            raise ValueError(f"instrument_rule must be one of {INSTRUMENT_RULES}")
        if self.B < 0:
            raise ValueError("B must be non-negative")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        object.__setattr__(self, "q_list", q)


@dataclass(frozen=True)
class CountingProcessTable:
    """A dataset together with the labels read from its file."""

    dataset: Dataset
    ids: tuple[str, ...]
    covariate_names: tuple[str, ...]
    instrument_names: tuple[str, ...] = field(default=())

    @property
    def coefficient_names(self) -> tuple[str, ...]:
        return ("intercept",) + self.covariate_names


def _number(text, what, row, subject):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise IngestError(f"non-numeric {what} {text!r}", row=row, subject=subject) from None
    if not np.isfinite(value):
        raise IngestError(f"non-finite {what} {text!r}", row=row, subject=subject)
    return value


def _event(text, row, subject):
    value = _number(text, "event", row, subject)
    if value not in (0.0, 1.0):
        raise IngestError(f"event must be 0 or 1, got {text!r}", row=row, subject=subject)
    return int(value)


def ingest_table(stream: TextIO | str, instrument_rule: str = "columns") -> CountingProcessTable:
    """Parse a counting-process CSV into a dataset plus its labels.

    ``stream`` is an open text file or the CSV content itself.
    """
    if instrument_rule not in INSTRUMENT_RULES:
        raise ValueError(f"instrument_rule must be one of {INSTRUMENT_RULES}")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    # keep physical line numbers while dropping comments
    lines = [(k, line) for k, line in enumerate(stream, start=1) if line.strip() and not line.lstrip().startswith("#")]
    if not lines:
        raise IngestError("no header row")
    reader = csv.reader(line for _, line in lines)
    header = [h.strip() for h in next(reader)]
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise IngestError(f"missing required column(s) {', '.join(missing)}", row=lines[0][0])
    if len(set(header)) != len(header):
        raise IngestError("duplicate column names", row=lines[0][0])
    cov_names = [h for h in header if h not in REQUIRED and not h.startswith("z_")]
    z_names = [h for h in header if h.startswith("z_")]
    if instrument_rule == "columns" and len(z_names) != len(cov_names):
        raise IngestError(
            f"instrument rule 'columns' needs one z_* column per covariate "
            f"({len(cov_names)}), found {len(z_names)}",
            row=lines[0][0],
        )
    col = {h: j for j, h in enumerate(header)}

    rows: dict[str, list[tuple[int, CountingProcessRow]]] = {}
    for (lineno, _), fields in zip(lines[1:], reader):
        if len(fields) != len(header):
            raise IngestError(f"expected {len(header)} fields, found {len(fields)}", row=lineno)
        sid = fields[col["id"]].strip()
        start = _number(fields[col["start"]], "start", lineno, sid)
        stop = _number(fields[col["stop"]], "stop", lineno, sid)
        event = _event(fields[col["event"]], lineno, sid)
        covs = tuple(_number(fields[col[c]], f"covariate {c}", lineno, sid) for c in cov_names)
        zs = tuple(_number(fields[col[c]], f"instrument {c}", lineno, sid) for c in z_names)
        try:
            r = CountingProcessRow(sid, start, stop, event, covs, zs)
        except IngestError as err:
            raise IngestError(str(err).split(": ", 1)[-1], row=lineno, subject=sid) from None
        rows.setdefault(sid, []).append((lineno, r))

    if not rows:
        raise IngestError("no data rows")
    subjects = []
    for sid, srows in rows.items():
        subjects.append(_subject(sid, srows, instrument_rule))
    return CountingProcessTable(Dataset(subjects), tuple(rows), tuple(cov_names), tuple(z_names))


def _subject(sid, srows, instrument_rule) -> Subject:
    first_line, first = srows[0]
    if first.start != 0.0:
        raise IngestError(f"first interval starts at {first.start!r}, not 0", row=first_line, subject=sid)
    for (prev_line, prev), (lineno, cur) in zip(srows, srows[1:]):
        if prev.event:
            raise IngestError("event on a row that is not the subject's last", row=prev_line, subject=sid)
        if cur.start > prev.stop:
            raise IngestError(f"gap between {prev.stop!r} and {cur.start!r}", row=lineno, subject=sid)
        if cur.start < prev.stop:
            raise IngestError(f"interval starting at {cur.start!r} overlaps the previous one "
                              f"ending at {prev.stop!r}", row=lineno, subject=sid)
    z_values = {r.instruments for _, r in srows}
    if instrument_rule == "columns" and len(z_values) > 1:
        raise IngestError("instrument columns vary across the subject's rows", row=srows[1][0], subject=sid)
    last = srows[-1][1]
    path = CovariatePath([r.start for _, r in srows], [(1.0,) + r.covariates for _, r in srows])
    y = last.stop
    if instrument_rule == "columns":
        z = np.array((1.0,) + last.instruments)
    else:
        z = path_value(path, y).copy()
    return Subject(y, bool(last.event), path, z)


def ingest(stream: TextIO | str, instrument_rule: str = "columns") -> Dataset:
    """Dataset from a counting-process CSV; see :func:`ingest_table`."""
    return ingest_table(stream, instrument_rule).dataset


def build_dataset(rows: Iterable[CountingProcessRow], instrument_rule: str = "columns") -> Dataset:
    """Dataset from rows already in memory, grouped by subject in order of appearance."""
    grouped: dict[str, list] = {}
    for k, r in enumerate(rows, start=1):
        grouped.setdefault(r.subject_id, []).append((k, r))
    if not grouped:
        raise IngestError("no rows")
    return Dataset([_subject(sid, srows, instrument_rule) for sid, srows in grouped.items()])


def _fmt(x: float) -> str:
    # shortest repr that reads back to the same double
    return repr(float(x))


def emit_rows(dataset: Dataset, ids: Sequence[str] | None = None) -> list[CountingProcessRow]:
    """Counting-process rows of ``dataset``.

    Path segments that start at or after a subject's follow-up time are
    not observable and are dropped.
    """
    ids = [str(i + 1) for i in range(len(dataset))] if ids is None else [str(i) for i in ids]
    out = []
    for sid, s in zip(ids, dataset):
        bp = s.path.breakpoints
        keep = max(1, int(np.sum(bp < s.y)))
        stops = list(bp[1:keep]) + [s.y]
        for k in range(keep):
            out.append(CountingProcessRow(
                sid, float(bp[k]), float(stops[k]),
                int(s.delta) if k == keep - 1 else 0,
                tuple(float(v) for v in s.path.values[k, 1:]),
                tuple(float(v) for v in s.z[1:]),
            ))
    return out


def emit(dataset: Dataset, ids: Sequence[str] | None = None,
         covariate_names: Sequence[str] | None = None, header_comment: str | None = None) -> str:
    """Counting-process CSV text with instruments in ``z_*`` columns.

    Numbers are written at full precision, so ingesting the output with
    the ``columns`` rule reproduces the dataset exactly.
    """
    d = dataset.dim - 1
    names = list(covariate_names) if covariate_names is not None else [f"x{j + 1}" for j in range(d)]
    if len(names) != d:
        raise ValueError(f"expected {d} covariate names, got {len(names)}")
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(REQUIRED) + names + [f"z_{n}" for n in names])
    for r in emit_rows(dataset, ids):
        if r.stop <= r.start:
            raise IngestError("zero-length interval cannot be written", subject=r.subject_id)
        w.writerow([r.subject_id, _fmt(r.start), _fmt(r.stop), r.event]
                   + [_fmt(v) for v in r.covariates] + [_fmt(v) for v in r.instruments])
    return buf.getvalue()
