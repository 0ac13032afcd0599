"""Stanford heart transplant data in counting-process form.

Time runs in days from acceptance into the programme.  Transplant status
switches on at the waiting time ``W``; age at transplant (years, minus
35) and mismatch score (minus 0.5) enter only from ``W`` on.  Two tie
conventions are applied: a follow-up of 0 days becomes 0.5, and a
transplant on the last day of follow-up is moved 0.5 days earlier so the
post-transplant interval has positive length.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import date
from importlib import resources
from typing import Iterable, Sequence

from .data import Dataset
from .dataio import CountingProcessRow, build_dataset, emit
from .errors import IngestError

__all__ = [
    "StanfordRecord",
    "COVARIATE_NAMES",
    "AGE_CENTER",
    "MISMATCH_CENTER",
    "load_records",
    "stanford_covariates",
    "stanford_dataset",
    "stanford_csv",
]

COVARIATE_NAMES = ("transplant", "age", "mismatch")
AGE_CENTER = 35.0
MISMATCH_CENTER = 0.5
DAYS_PER_YEAR = 365.25


@dataclass(frozen=True)
class StanfordRecord:
    """One patient.  ``wait`` and ``age`` are ``None`` without a transplant."""

    id: str
    futime: float
    status: int
    wait: float | None = None
    age: float | None = None
    mismatch: float | None = None

    @property
    def transplanted(self) -> bool:
        return self.wait is not None


def _date(text):
    return date.fromisoformat(text) if text else None


def load_records(stream=None) -> list[StanfordRecord]:
    """Patients from the bundled file, or from ``stream`` in the same layout.

    The layout is ``id, birth_date, accept_date, transplant_date,
    last_seen_date, status, futime, wait, mismatch`` with blank transplant
    fields for patients never transplanted.
    """
    if stream is None:
        text = resources.files("qrtd.resources").joinpath("stanford_jasa.csv").read_text()
        stream = io.StringIO(text)
    out = []
    for row in csv.DictReader(stream):
        birth, tx = _date(row["birth_date"]), _date(row["transplant_date"])
        wait = float(row["wait"]) if row["wait"] else None
        age = (tx - birth).days / DAYS_PER_YEAR if wait is not None else None
        mismatch = float(row["mismatch"]) if row["mismatch"] else None
        if wait is not None and mismatch is None:
            raise IngestError("transplanted patient without a mismatch score", subject=row["id"])
        out.append(StanfordRecord(row["id"], float(row["futime"]), int(row["status"]), wait, age, mismatch))
    return out


def stanford_covariates(records: Iterable[StanfordRecord]) -> list[CountingProcessRow]:
    """Counting-process rows with covariates (transplant, age - 35, mismatch - 0.5)."""
    rows = []
    for r in records:
        y = r.futime if r.futime > 0 else 0.5
        event = int(r.status)
        zero = (0.0, 0.0, 0.0)
        if not r.transplanted:
            rows.append(CountingProcessRow(r.id, 0.0, y, event, zero))
            continue
        if r.wait > r.futime:
            raise IngestError(f"transplant wait {r.wait!r} exceeds follow-up {r.futime!r}", subject=r.id)
        w = r.wait - 0.5 if r.wait == y else r.wait
        after = (1.0, r.age - AGE_CENTER, r.mismatch - MISMATCH_CENTER)
        if w > 0:
            rows.append(CountingProcessRow(r.id, 0.0, w, 0, zero))
            rows.append(CountingProcessRow(r.id, w, y, event, after))
        else:
            rows.append(CountingProcessRow(r.id, 0.0, y, event, after))
    return rows


def stanford_dataset(records: Sequence[StanfordRecord] | None = None) -> Dataset:
    """Dataset with instruments equal to the covariates at follow-up."""
    records = load_records() if records is None else records
    return build_dataset(stanford_covariates(records), instrument_rule="covariates-at-Y")


def stanford_csv(records: Sequence[StanfordRecord] | None = None) -> str:
    """The dataset as counting-process CSV, instruments included as z_* columns."""
    records = load_records() if records is None else records
    return emit(stanford_dataset(records), ids=[r.id for r in records], covariate_names=COVARIATE_NAMES)
