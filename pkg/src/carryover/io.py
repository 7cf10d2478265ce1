"""CSV ingestion and export.

Events file: ``subject_id,event_time[,resolution_time]``, one row per event,
rows of a subject in time order. Subjects file: ``subject_id,tau`` followed
by any numeric covariate columns.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset, EventHistory, validate_dataset


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _float(text: str, path, line: int, column: str) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataError(f"{path}:{line}: {column} {text!r} is not a number") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{line}: {column} must be finite")
    return v


def _reader(path):
    f = open(path, newline="", encoding="utf-8")
    return f, csv.reader(f)


def _header(rows, path, required):
    try:
        header = [h.strip() for h in next(rows)]
    except StopIteration:
        raise DataError(f"{path}:1: empty file") from None
    if header[: len(required)] != list(required):
        raise DataError(f"{path}:1: header must start with {','.join(required)}")
    return header


def _read_subjects(path):
    f, rows = _reader(path)
    with f:
        header = _header(rows, path, ("subject_id", "tau"))
        covs = header[2:]
        subjects = {}
        for line, row in enumerate(rows, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            sid = row[0].strip()
            if sid in subjects:
                raise DataError(f"{path}:{line}: duplicate subject {sid!r}")
            tau = _float(row[1], path, line, "tau")
            values = {name: _float(v, path, line, name) for name, v in zip(covs, row[2:])}
            subjects[sid] = (tau, values, line)
    return subjects, covs


def _read_events(path):
    f, rows = _reader(path)
    with f:
        header = _header(rows, path, ("subject_id", "event_time"))
        if header not in (["subject_id", "event_time"],
                          ["subject_id", "event_time", "resolution_time"]):
            raise DataError(f"{path}:1: unexpected columns {header[2:]}")
        with_res = len(header) == 3
        events: dict = {}
        for line, row in enumerate(rows, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            sid = row[0].strip()
            t = _float(row[1], path, line, "event_time")
            r = _float(row[2], path, line, "resolution_time") if with_res else None
            events.setdefault(sid, []).append((t, r, line))
    return events, with_res


def ingest_csv(events_path: Optional[str], subjects_path: str, time_unit: str = "") -> Dataset:
    """Read and validate a dataset from an events file and a subjects file.

    ``events_path`` may be ``None`` for a dataset without events. Subjects
    keep the order of the subjects file.

    Raises
    ------
    DataError
        On malformed rows, unknown subjects or validation failures; the
        message names the file and line.
    """
    subjects, covs = _read_subjects(subjects_path)
    events, with_res = ({}, False) if events_path is None else _read_events(events_path)
    for sid, evs in events.items():
        if sid not in subjects:
            raise DataError(f"{events_path}:{evs[0][2]}: subject {sid!r} has events but no tau")
    histories = []
    for sid, (tau, values, line) in subjects.items():
        evs = events.get(sid, [])
        times = [e[0] for e in evs]
        res = [e[1] for e in evs] if with_res else None
        h = EventHistory(sid, times, tau, res, values if covs else None)
        problems = validate_dataset(Dataset((h,)))
        if problems:
            v = problems[0]
            where = _violation_line(v.rule, h, evs, events_path, subjects_path, line)
            raise DataError(f"{where}: subject {sid!r}: {v.rule} ({v.message})")
        histories.append(h)
    if not histories:
        raise DataError(f"{subjects_path}: no subjects")
    return Dataset(tuple(histories), time_unit)


def _violation_line(rule, h, evs, events_path, subjects_path, subject_line) -> str:
    t = h.event_times
    idx = None
    if rule == "event after tau":
        idx = int(np.argmax(t > h.tau))
    elif rule == "event not after zero":
        idx = 0
    elif rule in ("simultaneous events", "non-increasing event times"):
        idx = int(np.argmax(np.diff(t) <= 0)) + 1
    elif rule == "resolution before event":
        idx = int(np.argmax(h.resolution_times < t))
    elif rule == "event inside non-at-risk interval":
        idx = int(np.argmax(h.resolution_times[:-1] >= t[1:])) + 1
    if idx is None or not evs:
        return f"{subjects_path}:{subject_line}"
    return f"{events_path}:{evs[idx][2]}"


def write_events_csv(d: Dataset, path) -> None:
    with_res = d.has_resolution_times
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subject_id", "event_time"] + (["resolution_time"] if with_res else []))
        for h in d.subjects:
            res = h.resumption_times
            for j, t in enumerate(h.event_times):
                row = [h.subject_id, repr(float(t))]
                if with_res:
                    row.append(repr(float(res[j])))
                w.writerow(row)


def write_subjects_csv(d: Dataset, path) -> None:
    covs = sorted({k for h in d.subjects for k in (h.covariates or {})})
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subject_id", "tau"] + covs)
        for h in d.subjects:
            cv = h.covariates or {}
            w.writerow([h.subject_id, repr(h.tau)] + [repr(cv.get(k, math.nan)) for k in covs])


def write_rows_csv(rows, header, path) -> None:
    """Write tuples under ``header``; floats use the shortest round-trip form."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (tuple, list)):
        return " ".join(_cell(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
