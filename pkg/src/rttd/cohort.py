"""Subject-level study data: records, CSV ingestion and LOCF.

Times are fractional years since enrolment throughout. A cohort is stored
as four CSV files (subjects, events, exposures, covariates); see
:func:`load_cohort` for the column layout.
"""

from __future__ import annotations

import bisect
import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import ValidationError

__all__ = [
    "EXPOSURE",
    "SubjectRecord",
    "Cohort",
    "load_cohort",
    "load_cohort_dir",
    "save_cohort",
    "locf_fill",
    "covariate_value_at",
    "COHORT_FILES",
]

#: Reserved covariate name for the absorbing exposure indicator.
EXPOSURE = "exposure"

COHORT_FILES = {
    "subjects": "subjects.csv",
    "events": "events.csv",
    "exposures": "exposures.csv",
    "covariates": "covariates.csv",
}

Measurement = tuple[float, "float | None"]


@dataclass(frozen=True)
class SubjectRecord:
    """One study participant.

    ``tv_covariates`` maps a covariate name to its measurements as
    ``(time, value)`` pairs with strictly increasing times; ``value`` is
    ``None`` where the measurement is missing.
    """

    subject_id: str
    followup_end: float
    died: bool
    event_times: tuple[float, ...] = ()
    exposure_start: float | None = None
    tc_covariates: Mapping[str, float] = field(default_factory=dict)
    tv_covariates: Mapping[str, tuple[Measurement, ...]] = field(default_factory=dict)

    def __post_init__(self):
        sid = self.subject_id
        if not (math.isfinite(self.followup_end) and self.followup_end > 0):
            raise ValidationError(f"subject {sid}: follow-up must be positive, got {self.followup_end}")
        events = tuple(float(t) for t in self.event_times)
        if any(b < a for a, b in zip(events, events[1:])):
            raise ValidationError(f"subject {sid}: event times must be sorted")
        for t in events:
            if not 0.0 <= t <= self.followup_end:
                raise ValidationError(f"subject {sid}: event at {t} outside follow-up [0, {self.followup_end}]")
        object.__setattr__(self, "event_times", events)
        if self.exposure_start is not None and not 0.0 <= self.exposure_start <= self.followup_end:
            raise ValidationError(
                f"subject {sid}: exposure start {self.exposure_start} outside follow-up [0, {self.followup_end}]"
            )
        tv = {}
        for name, series in self.tv_covariates.items():
            series = tuple((float(t), None if v is None else float(v)) for t, v in series)
            times = [t for t, _ in series]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValidationError(f"subject {sid}: measurement times of {name!r} must be strictly increasing")
            if times and not (0.0 <= times[0] and times[-1] <= self.followup_end):
                raise ValidationError(f"subject {sid}: measurement of {name!r} outside follow-up")
            tv[name] = series
        object.__setattr__(self, "tv_covariates", tv)
        object.__setattr__(self, "tc_covariates", {k: float(v) for k, v in self.tc_covariates.items()})

    @property
    def n_events(self) -> int:
        return len(self.event_times)

    @property
    def ever_exposed(self) -> bool:
        return self.exposure_start is not None


@dataclass(frozen=True)
class Cohort:
    """Validated collection of subjects sharing one covariate schema."""

    subjects: tuple[SubjectRecord, ...]
    tc_names: tuple[str, ...] = ()
    tv_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "tc_names", tuple(self.tc_names))
        object.__setattr__(self, "tv_names", tuple(self.tv_names))
        names = self.tc_names + self.tv_names
        if len(set(names)) != len(names) or EXPOSURE in names:
            raise ValidationError(f"covariate names must be unique and may not use {EXPOSURE!r}: {list(names)}")
        seen = set()
        for s in self.subjects:
            if s.subject_id in seen:
                raise ValidationError(f"duplicate subject id {s.subject_id!r}")
            seen.add(s.subject_id)
            if set(s.tc_covariates) != set(self.tc_names):
                raise ValidationError(f"subject {s.subject_id}: time-constant covariates do not match schema")
            unknown = set(s.tv_covariates) - set(self.tv_names)
            if unknown:
                raise ValidationError(f"subject {s.subject_id}: unknown covariate(s) {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self) -> Iterator[SubjectRecord]:
        return iter(self.subjects)

    @property
    def names(self) -> tuple[str, ...]:
        return self.tc_names + self.tv_names

    @property
    def n_deceased(self) -> int:
        return sum(s.died for s in self.subjects)

    @property
    def n_events(self) -> int:
        return sum(s.n_events for s in self.subjects)

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def decedents(self) -> "Cohort":
        """Sub-cohort of subjects who died during follow-up."""
        return replace(self, subjects=tuple(s for s in self.subjects if s.died))

    def fill_locf(self) -> tuple["Cohort", int]:
        """Apply :func:`locf_fill` to every trajectory; return the cohort and the replacement count."""
        replaced = 0
        subjects = []
        for s in self.subjects:
            tv = {}
            for name, series in s.tv_covariates.items():
                if series:
                    replaced += sum(v is None for _, v in series)
                    tv[name] = tuple(locf_fill(series))
                else:
                    tv[name] = series
            subjects.append(replace(s, tv_covariates=tv))
        return replace(self, subjects=tuple(subjects)), replaced


def locf_fill(trajectory: Iterable[tuple[float, float | None]]) -> list[tuple[float, float]]:
    """Replace missing values by the most recent preceding observed value.

    >>> locf_fill([(0, 20), (3, None), (6, 15)])
    [(0, 20), (3, 20), (6, 15)]
    """
    out = []
    last = None
    for t, v in trajectory:
        if v is None:
            if last is None:
                raise ValidationError(f"missing value at time {t} has no earlier observation to carry forward")
            v = last
        out.append((t, v))
        last = v
    return out


def covariate_value_at(subject: SubjectRecord, name: str, t: float) -> float:
    """Value of covariate ``name`` in effect at time ``t`` (years since enrolment).

    Time-varying covariates are right-continuous step functions: the value is the
    most recent observed measurement at or before ``t``, skipping missing values
    (equivalent to LOCF).
    """
    if name in subject.tc_covariates:
        return subject.tc_covariates[name]
    if name not in subject.tv_covariates:
        raise ValidationError(f"subject {subject.subject_id}: no covariate {name!r}")
    if t > subject.followup_end:
        raise ValidationError(f"subject {subject.subject_id}: time {t} beyond follow-up {subject.followup_end}")
    series = subject.tv_covariates[name]
    i = bisect.bisect_right([m for m, _ in series], t) - 1
    while i >= 0 and series[i][1] is None:
        i -= 1
    if i < 0:
        raise ValidationError(f"subject {subject.subject_id}: no observed {name!r} at or before time {t}")
    return series[i][1]


# --- CSV I/O ---------------------------------------------------------------


def _number(text: str, what: str, source: str, row: int) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"malformed numeric field {what}={text!r}", row=row, source=source) from None
    if not math.isfinite(value):
        raise ValidationError(f"non-finite numeric field {what}={text!r}", row=row, source=source)
    return value


def _rows(path, required: Sequence[str]):
    source = os.path.basename(os.fspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"missing column(s) {missing}", source=source)
        for row in reader:
            yield source, reader.line_num, header, row


def load_cohort(subjects_file, events_file, exposures_file, covariates_file, tv_names: Sequence[str] | None = None) -> Cohort:
    """Read and validate a cohort from its four CSV files.

    Parameters
    ----------
    subjects_file
        ``subject_id, followup_end_years, died`` followed by one column per
        time-constant covariate.
    events_file
        ``subject_id, event_time_years``; one row per outcome event.
    exposures_file
        ``subject_id, exposure_start_years``; at most one row per subject.
    covariates_file
        ``subject_id, time_years, covariate_name, value``; an empty value is a
        missing measurement.
    tv_names : sequence of str, optional
        Expected time-varying covariate names. When given, any other name in
        the covariates file is rejected; otherwise the names found define the
        schema (in order of first appearance).

    Raises
    ------
    ValidationError
        On duplicate ids, events or exposures outside follow-up, unknown
        subjects or covariates, and malformed numbers; the message carries the
        file name and row number.
    """
    base = ["subject_id", "followup_end_years", "died"]
    info: dict[str, dict] = {}
    tc_names: tuple[str, ...] = ()
    for source, line, header, row in _rows(subjects_file, base):
        tc_names = tuple(c for c in header if c not in base)
        sid = row["subject_id"]
        if not sid:
            raise ValidationError("empty subject_id", row=line, source=source)
        if sid in info:
            raise ValidationError(f"duplicate subject id {sid!r}", row=line, source=source)
        fu = _number(row["followup_end_years"], "followup_end_years", source, line)
        if fu <= 0:
            raise ValidationError(f"subject {sid}: zero or negative follow-up", row=line, source=source)
        if row["died"] not in ("0", "1"):
            raise ValidationError(f"died must be 0 or 1, got {row['died']!r}", row=line, source=source)
        info[sid] = {
            "followup_end": fu,
            "died": row["died"] == "1",
            "tc": {c: _number(row[c], c, source, line) for c in tc_names},
            "events": [],
            "exposure": None,
            "tv": {},
            "line": line,
        }

    def lookup(sid, source, line):
        if sid not in info:
            raise ValidationError(f"unknown subject id {sid!r}", row=line, source=source)
        return info[sid]

    for source, line, _, row in _rows(events_file, ["subject_id", "event_time_years"]):
        rec = lookup(row["subject_id"], source, line)
        t = _number(row["event_time_years"], "event_time_years", source, line)
        if not 0.0 <= t <= rec["followup_end"]:
            raise ValidationError(f"event at {t} outside follow-up", row=line, source=source)
        rec["events"].append(t)

    for source, line, _, row in _rows(exposures_file, ["subject_id", "exposure_start_years"]):
        rec = lookup(row["subject_id"], source, line)
        if rec["exposure"] is not None:
            raise ValidationError(f"second exposure row for subject {row['subject_id']!r}", row=line, source=source)
        t = _number(row["exposure_start_years"], "exposure_start_years", source, line)
        if not 0.0 <= t <= rec["followup_end"]:
            raise ValidationError(f"exposure start {t} outside follow-up", row=line, source=source)
        rec["exposure"] = t

    found: list[str] = list(tv_names) if tv_names is not None else []
    for source, line, _, row in _rows(covariates_file, ["subject_id", "time_years", "covariate_name", "value"]):
        rec = lookup(row["subject_id"], source, line)
        name = row["covariate_name"]
        if name in tc_names or name == EXPOSURE or not name:
            raise ValidationError(f"invalid time-varying covariate name {name!r}", row=line, source=source)
        if name not in found:
            if tv_names is not None:
                raise ValidationError(f"unknown covariate name {name!r}", row=line, source=source)
            found.append(name)
        t = _number(row["time_years"], "time_years", source, line)
        if not 0.0 <= t <= rec["followup_end"]:
            raise ValidationError(f"measurement at {t} outside follow-up", row=line, source=source)
        value = None if row["value"] == "" else _number(row["value"], "value", source, line)
        series = rec["tv"].setdefault(name, [])
        if any(m == t for m, _ in series):
            raise ValidationError(f"duplicate measurement of {name!r} at {t}", row=line, source=source)
        series.append((t, value))

    subjects = []
    for sid, rec in info.items():
        subjects.append(
            SubjectRecord(
                subject_id=sid,
                followup_end=rec["followup_end"],
                died=rec["died"],
                event_times=tuple(sorted(rec["events"])),
                exposure_start=rec["exposure"],
                tc_covariates=rec["tc"],
                tv_covariates={n: tuple(sorted(rec["tv"][n])) for n in found if n in rec["tv"]},
            )
        )
    return Cohort(tuple(subjects), tc_names, tuple(found))


def load_cohort_dir(directory, tv_names: Sequence[str] | None = None) -> Cohort:
    """Load a cohort from a directory holding the four standard CSV files."""
    paths = [os.path.join(directory, COHORT_FILES[k]) for k in ("subjects", "events", "exposures", "covariates")]
    return load_cohort(*paths, tv_names=tv_names)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_cohort(cohort: Cohort, directory) -> dict[str, str]:
    """Write the cohort as the four standard CSV files; return their paths.

    Floats are written with ``repr`` so a reload reproduces them exactly.
    """
    os.makedirs(directory, exist_ok=True)
    paths = {k: os.path.join(directory, v) for k, v in COHORT_FILES.items()}
    with open(paths["subjects"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "followup_end_years", "died", *cohort.tc_names])
        for s in cohort:
            w.writerow([s.subject_id, _fmt(s.followup_end), int(s.died), *(_fmt(s.tc_covariates[c]) for c in cohort.tc_names)])
    with open(paths["events"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "event_time_years"])
        for s in cohort:
            for t in s.event_times:
                w.writerow([s.subject_id, _fmt(t)])
    with open(paths["exposures"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "exposure_start_years"])
        for s in cohort:
            if s.exposure_start is not None:
                w.writerow([s.subject_id, _fmt(s.exposure_start)])
    with open(paths["covariates"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "time_years", "covariate_name", "value"])
        for s in cohort:
            for name in cohort.tv_names:
                for t, v in s.tv_covariates.get(name, ()):
                    w.writerow([s.subject_id, _fmt(t), name, "" if v is None else _fmt(v)])
    return paths
