"""Time-scales and counting-process expansion.

Two time-scales are supported: time-on-study (TOS), measured from enrolment,
and reverse time-to-death (rTTD), ``t* = ttd_max - TTD`` where ``TTD`` is the
remaining lifetime. Under rTTD subjects enter at ``ttd_max - ttd_i`` rather
than at zero, so entry is staggered and a subject belongs to the risk set of
an event at ``e`` only when ``entry < e <= exit``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cohort import EXPOSURE, Cohort, SubjectRecord, covariate_value_at
from .errors import ValidationError

__all__ = [
    "ScaleKind",
    "TimeScale",
    "RiskInterval",
    "RiskSet",
    "IntervalData",
    "resolve_ttd",
    "to_scale",
    "expand",
    "expand_data",
    "risk_sets",
    "IncidenceCell",
    "IncidenceTable",
    "person_time_table",
    "write_intervals_csv",
    "read_intervals_csv",
]


class ScaleKind(str, enum.Enum):
    TOS = "tos"
    RTTD = "rttd"


@dataclass(frozen=True)
class TimeScale:
    """A time-scale choice.

    For rTTD, ``ttd_max`` may be left as ``None`` to derive it from the
    analysis sample; an explicit value must be at least every subject's TTD.
    """

    kind: ScaleKind
    ttd_max: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScaleKind(self.kind))
        if self.kind is ScaleKind.TOS and self.ttd_max is not None:
            raise ValidationError("ttd_max applies only to the rTTD time-scale")
        if self.ttd_max is not None and not (math.isfinite(self.ttd_max) and self.ttd_max > 0):
            raise ValidationError(f"ttd_max must be positive, got {self.ttd_max}")

    @classmethod
    def tos(cls) -> "TimeScale":
        return cls(ScaleKind.TOS)

    @classmethod
    def rttd(cls, ttd_max: float | None = None) -> "TimeScale":
        return cls(ScaleKind.RTTD, ttd_max)

    def resolved(self, ttd: Mapping[str, float]) -> "TimeScale":
        """Return a copy with ``ttd_max`` filled in from ``ttd`` and checked."""
        if self.kind is ScaleKind.TOS:
            return self
        observed = max(ttd.values())
        if self.ttd_max is None:
            return TimeScale(ScaleKind.RTTD, observed)
        if self.ttd_max < observed:
            raise ValidationError(f"ttd_max {self.ttd_max} is below the largest time-to-death {observed}")
        return self


@dataclass(frozen=True)
class RiskInterval:
    """One counting-process row, ``(entry, exit]`` on the chosen time-scale."""

    subject_id: str
    entry: float
    exit: float
    event: bool
    covariates: tuple[float, ...] = ()


@dataclass(frozen=True)
class RiskSet:
    event_time: float
    at_risk: frozenset[str]
    case: str


def resolve_ttd(cohort: Cohort, imputed: Mapping[str, float] | None = None) -> dict[str, float]:
    """Time-to-death at enrolment for every subject.

    Decedents take their observed follow-up; censored subjects take their
    imputed expected survival time, which may not be shorter than the
    follow-up already observed.
    """
    imputed = imputed or {}
    out = {}
    for s in cohort:
        if s.died:
            out[s.subject_id] = s.followup_end
            continue
        if s.subject_id not in imputed:
            raise ValidationError(
                f"subject {s.subject_id} is censored and has no imputed time-to-death: decedents-only or impute first"
            )
        value = float(imputed[s.subject_id])
        if not value >= s.followup_end:
            raise ValidationError(
                f"subject {s.subject_id}: imputed time-to-death {value} is shorter than follow-up {s.followup_end}"
            )
        out[s.subject_id] = value
    return out


#: rTTD coordinates live on a grid of 2**-30 years (about 0.03 s). Sums of
#: grid values are exact in double precision, so moving ``ttd_max`` translates
#: every coordinate exactly and times that coincide in decimal arithmetic
#: (say an entry and another subject's event) stay tied.
RTTD_RESOLUTION = 2.0**-30


def _snap(x: float) -> float:
    return round(x / RTTD_RESOLUTION) * RTTD_RESOLUTION


def to_scale(u: float, subject_ttd: float, scale: TimeScale) -> float:
    """Map ``u`` years since enrolment onto ``scale`` for a subject with ``subject_ttd``.

    rTTD coordinates are ``ttd_max - (subject_ttd - u)`` rounded to
    :data:`RTTD_RESOLUTION`.
    """
    if scale.kind is ScaleKind.TOS:
        return u
    if scale.ttd_max is None:
        raise ValidationError("rTTD time-scale needs a resolved ttd_max")
    if subject_ttd > scale.ttd_max:
        raise ValidationError(f"time-to-death {subject_ttd} exceeds ttd_max {scale.ttd_max}")
    return _snap(scale.ttd_max) + _snap(u - subject_ttd)


def _cut_points(s: SubjectRecord, tv_used: Sequence[str]) -> list[float]:
    events = s.event_times
    if events and events[0] <= 0.0:
        raise ValidationError(f"subject {s.subject_id}: outcome event at time 0 has no preceding risk time")
    if len(set(events)) != len(events):
        raise ValidationError(f"subject {s.subject_id}: duplicate event times")
    cuts = {0.0, s.followup_end, *events}
    if s.exposure_start is not None:
        cuts.add(s.exposure_start)
    for name in tv_used:
        cuts.update(t for t, _ in s.tv_covariates.get(name, ()))
    return sorted(t for t in cuts if 0.0 <= t <= s.followup_end)


def expand(
    cohort: Cohort,
    scale: TimeScale,
    covariates: Sequence[str] = (EXPOSURE,),
    ttd: Mapping[str, float] | None = None,
) -> list[RiskInterval]:
    """Expand a cohort into risk intervals on ``scale``.

    Follow-up is cut at every outcome event, at exposure start and at every
    measurement time of a requested time-varying covariate. Covariates are
    evaluated at the start of each interval, so an event coinciding with a
    measurement uses the value in effect before it. Death closes follow-up
    and is not itself an outcome event.

    Parameters
    ----------
    covariates
        Column order of the covariate vector; names from the cohort schema
        plus ``"exposure"`` for the absorbing exposure indicator.
    ttd
        Time-to-death at enrolment per subject (see :func:`resolve_ttd`).
        Required for rTTD unless every subject died.
    """
    unknown = [c for c in covariates if c != EXPOSURE and c not in cohort.names]
    if unknown:
        raise ValidationError(f"unknown covariate(s) {unknown}; schema has {list(cohort.names)}")
    if len(set(covariates)) != len(covariates):
        raise ValidationError("covariate list has duplicates")
    if scale.kind is ScaleKind.RTTD:
        ttd = resolve_ttd(cohort) if ttd is None else dict(ttd)
        missing = [s.subject_id for s in cohort if s.subject_id not in ttd]
        if missing:
            raise ValidationError(f"no time-to-death for subject(s) {missing[:5]}: decedents-only or impute first")
        scale = scale.resolved(ttd)
    tv_used = [c for c in covariates if c in cohort.tv_names]

    out = []
    for s in cohort:
        subject_ttd = ttd[s.subject_id] if scale.kind is ScaleKind.RTTD else s.followup_end
        cuts = _cut_points(s, tv_used)
        events = set(s.event_times)
        coords = [to_scale(t, subject_ttd, scale) for t in cuts]
        for (a, b), (entry, exit_) in zip(zip(cuts, cuts[1:]), zip(coords, coords[1:])):
            row = []
            for name in covariates:
                if name == EXPOSURE:
                    row.append(1.0 if s.exposure_start is not None and s.exposure_start <= a else 0.0)
                else:
                    row.append(covariate_value_at(s, name, a))
            event = b in events
            if not entry < exit_:
                # shorter than the rTTD grid step; only an event makes this an error
                if event:
                    raise ValidationError(f"subject {s.subject_id}: interval ({a}, {b}] collapses on the time-scale")
                continue
            out.append(RiskInterval(s.subject_id, entry, exit_, event, tuple(row)))
    return out


def risk_sets(intervals: Sequence[RiskInterval]) -> list[RiskSet]:
    """One risk set per event: subjects with an interval satisfying ``entry < e <= exit``."""
    if not intervals:
        return []
    entry = np.array([iv.entry for iv in intervals])
    exit_ = np.array([iv.exit for iv in intervals])
    ids = np.array([iv.subject_id for iv in intervals], dtype=object)
    out = []
    for iv in intervals:
        if not iv.event:
            continue
        e = iv.exit
        mask = (entry < e) & (e <= exit_)
        out.append(RiskSet(e, frozenset(ids[mask]), iv.subject_id))
    out.sort(key=lambda r: (r.event_time, r.case))
    return out


@dataclass
class IntervalData:
    """Columnar form of a list of risk intervals, used by the fitters.

    Rows of one subject are contiguous. ``subject`` holds integer cluster codes
    indexing ``subject_ids``.
    """

    subject: np.ndarray
    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    subject_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.subject = np.asarray(self.subject, dtype=np.int64)
        self.entry = np.asarray(self.entry, dtype=float)
        self.exit = np.asarray(self.exit, dtype=float)
        self.event = np.asarray(self.event, dtype=bool)
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.entry), len(self.names))
        if not self.subject_ids:
            self.subject_ids = tuple(str(i) for i in range(int(self.subject.max(initial=-1)) + 1))
        n = len(self.entry)
        if not (len(self.subject) == len(self.exit) == len(self.event) == n):
            raise ValidationError("interval columns have different lengths")
        if n and not np.all(self.entry < self.exit):
            raise ValidationError("every interval needs entry < exit")

    @classmethod
    def from_intervals(cls, intervals: Sequence[RiskInterval], names: Sequence[str]) -> "IntervalData":
        codes: dict[str, int] = {}
        subject = [codes.setdefault(iv.subject_id, len(codes)) for iv in intervals]
        p = len(names)
        X = np.array([iv.covariates for iv in intervals], dtype=float).reshape(len(intervals), p)
        if any(len(iv.covariates) != p for iv in intervals):
            raise ValidationError("covariate vectors do not match the column names")
        return cls(
            subject=np.array(subject, dtype=np.int64),
            entry=np.array([iv.entry for iv in intervals], dtype=float),
            exit=np.array([iv.exit for iv in intervals], dtype=float),
            event=np.array([iv.event for iv in intervals], dtype=bool),
            X=X,
            names=tuple(names),
            subject_ids=tuple(codes),
        )

    def __len__(self) -> int:
        return len(self.entry)

    @property
    def n_subjects(self) -> int:
        return len(np.unique(self.subject))

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    def to_intervals(self) -> list[RiskInterval]:
        return [
            RiskInterval(self.subject_ids[c], float(a), float(b), bool(d), tuple(float(v) for v in x))
            for c, a, b, d, x in zip(self.subject, self.entry, self.exit, self.event, self.X)
        ]

    def columns(self, names: Sequence[str]) -> "IntervalData":
        """Copy restricted to (and reordered by) the named covariate columns."""
        missing = [n for n in names if n not in self.names]
        if missing:
            raise ValidationError(f"unknown covariate column(s) {missing}")
        idx = [self.names.index(n) for n in names]
        return IntervalData(self.subject, self.entry, self.exit, self.event, self.X[:, idx], tuple(names), self.subject_ids)

    def rows(self, mask: np.ndarray) -> "IntervalData":
        return IntervalData(
            self.subject[mask], self.entry[mask], self.exit[mask], self.event[mask], self.X[mask], self.names, self.subject_ids
        )

    def shifted(self, c: float) -> "IntervalData":
        return IntervalData(self.subject, self.entry + c, self.exit + c, self.event, self.X, self.names, self.subject_ids)


def expand_data(
    cohort: Cohort,
    scale: TimeScale,
    covariates: Sequence[str] = (EXPOSURE,),
    ttd: Mapping[str, float] | None = None,
) -> IntervalData:
    """:func:`expand` followed by conversion to :class:`IntervalData`."""
    return IntervalData.from_intervals(expand(cohort, scale, covariates, ttd), covariates)


def write_intervals_csv(data: IntervalData, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "entry", "exit", "event", *data.names])
        for c, a, b, d, x in zip(data.subject, data.entry, data.exit, data.event, data.X):
            w.writerow([data.subject_ids[c], repr(float(a)), repr(float(b)), int(d), *(repr(float(v)) for v in x)])


def read_intervals_csv(path) -> IntervalData:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["subject_id", "entry", "exit", "event"]:
            raise ValidationError("interval file must start with subject_id, entry, exit, event", source=str(path))
        names = tuple(header[4:])
        intervals = []
        for row in reader:
            try:
                intervals.append(
                    RiskInterval(row[0], float(row[1]), float(row[2]), row[3] == "1", tuple(float(v) for v in row[4:]))
                )
            except (ValueError, IndexError):
                raise ValidationError("malformed interval row", row=reader.line_num, source=str(path)) from None
    return IntervalData.from_intervals(intervals, names)


# --- incidence ---------------------------------------------------------------


@dataclass(frozen=True)
class IncidenceCell:
    events: int
    person_years: float

    @property
    def rate(self) -> float | None:
        """Events per person-year, ``None`` when there is no person-time."""
        return self.events / self.person_years if self.person_years > 0 else None


@dataclass(frozen=True)
class IncidenceTable:
    overall: IncidenceCell
    never_exposed: IncidenceCell
    ever_exposed: IncidenceCell
    before_exposure: IncidenceCell
    after_exposure: IncidenceCell
    n_subjects: int

    CELLS = ("overall", "never_exposed", "ever_exposed", "before_exposure", "after_exposure")

    def rows(self) -> list[dict]:
        out = []
        for name in self.CELLS:
            cell = getattr(self, name)
            out.append({"cell": name, "events": cell.events, "person_years": cell.person_years, "rate": cell.rate})
        return out


def person_time_table(cohort: Cohort) -> IncidenceTable:
    """Events, person-years and rates overall and by exposure history.

    An event exactly at exposure start counts as before exposure, in line
    with the ``(entry, exit]`` interval convention.
    """
    acc = {k: [0, 0.0] for k in IncidenceTable.CELLS}
    for s in cohort:
        fu, n = s.followup_end, s.n_events
        acc["overall"][0] += n
        acc["overall"][1] += fu
        if s.exposure_start is None:
            acc["never_exposed"][0] += n
            acc["never_exposed"][1] += fu
            continue
        start = s.exposure_start
        before = sum(t <= start for t in s.event_times)
        acc["ever_exposed"][0] += n
        acc["ever_exposed"][1] += fu
        acc["before_exposure"][0] += before
        acc["before_exposure"][1] += start
        acc["after_exposure"][0] += n - before
        acc["after_exposure"][1] += fu - start
    return IncidenceTable(**{k: IncidenceCell(e, py) for k, (e, py) in acc.items()}, n_subjects=len(cohort))
