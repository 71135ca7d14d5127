"""Cluster bootstrap for differences in hazard ratios between model specifications."""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cohort import EXPOSURE, Cohort
from .coxag import FitOptions, ModelFit, Ties, fit
from .errors import NumericalError, RttdError, ValidationError
from .timescale import IntervalData, ScaleKind, TimeScale, expand_data

__all__ = [
    "CiMethod",
    "ModelSpec",
    "BootstrapPlan",
    "BootstrapResult",
    "bootstrap_hr_difference",
    "change_in_estimate",
    "percentile_ci",
    "resample_subjects",
]


class CiMethod(str, enum.Enum):
    PERCENTILE = "percentile"
    NORMAL = "normal"


@dataclass(frozen=True)
class ModelSpec:
    """Time-scale, covariate columns and tie handling of one model."""

    timescale: ScaleKind
    covariates: tuple[str, ...] = (EXPOSURE,)
    ties: Ties = Ties.BRESLOW

    def __post_init__(self):
        object.__setattr__(self, "timescale", ScaleKind(self.timescale))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "ties", Ties(self.ties))
        if not self.covariates:
            raise ValidationError("a model needs at least one covariate")

    @classmethod
    def parse(cls, text: str, ties: Ties = Ties.BRESLOW) -> "ModelSpec":
        """Parse ``"tos:exposure,age,pwb"``."""
        scale, _, cols = text.partition(":")
        cols = tuple(c.strip() for c in cols.split(",") if c.strip()) or (EXPOSURE,)
        try:
            return cls(ScaleKind(scale.strip().lower()), cols, ties)
        except ValueError:
            raise ValidationError(f"cannot parse model spec {text!r}; expected e.g. 'tos:exposure,age'") from None

    @property
    def label(self) -> str:
        return f"{self.timescale.value}:{','.join(self.covariates)}"

    def to_dict(self) -> dict:
        return {"timescale": self.timescale.value, "covariates": list(self.covariates), "ties": self.ties.value}


@dataclass(frozen=True)
class BootstrapPlan:
    spec_a: ModelSpec
    spec_b: ModelSpec
    n_reps: int = 1000
    seed: int = 0
    ci_method: CiMethod = CiMethod.PERCENTILE
    covariate: str = EXPOSURE
    resample_unit: str = "subject"
    level: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "ci_method", CiMethod(self.ci_method))
        if self.n_reps < 1:
            raise ValidationError("n_reps must be at least 1")
        if self.resample_unit != "subject":
            raise ValidationError("only subjects can be resampling units")
        for spec in (self.spec_a, self.spec_b):
            if self.covariate not in spec.covariates:
                raise ValidationError(f"{self.covariate!r} is not in model {spec.label}")

    def to_dict(self) -> dict:
        return {
            "spec_a": self.spec_a.to_dict(),
            "spec_b": self.spec_b.to_dict(),
            "n_reps": self.n_reps,
            "seed": self.seed,
            "ci_method": self.ci_method.value,
            "covariate": self.covariate,
            "resample_unit": self.resample_unit,
            "level": self.level,
        }


@dataclass
class BootstrapResult:
    plan: BootstrapPlan
    point_estimate: float
    #: one entry per replicate in index order; NaN where a fit failed
    replicates: np.ndarray
    ci_low: float
    ci_high: float
    n_failed: int
    hr_a: float = math.nan
    hr_b: float = math.nan
    failures: list[str] = field(default_factory=list)

    #: more failed replicates than this fraction marks the result unreliable
    MAX_FAILED = 0.05

    @property
    def successful(self) -> np.ndarray:
        return self.replicates[np.isfinite(self.replicates)]

    @property
    def unreliable(self) -> bool:
        return self.n_failed > self.MAX_FAILED * len(self.replicates)

    def to_dict(self) -> dict:
        ok = self.successful
        return {
            "plan": self.plan.to_dict(),
            "hr_a": self.hr_a,
            "hr_b": self.hr_b,
            "point_estimate": self.point_estimate,
            "ci": {"low": self.ci_low, "high": self.ci_high, "method": self.plan.ci_method.value, "level": self.plan.level},
            "replicates": {
                "n": int(len(self.replicates)),
                "n_successful": int(len(ok)),
                "mean": float(ok.mean()) if len(ok) else None,
                "sd": float(ok.std(ddof=1)) if len(ok) > 1 else None,
                "min": float(ok.min()) if len(ok) else None,
                "max": float(ok.max()) if len(ok) else None,
            },
            "n_failed": self.n_failed,
            "unreliable": self.unreliable,
        }

    def write_replicates_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", "difference"])
            for i, v in enumerate(self.replicates):
                w.writerow([i, "" if not np.isfinite(v) else repr(float(v))])


def change_in_estimate(fit_full: ModelFit, fit_reduced: ModelFit, covariate: str = EXPOSURE) -> float:
    """``HR(reduced) - HR(full)`` for ``covariate``; positive when adjustment lowers the HR."""
    for m in (fit_full, fit_reduced):
        if not m.converged:
            raise NumericalError(f"fit did not converge: {m.message}")
    return fit_reduced.hr(covariate) - fit_full.hr(covariate)


def percentile_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Order statistics at ranks ``ceil(a R)`` and ``ceil((1 - a) R)``, ``a = (1 - level) / 2``."""
    v = np.sort(np.asarray(values, dtype=float))
    R = len(v)
    if R == 0:
        raise ValidationError("no successful replicates")
    a = (1.0 - level) / 2.0
    lo = max(1, math.ceil(round(a * R, 9)))
    hi = min(R, math.ceil(round((1.0 - a) * R, 9)))
    return float(v[lo - 1]), float(v[hi - 1])


class _Blocks:
    """Row ranges of each subject in an :class:`IntervalData` (rows are contiguous per subject)."""

    def __init__(self, data: IntervalData, n_subjects: int):
        if np.any(np.diff(data.subject) < 0):
            order = np.argsort(data.subject, kind="stable")
            data = data.rows(order)
        self.data = data
        self.counts = np.bincount(data.subject, minlength=n_subjects)
        self.starts = np.concatenate(([0], np.cumsum(self.counts)[:-1]))

    def take(self, draw: np.ndarray) -> IntervalData:
        lens = self.counts[draw]
        total = int(lens.sum())
        out_starts = np.cumsum(lens) - lens
        idx = np.arange(total) - np.repeat(out_starts - self.starts[draw], lens)
        d = self.data
        # each draw is a distinct cluster, even when a subject is drawn twice
        cluster = np.repeat(np.arange(len(draw)), lens)
        return IntervalData(cluster, d.entry[idx], d.exit[idx], d.event[idx], d.X[idx], d.names, tuple(str(i) for i in range(len(draw))))


def resample_subjects(data: IntervalData, draw: np.ndarray) -> IntervalData:
    """Dataset made of the drawn subjects' intervals, re-identified by draw position."""
    return _Blocks(data, len(data.subject_ids)).take(np.asarray(draw))


def _replicate_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))


def bootstrap_hr_difference(
    cohort: Cohort,
    plan: BootstrapPlan,
    ttd: Mapping[str, float] | None = None,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Cluster bootstrap of ``HR_a - HR_b`` for ``plan.covariate``.

    Each replicate draws subjects with replacement from its own RNG stream,
    keyed by ``(plan.seed, replicate index)``, so results do not depend on
    ``n_jobs``. A drawn subject brings all of their intervals and events.
    Replicates whose fit fails or does not converge are recorded as NaN and
    counted in ``n_failed``.

    Parameters
    ----------
    ttd
        Time-to-death per subject, needed when a spec uses rTTD on a cohort
        with censored subjects.

    Raises
    ------
    RttdError
        When either specification cannot be fitted on the full cohort.
    """
    specs = [plan.spec_a, plan.spec_b]
    same = plan.spec_a == plan.spec_b
    datasets, full = [], []
    for spec in specs[: 1 if same else 2]:
        scale = TimeScale(spec.timescale)
        data = expand_data(cohort, scale, spec.covariates, ttd if spec.timescale is ScaleKind.RTTD else None)
        m = fit(data, FitOptions(ties=spec.ties))
        if not m.converged:
            raise NumericalError(f"full-cohort fit of {spec.label} did not converge: {m.message}")
        datasets.append(data)
        full.append(m)
    if same:
        full.append(full[0])
    hr_a, hr_b = full[0].hr(plan.covariate), full[1].hr(plan.covariate)
    n = len(cohort)
    blocks = [_Blocks(d, n) for d in datasets]
    options = [FitOptions(ties=s.ties) for s in specs]

    def one(r: int):
        draw = _replicate_rng(plan.seed, r).integers(0, n, size=n)
        hrs = []
        try:
            for b, opt in zip(blocks, options):
                m = fit(b.take(draw), opt)
                if not m.converged:
                    return math.nan, f"replicate {r}: {m.message}"
                hrs.append(m.hr(plan.covariate))
        except RttdError as exc:
            return math.nan, f"replicate {r}: {exc}"
        if same:
            hrs.append(hrs[0])
        return hrs[0] - hrs[1], None

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, range(plan.n_reps)))
    else:
        results = [one(r) for r in range(plan.n_reps)]
    reps = np.array([v for v, _ in results], dtype=float)
    failures = [msg for _, msg in results if msg]
    ok = reps[np.isfinite(reps)]
    point = hr_a - hr_b
    if len(ok) == 0:
        lo = hi = math.nan
    elif plan.ci_method is CiMethod.PERCENTILE:
        lo, hi = percentile_ci(ok, plan.level)
    else:
        from statistics import NormalDist

        z = NormalDist().inv_cdf(0.5 + plan.level / 2.0)
        sd = float(ok.std(ddof=1)) if len(ok) > 1 else 0.0
        lo, hi = point - z * sd, point + z * sd
    return BootstrapResult(plan, point, reps, lo, hi, len(failures), hr_a, hr_b, failures)
