"""Buckley-James censored linear regression.

Used to estimate the expected survival time of subjects still alive at the
end of follow-up, so that the whole cohort can be placed on the rTTD
time-scale. Each iteration fits least squares, computes a Kaplan-Meier
estimate on the residuals, and replaces each censored response by
``x'b + E[e | e > e_i]`` from that estimate.

When the largest residual is censored it is treated as uncensored, so the
Kaplan-Meier estimate has total mass one and every conditional expectation
is finite.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import Cohort, covariate_value_at
from .errors import ValidationError

__all__ = [
    "BjScale",
    "BjStatus",
    "GuardStatus",
    "BjProblem",
    "BjFit",
    "ImputationSummary",
    "bj_fit",
    "censoring_guard",
    "evaluate_imputation",
    "write_imputations",
    "read_imputations",
    "WARN_FRACTION",
    "REFUSE_FRACTION",
]

#: Censoring fractions at or above this trigger a warning.
WARN_FRACTION = 0.20
#: Censoring fractions above this are refused unless overridden.
REFUSE_FRACTION = 0.40
#: Longest coefficient cycle recognised as oscillation.
MAX_CYCLE = 10


class BjScale(str, enum.Enum):
    IDENTITY = "identity"
    LOG = "log"


class BjStatus(str, enum.Enum):
    CONVERGED = "converged"
    OSCILLATED = "oscillated"
    MAX_ITER = "max_iter"


class GuardStatus(str, enum.Enum):
    OK = "ok"
    WARN = "warn"
    REFUSE = "refuse"


@dataclass(frozen=True)
class BjProblem:
    """Censored regression data.

    ``design`` must already contain an intercept column.
    """

    response: np.ndarray
    delta: np.ndarray
    design: np.ndarray
    scale: BjScale = BjScale.IDENTITY
    subject_ids: tuple[str, ...] = ()
    names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.response, dtype=float)
        delta = np.asarray(self.delta, dtype=bool)
        X = np.asarray(self.design, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1 or len(delta) != len(y) or X.shape[0] != len(y):
            raise ValidationError("response, delta and design rows must have the same length")
        if not np.all(y > 0):
            raise ValidationError("responses must be positive")
        if not np.all(np.isfinite(X)):
            raise ValidationError("design has missing or non-finite values")
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "scale", BjScale(self.scale))
        ids = tuple(self.subject_ids) or tuple(str(i) for i in range(len(y)))
        if len(ids) != len(y):
            raise ValidationError("subject_ids must match the number of rows")
        object.__setattr__(self, "subject_ids", ids)
        names = tuple(self.names) or tuple(f"x{j}" for j in range(X.shape[1]))
        object.__setattr__(self, "names", names)

    @property
    def censoring_fraction(self) -> float:
        return float(np.mean(~self.delta)) if len(self.delta) else 0.0

    @classmethod
    def from_cohort(
        cls,
        cohort: Cohort,
        covariates: Sequence[str] | None = None,
        scale: BjScale = BjScale.IDENTITY,
    ) -> "BjProblem":
        """Build the problem from a cohort: response is follow-up, delta is vital status.

        Time-varying covariates enter at their baseline (time 0) value.
        """
        covariates = list(cohort.names if covariates is None else covariates)
        unknown = [c for c in covariates if c not in cohort.names]
        if unknown:
            raise ValidationError(f"unknown covariate(s) {unknown}")
        rows = []
        for s in cohort:
            rows.append([1.0] + [covariate_value_at(s, c, 0.0) for c in covariates])
        return cls(
            response=np.array([s.followup_end for s in cohort]),
            delta=np.array([s.died for s in cohort]),
            design=np.array(rows).reshape(len(cohort), len(covariates) + 1),
            scale=scale,
            subject_ids=tuple(s.subject_id for s in cohort),
            names=("intercept", *covariates),
        )


@dataclass
class BjFit:
    coefficients: np.ndarray
    names: tuple[str, ...]
    #: censored subject id -> expected survival time in years
    imputed: dict[str, float]
    iterations: int
    status: BjStatus
    censoring_fraction: float
    scale: BjScale = BjScale.IDENTITY

    def to_dict(self) -> dict:
        return {
            "coefficients": dict(zip(self.names, map(float, self.coefficients))),
            "iterations": self.iterations,
            "status": self.status.value,
            "censoring_fraction": self.censoring_fraction,
            "scale": self.scale.value,
            "n_imputed": len(self.imputed),
        }


def _residual_km(e: np.ndarray, delta: np.ndarray):
    """Distinct uncensored residual values and their Kaplan-Meier masses.

    Deaths precede censorings at tied values; observations tied at the
    largest residual are treated as uncensored.
    """
    delta = delta.copy()
    delta[e == e.max()] = True
    order = np.lexsort((~delta, e))
    e_s, d_s = e[order], delta[order]
    values, start = np.unique(e_s, return_index=True)
    n = len(e_s)
    at_risk = n - start
    deaths = np.add.reduceat(d_s.astype(float), start)
    keep = deaths > 0
    values, at_risk, deaths = values[keep], at_risk[keep], deaths[keep]
    hazard = deaths / at_risk
    surv_before = np.concatenate(([1.0], np.cumprod(1.0 - hazard)[:-1]))
    return values, surv_before * hazard


def _impute(y, delta, fitted):
    e = y - fitted
    values, mass = _residual_km(e, delta)
    tail_mass = np.concatenate((np.cumsum(mass[::-1])[::-1], [0.0]))
    tail_first = np.concatenate((np.cumsum((mass * values)[::-1])[::-1], [0.0]))
    ystar = y.copy()
    cens = np.flatnonzero(~delta)
    idx = np.searchsorted(values, e[cens], side="right")
    has_tail = tail_mass[idx] > 0
    c, i = cens[has_tail], idx[has_tail]
    ystar[c] = np.maximum(fitted[c] + tail_first[i] / tail_mass[i], y[c])
    return ystar


def _lstsq(X, y):
    return np.linalg.lstsq(X, y, rcond=None)[0]


def bj_fit(problem: BjProblem, tol: float = 1e-6, max_iter: int = 100) -> BjFit:
    """Fit the Buckley-James estimator.

    Iteration stops when the coefficient sup-norm change falls below
    ``tol * max|y|`` (``y`` the response on the fitting scale).
    If the coefficients instead return (within ``tol``) to their value from
    ``L`` iterations earlier, ``2 <= L <= MAX_CYCLE``, the average over the
    cycle is used and the status is ``OSCILLATED``; for the common 2-cycle
    this is the mean of the pair.

    Raises
    ------
    ValidationError
        Rank-deficient design, all observations censored, or fewer than two
        uncensored observations.
    """
    X = problem.design
    delta = problem.delta
    if not delta.any():
        raise ValidationError("all observations are censored")
    if delta.sum() < 2:
        raise ValidationError("need at least two uncensored observations")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValidationError("design matrix is rank deficient")
    y = np.log(problem.response) if problem.scale is BjScale.LOG else problem.response.copy()

    # changes are measured in units of the response so that rescaling it
    # leaves the iteration path, and hence the stopping point, unchanged
    unit = float(np.max(np.abs(y))) or 1.0
    tol = tol * unit
    beta = _lstsq(X, y)
    history = [beta]
    status = BjStatus.MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        new = _lstsq(X, _impute(y, delta, X @ beta))
        if np.max(np.abs(new - beta)) < tol:
            beta = new
            status = BjStatus.CONVERGED
            break
        cycle = next(
            (L for L in range(2, min(MAX_CYCLE, len(history)) + 1) if np.max(np.abs(new - history[-L])) < tol),
            None,
        )
        if cycle is not None:
            beta = np.mean(history[-cycle + 1 :] + [new], axis=0)
            status = BjStatus.OSCILLATED
            break
        history.append(new)
        beta = new

    ystar = _impute(y, delta, X @ beta)
    times = np.exp(ystar) if problem.scale is BjScale.LOG else ystar
    times = np.maximum(times, problem.response)
    imputed = {problem.subject_ids[i]: float(times[i]) for i in np.flatnonzero(~delta)}
    return BjFit(beta, problem.names, imputed, it, status, problem.censoring_fraction, problem.scale)


def censoring_guard(problem: BjProblem | float, override: bool = False) -> GuardStatus:
    """Classify the censoring fraction: below 20% OK, 20-40% WARN, above 40% REFUSE.

    With ``override`` a refusal is downgraded to a warning.
    """
    frac = problem.censoring_fraction if isinstance(problem, BjProblem) else float(problem)
    if frac < WARN_FRACTION:
        return GuardStatus.OK
    if frac <= REFUSE_FRACTION or override:
        return GuardStatus.WARN
    return GuardStatus.REFUSE


@dataclass(frozen=True)
class ImputationSummary:
    mean_observed: float
    mean_imputed: float
    mean_abs_diff: float
    n: int


def evaluate_imputation(holdout: Iterable[tuple[float, float]]) -> ImputationSummary:
    """Summarise imputation accuracy on subjects whose deaths were later observed."""
    pairs = np.asarray(list(holdout), dtype=float)
    if pairs.size == 0:
        raise ValidationError("empty holdout")
    obs, imp = pairs[:, 0], pairs[:, 1]
    return ImputationSummary(float(obs.mean()), float(imp.mean()), float(np.abs(obs - imp).mean()), len(obs))


def write_imputations(imputed: Mapping[str, float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "imputed_ttd_years"])
        for sid, t in imputed.items():
            w.writerow([sid, repr(float(t))])


def read_imputations(path) -> dict[str, float]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames[:2]) != ["subject_id", "imputed_ttd_years"]:
            raise ValidationError("imputation file needs columns subject_id, imputed_ttd_years", source=str(path))
        for row in reader:
            try:
                out[row["subject_id"]] = float(row["imputed_ttd_years"])
            except ValueError:
                raise ValidationError("malformed imputed time", row=reader.line_num, source=str(path)) from None
    return out
