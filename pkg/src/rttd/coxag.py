"""Cox / Andersen-Gill partial likelihood on counting-process data.

Each event at time ``e`` contributes ``eta_case - log(sum_risk exp(eta_j))``
with the risk set ``{j : entry_j < e <= exit_j}``. Risk-set sums are formed
as two reverse cumulative sums, over intervals sorted by exit and by entry:
``sum_{exit >= e} - sum_{entry >= e}``. That handles staggered entry and the
recurrent-event layout without materialising risk sets.

Breslow and Efron tie handling share one code path: a tied group of ``d``
events contributes ``d`` denominators ``S0 - (l/d) D0`` for Efron and ``d``
copies of ``S0`` for Breslow.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, NumericalError, ValidationError
from .timescale import IntervalData

__all__ = [
    "Ties",
    "FitOptions",
    "ModelFit",
    "HazardRatio",
    "log_partial_likelihood",
    "score_residuals",
    "fit",
    "hazard_ratios",
    "format_hr_table",
]

Z95 = 1.96


class Ties(str, enum.Enum):
    BRESLOW = "breslow"
    EFRON = "efron"


@dataclass(frozen=True)
class FitOptions:
    ties: Ties = Ties.BRESLOW
    max_iter: int = 50
    tol: float = 1e-8
    robust_cluster: bool = True
    #: |beta| beyond this is treated as a diverging (monotone) likelihood.
    beta_bound: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "ties", Ties(self.ties))
        if not self.tol > 0:
            raise ValidationError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValidationError(f"max_iter must be at least 1, got {self.max_iter}")


def _as_data(intervals) -> IntervalData:
    if isinstance(intervals, IntervalData):
        return intervals
    intervals = list(intervals)
    p = len(intervals[0].covariates) if intervals else 0
    return IntervalData.from_intervals(intervals, [f"x{j}" for j in range(p)])


def _revcum(v: np.ndarray) -> np.ndarray:
    """Reverse cumulative sum along axis 0 with a trailing zero row."""
    out = np.zeros((v.shape[0] + 1,) + v.shape[1:])
    out[:-1] = v[::-1].cumsum(axis=0)[::-1]
    return out


class _Problem:
    """Sorting and grouping for one dataset, computed once and reused per beta."""

    # groups whose risk-set sum is this small relative to the cumulative
    # sums it was formed from are recomputed directly
    _CANCEL = 1e-8

    def __init__(self, data: IntervalData, ties: Ties):
        self.data = data
        self.n, self.p = data.X.shape
        self.X = data.X - data.X.mean(axis=0) if self.n else data.X
        self.cases = np.flatnonzero(data.event)
        if len(self.cases) == 0:
            raise ValidationError("no outcome events: nothing to fit")
        self.times, self.group = np.unique(data.exit[self.cases], return_inverse=True)
        self.d = np.bincount(self.group, minlength=len(self.times))
        self.exit_order = np.argsort(data.exit, kind="stable")
        self.entry_order = np.argsort(data.entry, kind="stable")
        self.pos_exit = np.searchsorted(data.exit[self.exit_order], self.times, side="left")
        self.pos_entry = np.searchsorted(data.entry[self.entry_order], self.times, side="left")
        # one row per (group, l) for the tie correction
        self.row_group = np.repeat(np.arange(len(self.times)), self.d)
        starts = np.concatenate(([0], np.cumsum(self.d)[:-1]))
        lvl = np.arange(len(self.row_group)) - starts[self.row_group]
        if ties is Ties.EFRON and np.any(self.d > 1):
            self.frac = lvl / self.d[self.row_group]
        else:
            self.frac = np.zeros(len(self.row_group))
        self.tied = bool(np.any(self.frac > 0))
        # event-index range covered by each interval, for score residuals
        self.k_exit = np.searchsorted(self.times, data.exit, side="right")
        self.k_entry = np.searchsorted(self.times, data.entry, side="right")

    def _risk_sums(self, w, wx, wxx):
        def risk(v):
            a = _revcum(v[self.exit_order])[self.pos_exit]
            b = _revcum(v[self.entry_order])[self.pos_entry]
            return a - b, a

        S0, A0 = risk(w)
        S1, _ = risk(wx)
        S2, _ = risk(wxx) if wxx is not None else (None, None)
        bad = np.flatnonzero(S0 <= self._CANCEL * A0)
        for k in bad:
            t = self.times[k]
            mask = (self.data.entry < t) & (t <= self.data.exit)
            S0[k] = w[mask].sum()
            S1[k] = wx[mask].sum(axis=0)
            if S2 is not None:
                S2[k] = wxx[mask].sum(axis=0)
        if np.any(S0 <= 0):
            raise NumericalError("event with an empty (or numerically vanishing) risk set")
        return S0, S1, S2

    def _terms(self, beta, hessian=True):
        beta = np.asarray(beta, dtype=float).reshape(self.p)
        eta = self.X @ beta
        c = eta.max()
        w = np.exp(eta - c)
        wx = w[:, None] * self.X
        wxx = wx[:, :, None] * self.X[:, None, :] if hessian else None
        S0, S1, S2 = self._risk_sums(w, wx, wxx)
        g = self.row_group
        if self.tied:
            K = len(self.times)
            D0 = np.bincount(self.group, weights=w[self.cases], minlength=K)
            D1 = np.zeros((K, self.p))
            np.add.at(D1, self.group, wx[self.cases])
            denom = S0[g] - self.frac * D0[g]
            num1 = S1[g] - self.frac[:, None] * D1[g]
            if hessian:
                D2 = np.zeros((K, self.p, self.p))
                np.add.at(D2, self.group, wxx[self.cases])
                num2 = S2[g] - self.frac[:, None, None] * D2[g]
            else:
                num2 = None
        else:
            denom, num1 = S0[g], S1[g]
            num2 = S2[g] if hessian else None
        if np.any(denom <= 0):
            raise NumericalError("non-positive risk-set denominator")
        return eta, c, w, denom, num1, num2

    def evaluate(self, beta, hessian=True):
        eta, c, w, denom, num1, num2 = self._terms(beta, hessian)
        value = float(np.sum(eta[self.cases] - c) - np.sum(np.log(denom)))
        xbar = num1 / denom[:, None]
        grad = self.X[self.cases].sum(axis=0) - xbar.sum(axis=0)
        if not hessian:
            return value, grad, None
        H = -(np.sum(num2 / denom[:, None, None], axis=0) - xbar.T @ xbar)
        return value, grad, 0.5 * (H + H.T)

    def score_residuals(self, beta):
        """Per-interval score contributions; they sum to the gradient."""
        eta, c, w, denom, num1, _ = self._terms(beta, hessian=False)
        K, g = len(self.times), self.row_group
        xbar = num1 / denom[:, None]
        a = np.bincount(g, weights=1.0 / denom, minlength=K)
        b = np.zeros((K, self.p))
        np.add.at(b, g, xbar / denom[:, None])
        CA = np.concatenate(([0.0], np.cumsum(a)))
        CB = np.vstack([np.zeros((1, self.p)), np.cumsum(b, axis=0)])
        A = CA[self.k_exit] - CA[self.k_entry]
        B = CB[self.k_exit] - CB[self.k_entry]
        U = -w[:, None] * (self.X * A[:, None] - B)

        k = self.group
        mean_xbar = np.zeros((K, self.p))
        np.add.at(mean_xbar, g, xbar)
        mean_xbar /= self.d[:, None]
        U[self.cases] += self.X[self.cases] - mean_xbar[k]
        if self.tied:
            ca = np.bincount(g, weights=self.frac / denom, minlength=K)
            cb = np.zeros((K, self.p))
            np.add.at(cb, g, self.frac[:, None] * xbar / denom[:, None])
            wc = w[self.cases][:, None]
            U[self.cases] += wc * (self.X[self.cases] * ca[k][:, None] - cb[k])
        return U


def log_partial_likelihood(beta, intervals, ties: Ties = Ties.BRESLOW):
    """Log partial likelihood with its analytic gradient and Hessian.

    Parameters
    ----------
    beta : array_like
        Coefficients, one per covariate column.
    intervals : IntervalData or sequence of RiskInterval
    ties : Ties

    Returns
    -------
    value : float
    gradient : ndarray, shape (p,)
    hessian : ndarray, shape (p, p)
    """
    return _Problem(_as_data(intervals), Ties(ties)).evaluate(beta)


def score_residuals(beta, intervals, ties: Ties = Ties.BRESLOW) -> np.ndarray:
    """Score residuals, one row per interval."""
    return _Problem(_as_data(intervals), Ties(ties)).score_residuals(beta)


@dataclass
class ModelFit:
    names: tuple[str, ...]
    beta: np.ndarray
    cov_model: np.ndarray
    cov_robust: np.ndarray
    loglik: float
    loglik_null: float
    n_events: int
    n_subjects: int
    n_intervals: int
    iterations: int
    converged: bool
    ties: Ties = Ties.BRESLOW
    message: str = ""
    options: dict = field(default_factory=dict)

    def se(self, robust: bool = True) -> np.ndarray:
        cov = self.cov_robust if robust else self.cov_model
        return np.sqrt(np.clip(np.diag(cov), 0.0, None))

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.beta)

    def hr(self, name: str) -> float:
        if name not in self.names:
            raise ValidationError(f"covariate {name!r} not in fit {list(self.names)}")
        return float(np.exp(self.beta[self.names.index(name)]))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "coefficients": [float(b) for b in self.beta],
            "hazard_ratios": [float(h) for h in self.hazard_ratios],
            "se_model": [float(s) for s in self.se(robust=False)],
            "se_robust": [float(s) for s in self.se(robust=True)],
            "cov_model": self.cov_model.tolist(),
            "cov_robust": self.cov_robust.tolist(),
            "loglik": self.loglik,
            "loglik_null": self.loglik_null,
            "counts": {"events": self.n_events, "subjects": self.n_subjects, "intervals": self.n_intervals},
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "message": self.message,
                **self.options,
            },
            "ties": self.ties.value,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelFit":
        conv = dict(d["convergence"])
        return cls(
            names=tuple(d["names"]),
            beta=np.array(d["coefficients"], dtype=float),
            cov_model=np.array(d["cov_model"], dtype=float).reshape(len(d["names"]), len(d["names"])),
            cov_robust=np.array(d["cov_robust"], dtype=float).reshape(len(d["names"]), len(d["names"])),
            loglik=d["loglik"],
            loglik_null=d["loglik_null"],
            n_events=d["counts"]["events"],
            n_subjects=d["counts"]["subjects"],
            n_intervals=d["counts"]["intervals"],
            iterations=conv.pop("iterations"),
            converged=conv.pop("converged"),
            message=conv.pop("message", ""),
            ties=Ties(d["ties"]),
            options=conv,
        )


def _check_variation(names, info0):
    scale = max(1.0, float(np.max(np.abs(np.diag(info0))))) if info0.size else 1.0
    for j, name in enumerate(names):
        if info0[j, j] <= 1e-12 * scale:
            raise ValidationError(f"covariate {name!r} is constant within every risk set and cannot be estimated")


def fit(intervals, options: FitOptions | None = None) -> ModelFit:
    """Maximise the log partial likelihood by Newton-Raphson with step-halving.

    Iteration starts at ``beta = 0``. The fit is reported as converged when
    the score sup-norm and the last step are both below ``options.tol``. A
    coefficient drifting past ``options.beta_bound`` is reported as
    non-convergence (monotone likelihood) rather than raised.

    The robust covariance is the sandwich ``I^-1 (sum_g s_g s_g^T) I^-1``
    with ``s_g`` the score residuals summed within subject ``g`` (or per
    interval when ``robust_cluster`` is false).

    Raises
    ------
    ValidationError
        No events, or a covariate with no variation inside any risk set.
    """
    options = options or FitOptions()
    data = _as_data(intervals)
    prob = _Problem(data, options.ties)
    p = prob.p

    beta = np.zeros(p)
    ll, g, H = prob.evaluate(beta)
    ll_null = ll
    _check_variation(data.names, -H)

    converged, message, it = False, "", 0
    for it in range(1, options.max_iter + 1):
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            message = "singular information matrix"
            break
        new = beta + step
        ll_new, g_new, H_new = prob.evaluate(new)
        halvings = 0
        while not ll_new >= ll - 1e-12 * max(1.0, abs(ll)) and halvings < 50:
            step = step / 2
            new = beta + step
            ll_new, g_new, H_new = prob.evaluate(new)
            halvings += 1
        beta, ll, g, H = new, ll_new, g_new, H_new
        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > options.beta_bound:
            j = int(np.nanargmax(np.abs(beta)))
            message = (
                f"coefficient of {data.names[j]!r} diverging ({beta[j]:.3g}); "
                "likely monotone likelihood / perfect separation"
            )
            break
        if np.max(np.abs(g)) < options.tol and np.max(np.abs(step)) < options.tol:
            converged = True
            break
    else:
        message = f"no convergence in {options.max_iter} iterations (max |score| {np.max(np.abs(g)):.3g})"

    info = -H
    try:
        cov_model = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov_model = np.full((p, p), np.nan)
    if converged:
        # standard error per covariate SD; huge values mean the likelihood is flat toward infinity
        spread = np.sqrt(np.abs(np.diag(cov_model))) * np.asarray(data.X, dtype=float).std(axis=0)
        flat = [data.names[j] for j in np.flatnonzero(spread > 100.0)]
        if flat:
            message = f"coefficient(s) of {', '.join(map(repr, flat))} may be infinite (information near zero)"
    U = prob.score_residuals(beta)
    if options.robust_cluster:
        S = np.zeros((int(data.subject.max()) + 1, p))
        np.add.at(S, data.subject, U)
    else:
        S = U
    cov_robust = cov_model @ (S.T @ S) @ cov_model
    cov_robust = 0.5 * (cov_robust + cov_robust.T)

    return ModelFit(
        names=tuple(data.names),
        beta=beta,
        cov_model=0.5 * (cov_model + cov_model.T),
        cov_robust=cov_robust,
        loglik=ll,
        loglik_null=ll_null,
        n_events=int(len(prob.cases)),
        n_subjects=int(len(np.unique(data.subject))),
        n_intervals=int(prob.n),
        iterations=it,
        converged=converged,
        ties=options.ties,
        message=message,
        options={"tol": options.tol, "max_iter": options.max_iter, "robust_cluster": options.robust_cluster},
    )


@dataclass(frozen=True)
class HazardRatio:
    name: str
    hr: float
    ci_model: tuple[float, float]
    ci_robust: tuple[float, float]


def _exp(x: float) -> float:
    return math.inf if x > 709.0 else math.exp(x)


def hazard_ratios(model: ModelFit, z: float = Z95) -> list[HazardRatio]:
    """``exp(beta)`` with normal-approximation CIs ``exp(beta +/- z se)``."""
    if not model.converged:
        raise ConvergenceError(f"refusing to report hazard ratios of a non-converged fit: {model.message}")
    out = []
    for j, name in enumerate(model.names):
        b = float(model.beta[j])
        cis = []
        for robust in (False, True):
            se = float(model.se(robust)[j])
            cis.append((_exp(b - z * se), _exp(b + z * se)))
        out.append(HazardRatio(name, _exp(b), cis[0], cis[1]))
    return out


def format_hr_table(rows: Sequence[HazardRatio]) -> str:
    width = max([len("covariate")] + [len(r.name) for r in rows])
    lines = [f"{'covariate':<{width}}  {'HR':>6}  {'95% CI (model)':>16}  {'95% CI (robust)':>16}"]
    for r in rows:
        lines.append(
            f"{r.name:<{width}}  {r.hr:6.2f}  "
            f"{f'({r.ci_model[0]:.2f}, {r.ci_model[1]:.2f})':>16}  "
            f"{f'({r.ci_robust[0]:.2f}, {r.ci_robust[1]:.2f})':>16}"
        )
    return "\n".join(lines)
