"""Kernel-smoothed hazard and mean-covariate curves by exposure stratum.

Hazards smooth Nelson-Aalen increments with an Epanechnikov kernel. Within
one bandwidth of either end of the data range the kernel is replaced by the
Müller-Wang boundary kernel

    K_q(u) = 12 / (1 + q)^4 * (1 + u) * ((1 - 2q) u + (3q^2 - 2q + 1) / 2),

supported on ``[-1, q]``, where ``q`` is the distance to the boundary in
bandwidth units. ``K_q`` integrates to one with zero first moment and
equals the Epanechnikov kernel at ``q = 1``.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .cohort import EXPOSURE, Cohort
from .errors import ValidationError
from .timescale import IntervalData, ScaleKind, TimeScale, resolve_ttd, to_scale

__all__ = [
    "CurveKind",
    "HazardCurve",
    "epanechnikov",
    "boundary_kernel",
    "nelson_aalen",
    "smoothed_hazard",
    "smoothed_mean",
    "covariate_observations",
    "write_curves_csv",
    "DEFAULT_BANDWIDTH_FRACTION",
    "DEFAULT_GRID_SIZE",
]

DEFAULT_BANDWIDTH_FRACTION = 0.15
DEFAULT_GRID_SIZE = 101


class CurveKind(str, enum.Enum):
    HAZARD = "hazard"
    MEAN_COVARIATE = "mean_covariate"


@dataclass
class HazardCurve:
    scale_kind: ScaleKind
    stratum: str
    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    kind: CurveKind = CurveKind.HAZARD
    lower: float = np.nan
    upper: float = np.nan
    n_clamped: int = 0

    def interior(self) -> np.ndarray:
        """Mask of grid points more than one bandwidth from both data boundaries."""
        return (self.grid - self.lower >= self.bandwidth) & (self.upper - self.grid >= self.bandwidth)


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def boundary_kernel(u, q: float):
    """Left-boundary Epanechnikov kernel for a point ``q`` bandwidths from the edge."""
    u = np.asarray(u, dtype=float)
    q = float(np.clip(q, 0.0, 1.0))
    k = 12.0 / (1.0 + q) ** 4 * (1.0 + u) * ((1.0 - 2.0 * q) * u + (3.0 * q * q - 2.0 * q + 1.0) / 2.0)
    return np.where((u >= -1.0) & (u <= q), k, 0.0)


def _kernel_matrix(grid, points, b, lower, upper):
    """Weights ``K(.)/b`` for every (grid, point) pair with boundary correction."""
    grid = np.asarray(grid, dtype=float)
    points = np.asarray(points, dtype=float)
    W = np.empty((len(grid), len(points)))
    for i, x in enumerate(grid):
        left, right = x - lower, upper - x
        if left < b and left <= right:
            W[i] = boundary_kernel((x - points) / b, left / b)
        elif right < b:
            W[i] = boundary_kernel((points - x) / b, right / b)
        else:
            W[i] = epanechnikov((x - points) / b)
    return W / b


def _stratum(data: IntervalData, stratum, column: str) -> IntervalData:
    if stratum is None:
        return data
    if column not in data.names:
        raise ValidationError(f"stratum column {column!r} not among {list(data.names)}")
    return data.rows(data.X[:, data.names.index(column)] == stratum)


def _grid(grid, lower, upper, what):
    if grid is None:
        return np.linspace(lower, upper, DEFAULT_GRID_SIZE)
    grid = np.sort(np.asarray(grid, dtype=float))
    inside = (grid >= lower) & (grid <= upper)
    if not inside.all():
        warnings.warn(f"{(~inside).sum()} grid point(s) outside the {what} data range were excluded", stacklevel=3)
    return grid[inside]


def nelson_aalen(data: IntervalData, stratum=None, column: str = EXPOSURE):
    """Distinct event times, event counts and numbers at risk.

    Returns
    -------
    times, events, at_risk : ndarray
        The Nelson-Aalen increment at ``times[k]`` is ``events[k] / at_risk[k]``.
    """
    data = _stratum(data, stratum, column)
    if data.n_events == 0:
        raise ValidationError("stratum has no events")
    times, events = np.unique(data.exit[data.event], return_counts=True)
    exits = np.sort(data.exit)
    entries = np.sort(data.entry)
    at_risk = (len(exits) - np.searchsorted(exits, times, side="left")) - (
        len(entries) - np.searchsorted(entries, times, side="left")
    )
    return times, events, at_risk


def smoothed_hazard(
    data: IntervalData,
    bandwidth: float | None = None,
    grid: Sequence[float] | None = None,
    stratum=None,
    column: str = EXPOSURE,
    scale_kind: ScaleKind = ScaleKind.TOS,
    label: str | None = None,
) -> HazardCurve:
    """Kernel-smoothed hazard ``sum_k K_b(s - e_k) d_k / Y(e_k)`` over one stratum.

    Parameters
    ----------
    data : IntervalData
        Risk intervals on the time-scale of interest.
    bandwidth : float, optional
        Defaults to 0.15 times the stratum's time range.
    grid : sequence of float, optional
        Evaluation points; defaults to 101 equally spaced points over the
        range. Points outside the range are dropped with a warning.
    stratum : float, optional
        Keep intervals whose ``column`` covariate equals this value.
    """
    sub = _stratum(data, stratum, column)
    if len(sub) == 0:
        raise ValidationError(f"stratum {stratum!r} is empty")
    times, events, at_risk = nelson_aalen(sub)
    lower, upper = float(sub.entry.min()), float(sub.exit.max())
    b = DEFAULT_BANDWIDTH_FRACTION * (upper - lower) if bandwidth is None else float(bandwidth)
    if not b > 0:
        raise ValidationError(f"bandwidth must be positive, got {b}")
    g = _grid(grid, lower, upper, "hazard")
    values = _kernel_matrix(g, times, b, lower, upper) @ (events / at_risk)
    negative = values < 0
    if negative.any():
        warnings.warn(f"{negative.sum()} negative boundary-kernel estimate(s) clamped to 0", stacklevel=2)
        values = np.where(negative, 0.0, values)
    return HazardCurve(
        ScaleKind(scale_kind),
        label if label is not None else ("all" if stratum is None else f"{column}={stratum:g}"),
        g,
        values,
        b,
        CurveKind.HAZARD,
        lower,
        upper,
        int(negative.sum()),
    )


def smoothed_mean(
    times: Sequence[float],
    values: Sequence[float],
    bandwidth: float | None = None,
    grid: Sequence[float] | None = None,
    scale_kind: ScaleKind = ScaleKind.TOS,
    label: str = "all",
    bounds: tuple[float, float] | None = None,
) -> HazardCurve:
    """Nadaraya-Watson regression of a covariate on time, with the same kernels.

    ``times`` and ``values`` are the covariate observations of one stratum on
    the chosen time-scale (see :func:`covariate_observations`).
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size == 0:
        raise ValidationError(f"stratum {label!r} has no covariate observations")
    if t.shape != v.shape:
        raise ValidationError("times and values differ in length")
    lower, upper = bounds if bounds is not None else (float(t.min()), float(t.max()))
    b = DEFAULT_BANDWIDTH_FRACTION * (upper - lower) if bandwidth is None else float(bandwidth)
    if not b > 0:
        raise ValidationError(f"bandwidth must be positive, got {b}")
    g = _grid(grid, lower, upper, "covariate")
    W = _kernel_matrix(g, t, b, lower, upper)
    denom = W.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        est = (W @ v) / denom
    est[denom == 0] = np.nan
    return HazardCurve(ScaleKind(scale_kind), label, g, est, b, CurveKind.MEAN_COVARIATE, lower, upper)


def covariate_observations(
    cohort: Cohort,
    name: str,
    scale: TimeScale,
    ttd: Mapping[str, float] | None = None,
):
    """Observed measurements of ``name`` placed on ``scale``.

    Returns
    -------
    times, values, exposed : ndarray
        ``exposed`` is the exposure status at the measurement time.
    """
    if name not in cohort.tv_names:
        raise ValidationError(f"{name!r} is not a time-varying covariate")
    if scale.kind is ScaleKind.RTTD:
        ttd = resolve_ttd(cohort) if ttd is None else ttd
        scale = scale.resolved(ttd)
    out_t, out_v, out_e = [], [], []
    for s in cohort:
        subject_ttd = ttd[s.subject_id] if scale.kind is ScaleKind.RTTD else s.followup_end
        for t, v in s.tv_covariates.get(name, ()):
            if v is None:
                continue
            out_t.append(to_scale(t, subject_ttd, scale))
            out_v.append(v)
            out_e.append(s.exposure_start is not None and s.exposure_start <= t)
    return np.array(out_t), np.array(out_v), np.array(out_e, dtype=bool)


def write_curves_csv(curves: Sequence[HazardCurve], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scale", "stratum", "time", "value", "bandwidth", "kind"])
        for c in curves:
            for x, y in zip(c.grid, c.values):
                w.writerow([c.scale_kind.value, c.stratum, repr(float(x)), repr(float(y)), repr(c.bandwidth), c.kind.value])
