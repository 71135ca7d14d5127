"""Command-line front end.

Every command writes its artifacts plus a ``run.json`` manifest into
``--out``. Outputs are staged in a temporary directory and only moved into
place on success. Exit codes: 0 success, 2 validation error, 3 numerical
failure, 4 I/O error; failures print a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
import warnings
from pathlib import Path

from . import __version__
from .bj import (
    BjProblem,
    BjScale,
    GuardStatus,
    bj_fit,
    censoring_guard,
    read_imputations,
    write_imputations,
)
from .cohort import COHORT_FILES, EXPOSURE, Cohort, load_cohort_dir, save_cohort
from .coxag import FitOptions, ModelFit, Ties, fit, format_hr_table, hazard_ratios
from .errors import ConvergenceError, RttdError, ValidationError
from .inference import BootstrapPlan, CiMethod, ModelSpec, bootstrap_hr_difference
from .sim import calibrate_paper_scenario, simulate_cohort
from .smooth import covariate_observations, smoothed_hazard, smoothed_mean, write_curves_csv
from .timescale import (
    IncidenceTable,
    ScaleKind,
    TimeScale,
    expand_data,
    person_time_table,
    resolve_ttd,
    write_intervals_csv,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _covariates(text: str) -> tuple[str, ...]:
    names = tuple(c.strip() for c in text.split(",") if c.strip())
    if not names:
        raise argparse.ArgumentTypeError("empty covariate list")
    return names


def _dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


class _Run:
    """Per-invocation state: inputs read, manifest extras and the staging directory."""

    def __init__(self, args, staging: Path):
        self.args = args
        self.staging = staging
        self.inputs: dict[str, str] = {}
        self.extra: dict = {}
        self.messages: list[str] = []

    def track(self, path) -> Path:
        path = Path(path)
        self.inputs[str(path)] = _sha256(path)
        return path

    def cohort(self) -> Cohort:
        d = Path(self.args.cohort)
        for name in COHORT_FILES.values():
            self.track(d / name)
        cohort = load_cohort_dir(d)
        self.extra["cohort_schema"] = {"time_constant": list(cohort.tc_names), "time_varying": list(cohort.tv_names)}
        return cohort

    def sample(self):
        """Cohort restricted per ``--decedents-only``, plus TTD map when the scale needs it."""
        cohort = self.cohort()
        if getattr(self.args, "decedents_only", False):
            cohort = cohort.decedents()
        self.extra["sample"] = "decedents" if getattr(self.args, "decedents_only", False) else "full"
        self.extra["n_subjects"] = len(cohort)
        ttd = None
        if getattr(self.args, "imputed", None):
            imputed = read_imputations(self.track(self.args.imputed))
            ttd = resolve_ttd(cohort, imputed)
        return cohort, ttd

    def warn(self, message: str) -> None:
        self.messages.append(message)
        print(f"warning: {message}", file=sys.stderr)


def _scale(args) -> TimeScale:
    kind = ScaleKind(args.timescale)
    if kind is ScaleKind.TOS:
        return TimeScale.tos()
    return TimeScale.rttd(getattr(args, "ttd_max", None))


def _ttd_for(cohort: Cohort, ttd, kind: ScaleKind):
    if kind is ScaleKind.RTTD and ttd is None:
        ttd = resolve_ttd(cohort)
    return ttd


# --- commands ----------------------------------------------------------------


def cmd_simulate(run: _Run) -> None:
    a = run.args
    config = calibrate_paper_scenario(n_subjects=a.n, seed=a.seed, true_beta=a.true_beta)
    cohort, truth = simulate_cohort(config)
    save_cohort(cohort, run.staging)
    truth.write(run.staging / "truth.json")
    run.extra.update(n_subjects=len(cohort), n_deceased=cohort.n_deceased, n_events=cohort.n_events)


def cmd_bj(run: _Run) -> None:
    a = run.args
    cohort = run.cohort()
    problem = BjProblem.from_cohort(cohort, a.covariates, BjScale(a.scale))
    status = censoring_guard(problem, override=a.allow_high_censoring)
    frac = problem.censoring_fraction
    if status is GuardStatus.REFUSE:
        raise ValidationError(
            f"censoring fraction {frac:.3f} exceeds 0.40; pass --allow-high-censoring to proceed anyway"
        )
    if status is GuardStatus.WARN:
        run.warn(f"censoring fraction {frac:.3f} is at or above 0.20; imputed times may be unreliable")
    result = bj_fit(problem, tol=a.tol, max_iter=a.max_iter)
    write_imputations(result.imputed, run.staging / "imputations.csv")
    _dump({**result.to_dict(), "guard": status.value}, run.staging / "bj.json")
    run.extra["bj_status"] = result.status.value


def _expand(run: _Run):
    a = run.args
    cohort, ttd = run.sample()
    scale = _scale(a)
    ttd = _ttd_for(cohort, ttd, scale.kind)
    data = expand_data(cohort, scale, a.covariates, ttd)
    run.extra.update(timescale=scale.kind.value, covariates=list(a.covariates))
    if ttd is not None:
        run.extra["ttd_max"] = scale.resolved(ttd).ttd_max
    return cohort, ttd, data


def cmd_expand(run: _Run) -> None:
    _, _, data = _expand(run)
    write_intervals_csv(data, run.staging / "intervals.csv")
    run.extra["n_intervals"] = len(data)


def cmd_fit(run: _Run) -> None:
    a = run.args
    _, _, data = _expand(run)
    model = fit(data, FitOptions(ties=Ties(a.ties), max_iter=a.max_iter, tol=a.tol))
    _dump(model.to_dict(), run.staging / "fit.json")
    run.extra.update(ties=a.ties, converged=model.converged)
    if not model.converged:
        if a.strict:
            raise ConvergenceError(f"fit did not converge: {model.message}")
        # the fit JSON still records the last iterate; no HR table for a non-converged fit
        run.warn(f"fit did not converge: {model.message}")
        return
    table = format_hr_table(hazard_ratios(model))
    (run.staging / "hr_table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)


def cmd_rates(run: _Run) -> None:
    cohort, _ = run.sample()
    table = person_time_table(cohort)
    rows = table.rows()
    with open(run.staging / "rates.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["cell", "events", "person_years", "rate"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "rate": "" if r["rate"] is None else r["rate"]})
    _dump({"n_subjects": table.n_subjects, "cells": rows}, run.staging / "rates.json")
    for r in rows:
        rate = "undefined" if r["rate"] is None else f"{r['rate']:.2f}"
        print(f"{r['cell']:<16} {rate:>9}  ({r['events']}/{r['person_years']:.1f})")


def cmd_hazard(run: _Run) -> None:
    a = run.args
    cohort, ttd, data = _expand(run)
    kind = ScaleKind(a.timescale)
    if EXPOSURE not in data.names:
        raise ValidationError("hazard curves are stratified by exposure; include 'exposure' in --covariates")
    curves = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for value, label in ((0.0, "unexposed"), (1.0, "exposed")):
            try:
                curves.append(
                    smoothed_hazard(data, a.bandwidth, None, stratum=value, scale_kind=kind, label=label)
                )
            except ValidationError as exc:
                run.warn(f"{label}: {exc}")
        if a.mean_covariate:
            t, v, exposed = covariate_observations(cohort, a.mean_covariate, _scale(a), ttd)
            for flag, label in ((False, "unexposed"), (True, "exposed")):
                if (exposed == flag).any():
                    curves.append(
                        smoothed_mean(t[exposed == flag], v[exposed == flag], a.bandwidth, None, kind, label)
                    )
    for w in caught:
        run.warn(str(w.message))
    if not curves:
        raise ValidationError("no stratum had events")
    write_curves_csv(curves, run.staging / "curves.csv")


def cmd_bootstrap(run: _Run) -> None:
    a = run.args
    cohort, ttd = run.sample()
    ties = Ties(a.ties)
    plan = BootstrapPlan(
        ModelSpec.parse(a.spec_a, ties),
        ModelSpec.parse(a.spec_b, ties),
        n_reps=a.reps,
        seed=a.seed,
        ci_method=CiMethod(a.ci),
        covariate=a.covariate,
    )
    if ttd is None and any(s.timescale is ScaleKind.RTTD for s in (plan.spec_a, plan.spec_b)):
        ttd = resolve_ttd(cohort)
    result = bootstrap_hr_difference(cohort, plan, ttd, n_jobs=a.jobs)
    _dump(result.to_dict(), run.staging / "bootstrap.json")
    if a.dump_replicates:
        result.write_replicates_csv(run.staging / "replicates.csv")
    if result.unreliable:
        run.warn(f"{result.n_failed} of {plan.n_reps} replicates failed; result flagged unreliable")
    print(
        f"HR({plan.spec_a.label}) - HR({plan.spec_b.label}) = {result.point_estimate:.2f} "
        f"(95% CI {result.ci_low:.2f} to {result.ci_high:.2f}; {result.n_failed} failed)"
    )


def _adjustment(covariates) -> str:
    others = [c for c in covariates if c != EXPOSURE]
    return "+".join(others) if others else "none"


def reproduce_report(run_dirs, covariate: str = EXPOSURE) -> dict:
    """Collect fit runs into a hazard-ratio grid and rates runs into an incidence grid."""
    hr_rows, incidence_rows = [], []
    schema = None
    for d in run_dirs:
        d = Path(d)
        manifest = json.loads((d / "run.json").read_text(encoding="utf-8"))
        this_schema = manifest.get("cohort_schema")
        if this_schema is not None:
            if schema is not None and this_schema != schema:
                raise ValidationError(f"run {d} has covariate schema {this_schema}, expected {schema}")
            schema = this_schema
        command = manifest["command"]
        if command == "fit":
            model = ModelFit.from_dict(json.loads((d / "fit.json").read_text(encoding="utf-8")))
            rows = {r.name: r for r in hazard_ratios(model)}
            if covariate not in rows:
                raise ValidationError(f"run {d} has no {covariate!r} coefficient")
            r = rows[covariate]
            hr_rows.append(
                {
                    "run": str(d),
                    "sample": manifest["sample"],
                    "timescale": manifest["timescale"],
                    "adjustment": _adjustment(model.names),
                    "hr": r.hr,
                    "ci_low": r.ci_robust[0],
                    "ci_high": r.ci_robust[1],
                }
            )
        elif command == "rates":
            cells = json.loads((d / "rates.json").read_text(encoding="utf-8"))["cells"]
            row = {"run": str(d), "sample": manifest["sample"]}
            for c in cells:
                row[c["cell"]] = c["rate"]
                row[f"{c['cell']}_events"] = c["events"]
                row[f"{c['cell']}_person_years"] = c["person_years"]
            incidence_rows.append(row)
        else:
            raise ValidationError(f"run {d} is a {command!r} run; report takes fit and rates runs")
    return {"hazard_ratios": hr_rows, "incidence": incidence_rows}


def _report_text(report) -> str:
    lines = []
    if report["hazard_ratios"]:
        lines.append("Hazard ratios of exposure (robust 95% CI)")
        lines.append(f"{'sample':<10} {'time-scale':<10} {'adjustment':<24} {'HR':>6}  95% CI")
        for r in report["hazard_ratios"]:
            lines.append(
                f"{r['sample']:<10} {r['timescale']:<10} {r['adjustment']:<24} {r['hr']:6.2f}  "
                f"({r['ci_low']:.2f}, {r['ci_high']:.2f})"
            )
    if report["incidence"]:
        if lines:
            lines.append("")
        lines.append("Incidence rates (events / person-years)")
        for r in report["incidence"]:
            parts = []
            for cell in IncidenceTable.CELLS:
                rate = r[cell]
                shown = "undefined" if rate is None else f"{rate:.2f}"
                parts.append(f"{cell}={shown} ({r[cell + '_events']}/{r[cell + '_person_years']:.1f})")
            lines.append(f"{r['sample']:<10} " + "  ".join(parts))
    return "\n".join(lines)


def cmd_report(run: _Run) -> None:
    for d in run.args.runs:
        run.track(Path(d) / "run.json")
    report = reproduce_report(run.args.runs, run.args.covariate)
    if report["hazard_ratios"]:
        with open(run.staging / "hr_grid.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, list(report["hazard_ratios"][0]), lineterminator="\n")
            w.writeheader()
            w.writerows(report["hazard_ratios"])
    if report["incidence"]:
        with open(run.staging / "incidence_grid.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, list(report["incidence"][0]), lineterminator="\n")
            w.writeheader()
            w.writerows(report["incidence"])
    text = _report_text(report)
    (run.staging / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


COMMANDS = {
    "simulate": cmd_simulate,
    "bj": cmd_bj,
    "expand": cmd_expand,
    "fit": cmd_fit,
    "rates": cmd_rates,
    "hazard": cmd_hazard,
    "bootstrap": cmd_bootstrap,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rttd", description="Time-to-event analysis on time-on-study or reverse time-to-death.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sample=True, scale=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--cohort", required=True, help="directory with subjects/events/exposures/covariates CSVs")
        if sample:
            p.add_argument("--decedents-only", action="store_true", help="restrict to subjects who died")
            p.add_argument("--imputed", help="imputations CSV from the bj command (subject_id, imputed_ttd_years)")
        if scale:
            p.add_argument("--timescale", choices=[k.value for k in ScaleKind], default="tos")
            p.add_argument("--ttd-max", type=float, help="explicit rTTD origin (default: largest TTD in the sample)")
            p.add_argument("--covariates", type=_covariates, default=(EXPOSURE,), help="comma-separated; 'exposure' is the exposure indicator")

    p = sub.add_parser("simulate", help="simulate a cohort from the calibrated confounding scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=1000, help="number of subjects")
    p.add_argument("--true-beta", type=float, default=0.0, help="true log hazard ratio of exposure")

    p = sub.add_parser("bj", help="Buckley-James imputation of survival times for censored subjects")
    common(p, sample=False, scale=False)
    p.add_argument("--covariates", type=_covariates, default=None, help="design covariates (default: whole schema, baseline values)")
    p.add_argument("--scale", choices=[s.value for s in BjScale], default="identity")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--allow-high-censoring", action="store_true", help="proceed when more than 40%% are censored")

    p = sub.add_parser("expand", help="write counting-process intervals")
    common(p)

    p = sub.add_parser("fit", help="fit an Andersen-Gill model")
    common(p)
    p.add_argument("--ties", choices=[t.value for t in Ties], default="breslow")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--strict", action="store_true", help="exit with status 3 when the fit does not converge")

    p = sub.add_parser("rates", help="incidence rates by exposure history")
    common(p, scale=False)

    p = sub.add_parser("hazard", help="smoothed hazard curves by exposure stratum")
    common(p)
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--mean-covariate", default=None, help="also smooth this time-varying covariate")

    p = sub.add_parser("bootstrap", help="cluster bootstrap CI for a difference in hazard ratios")
    common(p, scale=False)
    p.add_argument("--spec-a", required=True, help="e.g. tos:exposure")
    p.add_argument("--spec-b", required=True, help="e.g. tos:exposure,age,female,pwb")
    p.add_argument("--covariate", default=EXPOSURE)
    p.add_argument("--ties", choices=[t.value for t in Ties], default="breslow")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ci", choices=[c.value for c in CiMethod], default="percentile")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dump-replicates", action="store_true")

    p = sub.add_parser("report", help="consolidate fit and rates runs into report tables")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--covariate", default=EXPOSURE)
    return parser


def _error(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code}}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    argv = list(sys.argv[1:] if argv is None else argv)
    out = Path(args.out)
    start = time.perf_counter()
    created = not out.exists()
    try:
        out.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    except OSError as exc:
        return _error(exc, EXIT_IO)
    run = _Run(args, staging)
    try:
        COMMANDS[args.command](run)
        outputs = sorted(p.name for p in staging.iterdir())
        manifest = {
            "tool": "rttd",
            "tool_version": __version__,
            "command": args.command,
            "argv": argv,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()},
            "inputs": run.inputs,
            "outputs": outputs,
            "warnings": run.messages,
            **run.extra,
            "wall_time_seconds": time.perf_counter() - start,
        }
        _dump(manifest, staging / "run.json")
        for name in outputs + ["run.json"]:
            os.replace(staging / name, out / name)
        return EXIT_OK
    except RttdError as exc:
        code = _error(exc, exc.exit_code)
    except OSError as exc:
        code = _error(exc, EXIT_IO)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    if created:
        shutil.rmtree(out, ignore_errors=True)
    return code


def verify_inputs(run_dir) -> list[str]:
    """Input paths of a run whose current checksum differs from its manifest."""
    manifest = json.loads((Path(run_dir) / "run.json").read_text(encoding="utf-8"))
    bad = []
    for path, digest in manifest["inputs"].items():
        if not Path(path).exists() or _sha256(path) != digest:
            bad.append(path)
    return bad


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
