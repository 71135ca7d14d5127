from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rttd.cohort import Cohort
from rttd.coxag import ModelFit, Ties, fit
from rttd.errors import NumericalError, ValidationError
from rttd.inference import (
    BootstrapPlan,
    BootstrapResult,
    CiMethod,
    ModelSpec,
    bootstrap_hr_difference,
    change_in_estimate,
    percentile_ci,
    resample_subjects,
)
from rttd.sim import calibrate_paper_scenario, simulate_cohort
from rttd.timescale import ScaleKind, TimeScale, expand_data

from conftest import simple_subject


@pytest.fixture(scope="module")
def small_cohort():
    cohort, _ = simulate_cohort(calibrate_paper_scenario(n_subjects=150, seed=21))
    return cohort.decedents()


def _plan(a="tos:exposure", b="tos:exposure,age,pwb", **kw):
    kw.setdefault("n_reps", 30)
    kw.setdefault("seed", 3)
    return BootstrapPlan(ModelSpec.parse(a), ModelSpec.parse(b), **kw)


def test_identical_specs_give_zero_interval(small_cohort):
    res = bootstrap_hr_difference(small_cohort, _plan(b="tos:exposure"))
    assert np.all(res.replicates == 0.0)
    assert (res.ci_low, res.ci_high) == (0.0, 0.0)
    assert res.point_estimate == 0.0


def test_seed_determinism_and_thread_invariance(small_cohort):
    a = bootstrap_hr_difference(small_cohort, _plan())
    b = bootstrap_hr_difference(small_cohort, _plan())
    c = bootstrap_hr_difference(small_cohort, _plan(), n_jobs=4)
    d = bootstrap_hr_difference(small_cohort, _plan(seed=4))
    assert a.replicates.tobytes() == b.replicates.tobytes() == c.replicates.tobytes()
    assert a.to_dict() == c.to_dict()
    assert not np.array_equal(a.replicates, d.replicates)


def test_replicate_prefix_stable_when_adding_replicates(small_cohort):
    short = bootstrap_hr_difference(small_cohort, _plan(n_reps=10))
    long = bootstrap_hr_difference(small_cohort, _plan(n_reps=30))
    assert np.array_equal(short.replicates, long.replicates[:10])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=300), st.sampled_from([0.8, 0.9, 0.95]))
def test_percentile_ci_is_order_statistic(values, level):
    lo, hi = percentile_ci(values, level)
    v = sorted(values)
    R = len(v)
    a = (1 - level) / 2
    # ranks by integer arithmetic to avoid float rounding in the oracle
    pct = round(a * 1000)
    rlo = max(1, -(-pct * R // 1000))
    rhi = min(R, -(-(1000 - pct) * R // 1000))
    assert (lo, hi) == (v[rlo - 1], v[rhi - 1])


def test_percentile_ci_ranks_for_1000():
    v = np.arange(1000.0)
    np.random.default_rng(0).shuffle(v)
    assert percentile_ci(v) == (24.0, 974.0)
    with pytest.raises(ValidationError):
        percentile_ci([])


def _fake(hr, names=("exposure", "age")):
    beta = np.array([math.log(hr)] + [0.0] * (len(names) - 1))
    cov = np.eye(len(names)) * 0.01
    return ModelFit(tuple(names), beta, cov, cov, 0.0, 0.0, 1, 1, 1, 1, True)


def test_change_in_estimate():
    assert change_in_estimate(_fake(2.34), _fake(2.72, ("exposure",))) == pytest.approx(0.38)
    assert change_in_estimate(_fake(1.8), _fake(1.8)) == 0.0
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = np.exp(rng.normal(0, 1, 2))
        assert change_in_estimate(_fake(a), _fake(b)) == pytest.approx(b - a, rel=1e-12)
    with pytest.raises(ValidationError):
        change_in_estimate(_fake(2.0, ("age", "x")), _fake(2.0))
    bad = _fake(2.0)
    bad.converged = False
    with pytest.raises(NumericalError):
        change_in_estimate(bad, _fake(2.0))


def test_resampled_events_match_drawn_subjects(small_cohort):
    data = expand_data(small_cohort, TimeScale.tos(), ("exposure", "pwb"))
    per_subject = np.bincount(data.subject, weights=data.event, minlength=len(small_cohort))
    rng = np.random.default_rng(2)
    for _ in range(10):
        draw = rng.integers(0, len(small_cohort), len(small_cohort))
        rep = resample_subjects(data, draw)
        assert rep.n_events == per_subject[draw].sum()
        assert rep.n_subjects == len(draw)
        # copies of the same subject are separate clusters with identical rows
        k = int(draw[0])
        first = rep.rows(rep.subject == 0)
        orig = data.rows(data.subject == k)
        assert np.array_equal(first.entry, orig.entry) and np.array_equal(first.X, orig.X)


def test_plan_and_spec_validation():
    assert ModelSpec.parse("RTTD:exposure, age").covariates == ("exposure", "age")
    assert ModelSpec.parse("tos").covariates == ("exposure",)
    assert ModelSpec.parse("rttd:exposure").timescale is ScaleKind.RTTD
    with pytest.raises(ValidationError):
        ModelSpec.parse("weeks:exposure")
    with pytest.raises(ValidationError):
        _plan(n_reps=0)
    with pytest.raises(ValidationError, match="not in model"):
        _plan(b="tos:age")
    with pytest.raises(ValidationError):
        _plan(resample_unit="interval")


def test_full_cohort_failure_raises_before_resampling():
    subjects = tuple(simple_subject(str(i), 4.0, events=(1.0,), exposure=0.5 if i < 3 else None) for i in range(6))
    cohort = Cohort(subjects)
    # all events at the same time, exposed and unexposed alike: fine
    bootstrap_hr_difference(cohort, _plan(b="tos:exposure", n_reps=2))
    # exposed subjects carry every event: monotone likelihood
    subjects = tuple(simple_subject(str(i), 4.0, events=(1.0 + i,) if i < 3 else (), exposure=0.5 if i < 3 else None) for i in range(6))
    with pytest.raises(NumericalError, match="did not converge"):
        bootstrap_hr_difference(Cohort(subjects), _plan(b="tos:exposure", n_reps=2))


def test_unreliable_flag_and_normal_ci():
    plan = _plan(n_reps=40)
    reps = np.linspace(-1, 1, 40)
    ok = BootstrapResult(plan, 0.1, reps, -1, 1, 2)
    assert not ok.unreliable
    reps_bad = reps.copy()
    reps_bad[:3] = np.nan
    bad = BootstrapResult(plan, 0.1, reps_bad, -1, 1, 3)
    assert bad.unreliable
    assert bad.to_dict()["replicates"]["n_successful"] == 37


def test_failed_replicates_counted():
    # a tiny cohort where some resamples contain no exposed person-time
    subjects = [simple_subject(str(i), 3.0, events=(0.5 + 0.1 * i, 2.0 + 0.05 * i), exposure=1.0 if i % 4 == 0 else None) for i in range(8)]
    res = bootstrap_hr_difference(Cohort(tuple(subjects)), _plan(b="tos:exposure", n_reps=60, seed=1))
    assert res.n_failed == int(np.sum(~np.isfinite(res.replicates))) > 0
    assert len(res.failures) == res.n_failed
    assert res.unreliable


def test_normal_method(small_cohort):
    res = bootstrap_hr_difference(small_cohort, _plan(ci_method=CiMethod.NORMAL))
    sd = res.successful.std(ddof=1)
    assert res.ci_high - res.point_estimate == pytest.approx(1.959963984540054 * sd, rel=1e-12)
    assert res.point_estimate - res.ci_low == pytest.approx(1.959963984540054 * sd, rel=1e-12)


def test_replicates_csv(tmp_path, small_cohort):
    res = bootstrap_hr_difference(small_cohort, _plan(n_reps=5))
    res.write_replicates_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "replicate,difference" and len(lines) == 6
    assert float(lines[3].split(",")[1]) == res.replicates[2]


def test_efron_spec_runs(small_cohort):
    plan = BootstrapPlan(ModelSpec.parse("tos:exposure", Ties.EFRON), ModelSpec.parse("tos:exposure,age"), n_reps=3, seed=1)
    assert bootstrap_hr_difference(small_cohort, plan).plan.spec_a.ties is Ties.EFRON


@pytest.mark.slow
def test_tos_interval_excludes_zero_rttd_includes_zero():
    cohort, _ = simulate_cohort(calibrate_paper_scenario(n_subjects=800, seed=31))
    dec = cohort.decedents()
    adj = "exposure,age,female,pwb"
    tos = bootstrap_hr_difference(dec, _plan("tos:exposure", f"tos:{adj}", n_reps=100, seed=5), n_jobs=4)
    rttd = bootstrap_hr_difference(dec, _plan("rttd:exposure", f"rttd:{adj}", n_reps=100, seed=5), n_jobs=4)
    assert tos.ci_low > 0
    assert rttd.ci_low <= 0 <= rttd.ci_high
    assert fit(expand_data(dec, TimeScale.tos())).hr("exposure") == pytest.approx(tos.hr_a)
