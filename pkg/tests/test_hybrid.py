import dataclasses
import math

import numpy as np
import pytest

from conftest import noise_free_assessor, noise_free_config
from stockhybrid import hybrid
from stockhybrid.assessor import (AssessmentCache, AssessorConfig, InsufficientDataError, fit,
                                  parameter_estimate)
from stockhybrid.core import FeatureVector, ParameterKind
from stockhybrid.gbt import GbtHyperParams
from stockhybrid.hybrid import (Correction, FeatureVariant, LabelPolicy, Provenance, Task, TaskSpec,
                                TrainingTuple, UndefinedVarianceError, audit_leakage, backtest,
                                build_dataset, evaluation_years, fit_corrector, apply_corrector,
                                fit_models, make_labels, r_squared, rmse, run_task, task_specs)
from stockhybrid.simulator import default_config, simulate

K = 6


@pytest.fixture(scope="module")
def stock():
    cfg = default_config(31, environment=True, n_years=24)
    truth, obs, bio = simulate(cfg)
    cache = AssessmentCache()
    models = fit_models(obs, bio, AssessorConfig(), cache)
    return truth, obs, bio, cache, models


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5))
    assert rmse([5.0, 1.0, 2.0], [1.0, 1.0, 9.0]) == rmse([2.0, 5.0, 1.0], [9.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        rmse([], [])


def test_r_squared_examples():
    assert r_squared([1.0, 3.0], [1.0, 3.0]) == 1.0
    assert r_squared([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) == 0.0
    assert r_squared([2.0, 4.0], [1.0, 3.0]) == 0.0
    with pytest.raises(UndefinedVarianceError):
        r_squared([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        r_squared([1.0], [1.0])


def test_task_spec_rules():
    with pytest.raises(ValueError):
        TaskSpec("estimation", "recruitment", "ssb_only")
    with pytest.raises(ValueError):
        TaskSpec("forecast", "ssb", "abundance_plus_obs")
    rec = TaskSpec("forecast", "recruitment")
    assert rec.feature_variant is FeatureVariant.ABUNDANCE_PLUS_OBS and rec.correction is Correction.LOG_RATIO
    assert TaskSpec("forecast", "ssb").correction is Correction.RESIDUAL
    assert [s.feature_variant for s in task_specs("forecast", "ssb")] == [FeatureVariant.SSB_PLUS_OBS,
                                                                          FeatureVariant.SSB_ONLY]
    assert rec.horizon == 1 and TaskSpec("estimation", "ssb").horizon == 0
    assert rec.name == "forecast/recruitment/abundance_plus_obs"


def test_evaluation_years_count():
    assert len(evaluation_years(TaskSpec("forecast", "ssb"), 2020, 17)) == 18
    assert evaluation_years(TaskSpec("estimation", "ssb"), 2020, 5) == list(range(2015, 2021))
    assert evaluation_years(TaskSpec("forecast", "ssb"), 2020, 5) == list(range(2014, 2020))


def test_final_model_labels_come_from_last_model(stock):
    _, obs, bio, _, models = stock
    labels = make_labels(models, bio, "ssb")
    final = models[obs.last_year]
    assert labels.years == list(range(obs.first_year, obs.last_year + 1))
    for y in labels.years:
        assert labels[y] == parameter_estimate(final, y, "ssb")


def test_noise_free_labels_match_truth():
    cfg = noise_free_config(4, n_years=20)
    truth, obs, bio = simulate(cfg)
    model = fit(obs, bio, noise_free_assessor(obs, bio))
    for kind, series in (("ssb", truth.ssb), ("recruitment", truth.recruitment)):
        labels = make_labels({obs.last_year: model}, bio, kind)
        for y in labels.years:
            assert labels[y] == pytest.approx(series[y], rel=1e-3)


def test_labels_stable_when_one_year_is_added(stock):
    _, obs, bio, _, models = stock
    t = obs.last_year
    for kind in ("ssb", "recruitment"):
        new = make_labels(models, bio, kind, t)
        old = make_labels(models, bio, kind, t - 1)
        for y in range(obs.first_year, t - 4):
            assert abs(old[y] / new[y] - 1) < 0.05


def test_estimation_dataset_counts_and_provenance(stock):
    _, obs, bio, _, models = stock
    spec = TaskSpec("estimation", "recruitment")
    labels = make_labels(models, bio, spec.target)
    t = obs.last_year - 2
    ds = build_dataset(spec, models, obs, bio, labels, t)
    assert len(ds.train) <= t - obs.first_year
    assert [tt.year for tt in ds.train] == [y for y in sorted(models) if y < t]
    for tt in ds.train + (ds.test,):
        assert all(m <= tt.year and o <= tt.year for _, m, o in tt.provenance.features)
        assert tt.target_year == tt.year
    names = ds.test.features.names
    assert names[:8] == tuple(f"N_a{a}" for a in range(1, 9))
    assert "survey_Q1_a1" in names and "catch_a8" in names
    assert ds.test.baseline == ds.test.features["N_a1"]


def test_forecast_test_tuple_uses_step_model_and_observations(stock):
    _, obs, bio, _, models = stock
    spec = TaskSpec("forecast", "ssb", "ssb_plus_obs")
    t = obs.last_year - 1
    ds = build_dataset(spec, models, obs, bio, make_labels(models, bio, "ssb"), t)
    assert ds.test.target_year == t + 1
    assert {(m, o) for _, m, o in ds.test.provenance.features} == {(t, t)}
    assert ds.test.features["SSB_hat"] == parameter_estimate(models[t], t + 1, "ssb")
    np.testing.assert_array_equal([ds.test.features[f"catch_a{a}"] for a in range(1, 9)],
                                  obs.fleet("catch").values[t - obs.first_year])
    assert all(tt.target_year <= t for tt in ds.train)
    only = build_dataset(TaskSpec("forecast", "ssb", "ssb_only"), models, obs, bio,
                         make_labels(models, bio, "ssb"), t)
    assert only.test.features.names == ("SSB_hat",)


def test_insufficient_training_tuples(stock):
    _, obs, bio, _, models = stock
    spec = TaskSpec("estimation", "ssb")
    first = min(models)
    with pytest.raises(InsufficientDataError):
        build_dataset(spec, models, obs, bio, make_labels(models, bio, "ssb"), first + 3)


def _tuples(baselines, labels):
    out = []
    for i, (b, y) in enumerate(zip(baselines, labels)):
        fv = FeatureVector(("SSB_hat",), [b])
        out.append(TrainingTuple(2000 + i, fv, b, y, Provenance((("SSB_hat", 2000 + i, 2000 + i),),
                                                                 2000 + i, 2010)))
    return out


def test_perfect_assessor_data_decays_geometrically():
    base = [100.0, 300.0] * 3
    train = _tuples(base, base)
    direct = TaskSpec("estimation", "ssb", "ssb_only", correction="direct")
    e = fit_corrector(direct, train)
    mean = float(np.mean(base))
    for tt in train:
        rel = abs(apply_corrector(direct, e, tt) - tt.baseline) / abs(tt.baseline - mean)
        assert rel == pytest.approx(0.9 ** 60, rel=1e-9)
    residual = TaskSpec("estimation", "ssb", "ssb_only", correction="residual")
    e = fit_corrector(residual, train)
    assert all(apply_corrector(residual, e, tt) == tt.baseline for tt in train)
    log_ratio = TaskSpec("estimation", "ssb", "ssb_only", correction="log_ratio")
    e = fit_corrector(log_ratio, train)
    assert all(apply_corrector(log_ratio, e, tt) == tt.baseline for tt in train)


def test_constant_labels_give_that_constant():
    train = _tuples([10.0, 20.0, 30.0, 40.0, 50.0, 60.0], [7.0] * 6)
    spec = TaskSpec("estimation", "ssb", "ssb_only", correction="direct")
    e = fit_corrector(spec, train)
    probe = _tuples([35.0, 1e6], [0.0, 0.0])
    assert all(apply_corrector(spec, e, tt) == pytest.approx(7.0, abs=1e-12) for tt in probe)


def test_run_task_with_labels_equal_to_baseline(stock):
    _, obs, bio, _, models = stock
    spec = TaskSpec("forecast", "ssb", "ssb_only", correction="residual")
    t = obs.last_year - 1
    # labels that equal each tuple's own baseline: the perfect-assessor case
    values = {i + 1: parameter_estimate(models[i], i + 1, "ssb") for i in models if i < obs.last_year}
    labels = hybrid.StockParameterSeries(ParameterKind.SSB, values)
    res = run_task(spec, models, obs, bio, t, labels=labels)
    assert res.hybrid == res.baseline


def test_backtest_rows_aggregates_and_baseline(stock):
    truth, obs, bio, cache, models = stock
    spec = TaskSpec("forecast", "recruitment")
    fits = cache.fits
    rep = backtest(spec, obs, bio, k=K, cache=cache, truth=truth.recruitment)
    assert cache.fits == fits  # every model came from the cache
    assert len(rep.rows) + len(rep.skipped) == K + 1
    assert all(m.converged for m in models.values()) and len(rep.rows) == K + 1
    hyb = [r.hybrid for r in rep.rows]
    base = [r.baseline for r in rep.rows]
    lab = [r.label for r in rep.rows]
    assert rep.ml_rmse == rmse(hyb, lab) and rep.baseline_rmse == rmse(base, lab)
    assert rep.ml_r2 == r_squared(hyb, lab) and rep.baseline_r2 == r_squared(base, lab)
    perm = np.random.default_rng(0).permutation(len(hyb))
    assert rmse(np.array(hyb)[perm], np.array(lab)[perm]) == pytest.approx(rep.ml_rmse, rel=1e-15)
    for r in rep.rows:
        assert r.baseline == parameter_estimate(models[r.year], r.target_year, "recruitment")
        assert r.truth == truth.recruitment[r.target_year]
    assert audit_leakage(rep) == []
    again = backtest(spec, obs, bio, k=K, cache=cache, truth=truth.recruitment)
    assert again == rep


def test_backtest_ssb_variants_and_hyperparameters(stock):
    _, obs, bio, cache, _ = stock
    reps = [backtest(s, obs, bio, k=K, cache=cache) for s in task_specs("estimation", "ssb")]
    assert {r.spec.feature_variant for r in reps} == {FeatureVariant.SSB_PLUS_OBS, FeatureVariant.SSB_ONLY}
    small = backtest(reps[0].spec, obs, bio, k=K, cache=cache, hp=GbtHyperParams(nrounds=1))
    assert small.rows != reps[0].rows
    assert all(len(r.ensemble.trees) == 1 for r in small.results)


def test_strict_past_labels_come_from_step_models(stock):
    _, obs, bio, cache, models = stock
    spec = TaskSpec("estimation", "ssb", "ssb_only", LabelPolicy.STRICT_PAST)
    rep = backtest(spec, obs, bio, k=K, cache=cache)
    assert audit_leakage(rep) == []
    for res in rep.results:
        t = res.year
        step_labels = make_labels(models, bio, "ssb", t)
        for tt in res.dataset.train:
            assert tt.provenance.label_model_year == t
            assert tt.label == step_labels[tt.target_year]
        assert res.dataset.test.provenance.label_model_year == obs.last_year
    # appending data never changes earlier strict-past training tuples
    t = rep.results[0].year
    labels = {t: make_labels(models, bio, "ssb", t), obs.last_year: make_labels(models, bio, "ssb")}
    full = build_dataset(spec, models, obs, bio, labels, t)
    past = {y: m for y, m in models.items() if y <= t}
    short = build_dataset(spec, past, obs.truncated(t), bio, {t: labels[t]}, t)
    assert full.train == short.train


def test_audit_flags_future_provenance(stock):
    _, obs, bio, cache, _ = stock
    rep = backtest(TaskSpec("estimation", "ssb", "ssb_only"), obs, bio, k=K, cache=cache)
    res = rep.results[0]
    bad = res.dataset.train[0]
    leaked = dataclasses.replace(bad, provenance=dataclasses.replace(
        bad.provenance, features=(("SSB_hat", bad.year + 1, bad.year),)))
    ds = dataclasses.replace(res.dataset, train=(leaked,) + res.dataset.train[1:])
    tampered = dataclasses.replace(rep, results=(dataclasses.replace(res, dataset=ds),))
    assert len(audit_leakage(tampered)) == 1


def test_backtest_needs_enough_history(stock):
    _, obs, bio, cache, _ = stock
    with pytest.raises(InsufficientDataError):
        backtest(TaskSpec("forecast", "ssb"), obs, bio, k=obs.n_years - 5, cache=cache)
    with pytest.raises(ValueError):
        backtest(TaskSpec("forecast", "ssb"), obs, bio, k=4, cache=cache)


def test_task_enum_values():
    assert [t.value for t in Task] == ["estimation", "forecast"]
