"""Hybrid assessment: tree-based post-hoc correction of assessment outputs.

For each evaluation year t the corrector is trained only on tuples whose
features come from models fitted to data through their own year, then applied
to the year-t tuple. Every feature records which model and observation year it
came from so leakage can be audited mechanically.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from stockhybrid import gbt
from stockhybrid.assessor import (AssessmentCache, AssessorConfig, FittedAssessment,
                                  InsufficientDataError, NotConvergedError, derive_parameter,
                                  estimate, forecast, parameter_estimate)
from stockhybrid.core import (BiologySeries, FeatureVector, ObservationSeries, ParameterKind,
                              StockError, StockParameterSeries, flatten_features)

MIN_TRAINING_TUPLES = 5
DEFAULT_K = 17


class UndefinedVarianceError(StockError, ValueError):
    pass


class EmptyReportError(StockError, RuntimeError):
    pass


class Task(str, enum.Enum):
    ESTIMATION = "estimation"
    FORECAST = "forecast"


class FeatureVariant(str, enum.Enum):
    ABUNDANCE_PLUS_OBS = "abundance_plus_obs"
    SSB_PLUS_OBS = "ssb_plus_obs"
    SSB_ONLY = "ssb_only"


class LabelPolicy(str, enum.Enum):
    FINAL_MODEL = "final_model"
    STRICT_PAST = "strict_past"


class Correction(str, enum.Enum):
    RESIDUAL = "residual"  # learn label - baseline
    LOG_RATIO = "log_ratio"  # learn log(label / baseline)
    DIRECT = "direct"  # learn the label itself


@dataclass(frozen=True)
class TaskSpec:
    task: Task
    target: ParameterKind
    feature_variant: FeatureVariant | None = None
    label_policy: LabelPolicy = LabelPolicy.FINAL_MODEL
    correction: Correction | None = None  # None picks the target's default

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "target", ParameterKind(self.target))
        object.__setattr__(self, "label_policy", LabelPolicy(self.label_policy))
        correction = self.correction
        if correction is None:
            # recruitment errors are multiplicative (log-normal deviations), so the trees model
            # log(label / baseline); SSB drifts beyond the training range, so they model its
            # additive departure from the assessment
            correction = Correction.LOG_RATIO if self.target is ParameterKind.RECRUITMENT else Correction.RESIDUAL
        object.__setattr__(self, "correction", Correction(correction))
        variant = self.feature_variant
        if variant is None:
            variant = (FeatureVariant.ABUNDANCE_PLUS_OBS if self.target is ParameterKind.RECRUITMENT
                       else FeatureVariant.SSB_PLUS_OBS)
        variant = FeatureVariant(variant)
        if self.target is ParameterKind.RECRUITMENT and variant is not FeatureVariant.ABUNDANCE_PLUS_OBS:
            raise ValueError("recruitment uses the abundance_plus_obs features")
        if self.target is ParameterKind.SSB and variant is FeatureVariant.ABUNDANCE_PLUS_OBS:
            raise ValueError("ssb uses ssb_plus_obs or ssb_only features")
        object.__setattr__(self, "feature_variant", variant)

    @property
    def name(self) -> str:
        return f"{self.task.value}/{self.target.value}/{self.feature_variant.value}"

    @property
    def horizon(self) -> int:
        return 1 if self.task is Task.FORECAST else 0


def task_specs(task, target, label_policy=LabelPolicy.FINAL_MODEL, correction=None) -> list[TaskSpec]:
    """Every feature variant defined for ``target`` (two for SSB)."""
    target = ParameterKind(target)
    variants = ([FeatureVariant.ABUNDANCE_PLUS_OBS] if target is ParameterKind.RECRUITMENT
                else [FeatureVariant.SSB_PLUS_OBS, FeatureVariant.SSB_ONLY])
    return [TaskSpec(task, target, v, label_policy, correction) for v in variants]


@dataclass(frozen=True)
class Provenance:
    """Where a tuple came from: per-feature (model last data year, observation year), plus the label."""

    features: tuple[tuple[str, int, int], ...]
    label_year: int
    label_model_year: int


@dataclass(frozen=True)
class TrainingTuple:
    year: int  # the origin year i of the features
    features: FeatureVector
    baseline: float
    label: float
    provenance: Provenance

    @property
    def target_year(self) -> int:
        return self.provenance.label_year


@dataclass(frozen=True)
class Dataset:
    train: tuple[TrainingTuple, ...]
    test: TrainingTuple


def _models_by_year(models: Mapping[int, FittedAssessment] | Sequence[FittedAssessment]) -> dict[int, FittedAssessment]:
    if isinstance(models, Mapping):
        return dict(models)
    return {m.last_data_year: m for m in models}


def make_labels(models, bio: BiologySeries, target, label_model_year: int | None = None) -> StockParameterSeries:
    """Label series for every year covered by one model (M_T by default).

    Under the final-model policy this is called with the full-data model;
    under the strict-past policy with the model of the backtest step.
    """
    by_year = _models_by_year(models)
    year = max(by_year) if label_model_year is None else label_model_year
    model = by_year[year]
    if not model.converged:
        raise NotConvergedError(f"label model M_{year} did not converge")
    kind = ParameterKind(target)
    values = {y: derive_parameter(estimate(model, y), bio, kind)
              for y in range(model.first_data_year, model.last_data_year + 1)}
    return StockParameterSeries(kind, values)


def _features(spec: TaskSpec, model: FittedAssessment, obs: ObservationSeries, year: int):
    """Feature vector, baseline and provenance for origin ``year`` using ``model`` (M_year)."""
    if spec.task is Task.ESTIMATION:
        n = estimate(model, year)
    else:
        n = forecast(model, 1)
    baseline = parameter_estimate(model, n.year, spec.target)
    obs_rows = obs.truncated(year)
    v = spec.feature_variant
    if v is FeatureVariant.ABUNDANCE_PLUS_OBS:
        fv = flatten_features(abundance=n, observations=obs_rows, year=year)
    elif v is FeatureVariant.SSB_PLUS_OBS:
        fv = flatten_features(parameters={"SSB_hat": baseline}, observations=obs_rows, year=year)
    else:
        fv = flatten_features(parameters={"SSB_hat": baseline})
    obs_names = set()
    if v is not FeatureVariant.SSB_ONLY:
        obs_names = set(flatten_features(observations=obs_rows, year=year).names)
    prov = tuple((name, model.last_data_year, year if name in obs_names else model.last_data_year)
                 for name in fv.names)
    return fv, baseline, prov


def build_dataset(spec: TaskSpec, models, obs: ObservationSeries, bio: BiologySeries,
                  labels: Mapping[int, StockParameterSeries] | StockParameterSeries,
                  upto: int) -> Dataset:
    """Training tuples for origins before ``upto`` plus the test tuple at ``upto``.

    ``labels`` is either one series (final-model policy) or a mapping from
    label-model year to series; the series of year ``upto`` is used for
    training labels, the latest one for the test label.
    """
    by_year = _models_by_year(models)
    if isinstance(labels, StockParameterSeries):
        train_labels, train_label_year = labels, max(by_year)
        test_labels, test_label_year = labels, max(by_year)
    else:
        train_label_year, test_label_year = upto, max(labels)
        train_labels, test_labels = labels[upto], labels[test_label_year]
    h = spec.horizon
    test_model = by_year.get(upto)
    if test_model is None or not test_model.converged:
        raise NotConvergedError(f"no converged model for year {upto}")
    train = []
    for i in sorted(by_year):
        if i >= upto or i + h > upto:
            continue  # label year must lie at or before the backtest step
        model = by_year[i]
        if not model.converged or (i + h) not in train_labels:
            continue
        fv, base, prov = _features(spec, model, obs, i)
        train.append(TrainingTuple(i, fv, base, train_labels[i + h],
                                   Provenance(prov, i + h, train_label_year)))
    if len(train) < MIN_TRAINING_TUPLES:
        raise InsufficientDataError(f"{len(train)} usable training tuples before {upto}, "
                                    f"need {MIN_TRAINING_TUPLES}")
    fv, base, prov = _features(spec, test_model, obs, upto)
    if (upto + h) not in test_labels:
        raise InsufficientDataError(f"no label for year {upto + h}")
    test = TrainingTuple(upto, fv, base, test_labels[upto + h], Provenance(prov, upto + h, test_label_year))
    return Dataset(tuple(train), test)


def _encode(correction: Correction, label: np.ndarray, baseline: np.ndarray) -> np.ndarray:
    if correction is Correction.RESIDUAL:
        return label - baseline
    if correction is Correction.LOG_RATIO:
        return np.log(label / baseline)
    return label


def _decode(correction: Correction, output: float, baseline: float) -> float:
    if correction is Correction.RESIDUAL:
        return baseline + output
    if correction is Correction.LOG_RATIO:
        return baseline * math.exp(output)
    return output


@dataclass(frozen=True)
class TaskResult:
    year: int
    target_year: int
    baseline: float
    hybrid: float
    label: float
    ensemble: gbt.TreeEnsemble
    dataset: Dataset


def fit_corrector(spec: TaskSpec, train: Sequence[TrainingTuple], hp: gbt.GbtHyperParams | None = None) -> gbt.TreeEnsemble:
    y = _encode(spec.correction, np.array([tt.label for tt in train]), np.array([tt.baseline for tt in train]))
    return gbt.fit([tt.features for tt in train], y, hp)


def apply_corrector(spec: TaskSpec, ensemble: gbt.TreeEnsemble, tt: TrainingTuple) -> float:
    return _decode(spec.correction, gbt.predict(ensemble, tt.features), tt.baseline)


def run_task(spec: TaskSpec, models, obs: ObservationSeries, bio: BiologySeries, t: int,
             hp: gbt.GbtHyperParams | None = None, labels=None) -> TaskResult:
    """Baseline, corrected prediction and label for origin year ``t``."""
    by_year = _models_by_year(models)
    if labels is None:
        labels = _label_source(spec, by_year, bio, t)
    ds = build_dataset(spec, by_year, obs, bio, labels, t)
    ensemble = fit_corrector(spec, ds.train, hp)
    hybrid = apply_corrector(spec, ensemble, ds.test)
    return TaskResult(t, ds.test.target_year, ds.test.baseline, hybrid, ds.test.label, ensemble, ds)


def _label_source(spec: TaskSpec, by_year: dict[int, FittedAssessment], bio: BiologySeries, t: int):
    final = max(by_year)
    if spec.label_policy is LabelPolicy.FINAL_MODEL:
        return make_labels(by_year, bio, spec.target)
    return {t: make_labels(by_year, bio, spec.target, t), final: make_labels(by_year, bio, spec.target)}


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, y = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} truths")
    if p.size == 0:
        raise ValueError("rmse of empty series")
    return float(np.sqrt(np.mean((p - y) ** 2)))


def r_squared(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, y = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} truths")
    if p.size < 2:
        raise ValueError("r_squared needs at least two points")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise UndefinedVarianceError("truth has zero variance")
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


@dataclass(frozen=True)
class ReportRow:
    year: int  # origin year t
    target_year: int
    baseline: float
    hybrid: float
    label: float
    truth: float = math.nan  # simulated truth when known


@dataclass(frozen=True)
class BacktestReport:
    stock: str
    spec: TaskSpec
    k: int
    rows: tuple[ReportRow, ...]
    skipped: tuple[tuple[int, str], ...] = ()
    results: tuple[TaskResult, ...] = field(default=(), compare=False, repr=False)

    def _metric(self, fn, column: str) -> float:
        pred = [getattr(r, column) for r in self.rows]
        label = [r.label for r in self.rows]
        try:
            return fn(pred, label)
        except (ValueError, UndefinedVarianceError):
            return math.nan

    @property
    def ml_rmse(self) -> float:
        return self._metric(rmse, "hybrid")

    @property
    def ml_r2(self) -> float:
        return self._metric(r_squared, "hybrid")

    @property
    def baseline_rmse(self) -> float:
        return self._metric(rmse, "baseline")

    @property
    def baseline_r2(self) -> float:
        return self._metric(r_squared, "baseline")


def evaluation_years(spec: TaskSpec, last_year: int, k: int) -> list[int]:
    """Origin years whose target years are last_year-k .. last_year."""
    h = spec.horizon
    return list(range(last_year - k - h, last_year - h + 1))


def fit_models(obs: ObservationSeries, bio: BiologySeries, cfg: AssessorConfig,
               cache: AssessmentCache | None = None, first_year: int | None = None) -> dict[int, FittedAssessment]:
    """M_t for every t with at least ``cfg.min_years`` of data (or from ``first_year``)."""
    cache = cache if cache is not None else AssessmentCache()
    start = obs.first_year + cfg.min_years - 1
    if first_year is not None:
        start = max(start, first_year)
    return {t: cache.get_or_fit(obs, bio, cfg, t) for t in range(start, obs.last_year + 1)}


def backtest(spec: TaskSpec, obs: ObservationSeries, bio: BiologySeries, cfg: AssessorConfig | None = None,
             k: int = DEFAULT_K, hp: gbt.GbtHyperParams | None = None, cache: AssessmentCache | None = None,
             stock: str = "stock", truth: StockParameterSeries | None = None) -> BacktestReport:
    """Expanding-window backtest over the last k+1 target years."""
    cfg = cfg or AssessorConfig()
    if k < 5:
        raise ValueError("k must be >= 5")
    years = evaluation_years(spec, obs.last_year, k)
    if years[0] - obs.first_year + 1 < cfg.min_years:
        raise InsufficientDataError(f"T - k leaves fewer than {cfg.min_years} years before the first evaluation")
    models = fit_models(obs, bio, cfg, cache)
    final = models[obs.last_year]
    if not final.converged:
        raise NotConvergedError("the full-data model did not converge; no labels")
    final_labels = make_labels(models, bio, spec.target)
    rows, skipped, results = [], [], []
    for t in years:
        if not models[t].converged:
            skipped.append((t, "not_converged"))
            continue
        if spec.label_policy is LabelPolicy.FINAL_MODEL:
            labels = final_labels
        else:
            labels = {t: make_labels(models, bio, spec.target, t), obs.last_year: final_labels}
        try:
            res = run_task(spec, models, obs, bio, t, hp, labels)
        except InsufficientDataError as exc:
            skipped.append((t, f"insufficient_data: {exc}"))
            continue
        tv = truth[res.target_year] if truth is not None and res.target_year in truth else math.nan
        rows.append(ReportRow(t, res.target_year, res.baseline, res.hybrid, res.label, tv))
        results.append(res)
    if not rows:
        raise EmptyReportError(f"every evaluation year was skipped for {spec.name}")
    return BacktestReport(stock, spec, k, tuple(rows), tuple(skipped), tuple(results))


def audit_leakage(report: BacktestReport) -> list[str]:
    """Provenance violations in every tuple used by a report (empty means clean)."""
    violations = []
    for res in report.results:
        t = res.year
        for tt in res.dataset.train + (res.dataset.test,):
            i = tt.year
            for name, model_year, obs_year in tt.provenance.features:
                if model_year > i or obs_year > i:
                    violations.append(f"step {t}, tuple {i}: {name} uses model {model_year}, obs {obs_year}")
            if tt is res.dataset.test:
                continue
            if i >= t or tt.target_year > t:
                violations.append(f"step {t}: training tuple {i} targets year {tt.target_year}")
            if (report.spec.label_policy is LabelPolicy.STRICT_PAST
                    and tt.provenance.label_model_year > t):
                violations.append(f"step {t}: training label for {i} from model {tt.provenance.label_model_year}")
    return violations
