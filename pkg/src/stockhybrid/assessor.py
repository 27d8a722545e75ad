"""Age-structured state-space assessment model.

Latent state per year: log numbers-at-age plus log fishing intensity f_t,
with F_{a,t} = S_a * f_t and log f a random walk. Catch-at-age follows the
Baranov equation, survey indices are q * n * exp(-tau * Z). All observation
and process errors are log-normal. Parameters are estimated by maximising
the extended-Kalman-filter prediction-error likelihood with restarted
Nelder-Mead; a Rauch-Tung-Striebel pass gives the smoothed history.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import threading
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from stockhybrid import _ekf
from stockhybrid.core import (
    AbundanceVector,
    AgeRange,
    BiologySeries,
    DomainError,
    FleetKind,
    MissingDataError,
    ObservationSeries,
    ParameterKind,
    StockError,
    StockParameterSeries,
    baranov_catch,
    recruitment_of,
    ssb,
)

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
LOG_SIGMA_MIN = 0.5 * math.log(VARIANCE_FLOOR)
LOG_SIGMA_MAX = math.log(3.0)
MAX_HORIZON = 3
AGREEMENT_TOL = 1e-3  # nll difference at which two restarts count as the same optimum


class NotConvergedError(StockError, RuntimeError):
    pass


class InsufficientDataError(StockError, ValueError):
    pass


@dataclass(frozen=True)
class AssessorConfig:
    recruitment_model: str = "beverton_holt"  # or "random_walk"
    forecast_policy: str = "status_quo"  # or "mean_last_3"
    initial_f: float = 0.3
    restarts: int = 3
    jitter: float = 0.1
    max_evals: int = 20000
    simplex_step: float = 0.3
    update_iterations: int = 1  # >1 gives the iterated EKF update
    fixed: tuple[tuple[str, float], ...] = ()  # (parameter name, transformed value) held constant
    tolerance: float = 1e-6
    min_years: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.recruitment_model not in ("beverton_holt", "random_walk"):
            raise DomainError(f"unknown recruitment model {self.recruitment_model!r}")
        if self.forecast_policy not in ("status_quo", "mean_last_3"):
            raise DomainError(f"unknown forecast policy {self.forecast_policy!r}")
        object.__setattr__(self, "fixed", tuple((str(k), float(v)) for k, v in
                                                dict(self.fixed).items()))
        if self.update_iterations < 1:
            raise DomainError("update_iterations must be >= 1")
        if self.restarts < 0 or self.max_evals < 1 or self.tolerance <= 0:
            raise DomainError("restarts, max_evals and tolerance must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fixed"] = dict(self.fixed)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AssessorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown assessor keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def q_blocks(ages: Sequence[int], min_age: int) -> list[tuple[str, list[int]]]:
    """Catchability blocks {min_age, min_age+1, rest} restricted to covered ages."""
    blocks = [("b0", [a for a in ages if a == min_age]),
              ("b1", [a for a in ages if a == min_age + 1]),
              ("b2", [a for a in ages if a > min_age + 1])]
    return [(name, members) for name, members in blocks if members]


@dataclass
class _Problem:
    """Arrays and parameter layout for one (observations, biology, config) triple."""

    obs: ObservationSeries
    bio: BiologySeries
    cfg: AssessorConfig
    fleet_names: list[str]
    obs_log: np.ndarray
    kind: np.ndarray
    tau: np.ndarray
    names: list[str]
    defaults: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    q_slot: np.ndarray  # (fleets, ages) index into theta, -1 if none
    sigma_slot: np.ndarray
    weight: np.ndarray
    maturity: np.ndarray
    mort: np.ndarray
    catch_total: np.ndarray  # observed catch summed over ages, first year with data
    catch_mask: np.ndarray
    catch_year: int

    @property
    def age_range(self) -> AgeRange:
        return self.bio.age_range

    def index(self, name: str) -> int:
        return self.names.index(name)


def _build_problem(obs: ObservationSeries, bio: BiologySeries, cfg: AssessorConfig) -> _Problem:
    ar = bio.age_range
    if obs.n_years < cfg.min_years:
        raise InsufficientDataError(f"need >= {cfg.min_years} years of data, got {obs.n_years}")
    if bio.first_year > obs.first_year or bio.last_year < obs.last_year:
        raise MissingDataError(f"biology covers {bio.first_year}..{bio.last_year}, "
                               f"observations {obs.first_year}..{obs.last_year}")
    bio = bio.span(obs.first_year, obs.last_year)
    fleets = sorted((f for f in obs.fleets if f.stratified), key=lambda f: f.name)
    if not any(f.kind is FleetKind.SURVEY for f in fleets):
        raise InsufficientDataError("at least one age-structured survey is required")
    if not any(f.kind is FleetKind.COMMERCIAL_CATCH for f in fleets):
        raise InsufficientDataError("at least one age-structured catch fleet is required")
    T, A, K = obs.n_years, ar.n_ages, len(fleets)
    obs_log = np.full((K, T, A), np.nan)
    for k, fl in enumerate(fleets):
        for j, age in enumerate(fl.ages):
            if not ar.min_age <= age <= ar.max_age:
                continue
            col = fl.values[:, j]
            obs_log[k, fl.first_year - obs.first_year:fl.first_year - obs.first_year + len(col),
                    ar.index(age)] = np.log(col)

    names, defaults, lower, upper = [], [], [], []

    def add(name, default, lo, hi):
        names.append(name)
        defaults.append(float(np.clip(default, lo, hi)))
        lower.append(lo)
        upper.append(hi)

    add("log_sigma_proc", math.log(0.1), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    add("log_sigma_rec", math.log(0.5), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    add("log_sigma_f", math.log(0.2), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    sigma_slot = np.empty(K, dtype=np.int64)
    for k, fl in enumerate(fleets):
        sigma_slot[k] = len(names)
        add(f"log_sigma_obs[{fl.name}]", math.log(0.3), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    a50_default = ar.min_age + 1.5
    add("sel_a50", a50_default, ar.min_age - 1.0, float(ar.max_age))
    add("sel_log_slope", 0.0, math.log(0.2), math.log(10.0))

    # crude catch-curve abundance for data-driven starting values
    sel0 = 1.0 / (1.0 + np.exp(-(ar.ages - a50_default)))
    mort = np.asarray(bio.natural_mortality)
    F0 = cfg.initial_f * sel0[None, :]
    Z0 = F0 + mort
    kind = np.array([_ekf.KIND_CATCH if f.kind is FleetKind.COMMERCIAL_CATCH else _ekf.KIND_SURVEY
                     for f in fleets], dtype=np.int64)
    tau = np.array([f.timing or 0.0 for f in fleets])
    catch_log = np.nanmean(np.where(kind[:, None, None] == _ekf.KIND_CATCH, obs_log, np.nan), axis=0) \
        if np.any(kind == _ekf.KIND_CATCH) else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        crude_log_n = catch_log - np.log(F0 / Z0 * -np.expm1(-Z0))
        q_slot = np.full((K, A), -1, dtype=np.int64)
        for k, fl in enumerate(fleets):
            if kind[k] != _ekf.KIND_SURVEY:
                continue
            for bname, members in q_blocks([a for a in fl.ages if ar.min_age <= a <= ar.max_age],
                                           ar.min_age):
                cols = [ar.index(a) for a in members]
                resid = obs_log[k][:, cols] - crude_log_n[:, cols] + tau[k] * Z0[:, cols]
                d = float(np.nanmedian(resid)) if np.any(np.isfinite(resid)) else 0.0
                slot = len(names)
                add(f"log_q[{fl.name},{bname}]", d, d - 6.0, d + 6.0)
                q_slot[k, cols] = slot
        if cfg.recruitment_model == "beverton_holt":
            n_crude = np.exp(crude_log_n)
            rec = np.nanmedian(n_crude[:, 0])
            s = np.nanmedian(np.nansum(np.asarray(bio.weight) * np.asarray(bio.maturity) * n_crude, axis=1))
            if not (np.isfinite(rec) and np.isfinite(s) and rec > 0 and s > 0):
                rec, s = 1.0, 1.0
            la = math.log(2.0 * rec / s)
            lb = -math.log(s)
            add("log_bh_alpha", la, la - 8.0, la + 8.0)
            add("log_bh_beta", lb, lb - 8.0, lb + 8.0)

    # total catch in the first year with catch data, used to scale the initial prior
    catch_rows = np.where(kind == _ekf.KIND_CATCH)[0]
    cobs = np.exp(obs_log[catch_rows[0]])
    has = np.where(np.any(np.isfinite(cobs), axis=1))[0]
    cy = int(has[0]) if has.size else 0
    mask = np.isfinite(cobs[cy])
    return _Problem(obs, bio, cfg, [f.name for f in fleets], obs_log, kind, tau, names,
                    np.array(defaults), np.array(lower), np.array(upper), q_slot, sigma_slot,
                    np.ascontiguousarray(bio.weight), np.ascontiguousarray(bio.maturity),
                    np.ascontiguousarray(mort), np.nansum(cobs[cy]), mask, cy)


@dataclass
class _FilterOutput:
    nll: float
    xf: np.ndarray
    pf: np.ndarray
    xp: np.ndarray
    pp: np.ndarray
    jac: np.ndarray


def _kernel_args(prob: _Problem) -> tuple:
    names = prob.names
    idx = lambda n: names.index(n) if n in names else -1
    bh = prob.cfg.recruitment_model == "beverton_holt"
    return (prob.age_range.ages.astype(float), prob.age_range.plus_group,
            _ekf.REC_BEVERTON_HOLT if bh else _ekf.REC_RANDOM_WALK,
            idx("log_sigma_proc"), idx("log_sigma_rec"), idx("log_sigma_f"), idx("sel_a50"),
            idx("sel_log_slope"), idx("log_bh_alpha"), idx("log_bh_beta"), prob.q_slot,
            prob.sigma_slot, VARIANCE_FLOOR, prob.obs_log, prob.kind, prob.tau, prob.weight,
            prob.maturity, prob.mort, float(prob.cfg.initial_f), prob.catch_year,
            float(prob.catch_total), prob.catch_mask, int(prob.cfg.update_iterations))


def _buffers(prob: _Problem) -> tuple:
    T, m = prob.obs_log.shape[1], prob.age_range.n_ages + 1
    return (np.zeros((T, m)), np.zeros((T, m, m)), np.zeros((T, m)), np.zeros((T, m, m)),
            np.zeros((T, m, m)))


def _objective(prob: _Problem):
    """Fast nll closure reusing one set of work buffers."""
    args = _kernel_args(prob)
    bufs = _buffers(prob)

    def f(theta):
        val = _ekf.objective(np.asarray(theta, dtype=float), *args, *bufs)
        return val if math.isfinite(val) else math.inf
    return f


def _filter(theta: np.ndarray, prob: _Problem) -> _FilterOutput:
    xf, pf, xp, pp, jac = _buffers(prob)
    val = _ekf.objective(np.asarray(theta, dtype=float), *_kernel_args(prob), xf, pf, xp, pp, jac)
    return _FilterOutput(val if math.isfinite(val) else math.inf, xf, pf, xp, pp, jac)


def _smooth(out: _FilterOutput) -> tuple[np.ndarray, np.ndarray]:
    T = out.xf.shape[0]
    xs, ps = out.xf.copy(), out.pf.copy()
    for t in range(T - 2, -1, -1):
        gain = out.pf[t] @ out.jac[t + 1].T @ np.linalg.pinv(out.pp[t + 1])
        xs[t] = out.xf[t] + gain @ (xs[t + 1] - out.xp[t + 1])
        cov = out.pf[t] + gain @ (ps[t + 1] - out.pp[t + 1]) @ gain.T
        ps[t] = 0.5 * (cov + cov.T)
    return xs, ps


def nll(theta: Sequence[float], obs: ObservationSeries, bio: BiologySeries,
        cfg: AssessorConfig) -> float:
    """Negative log-likelihood of the observations at transformed parameters ``theta``.

    Returns ``inf`` when the filter breaks down, never raises for in-bound values.
    """
    prob = _build_problem(obs, bio, cfg)
    return _filter(np.asarray(theta, dtype=float), prob).nll


def parameter_layout(obs: ObservationSeries, bio: BiologySeries, cfg: AssessorConfig):
    """Names, default values and bounds of the estimated parameter vector."""
    prob = _build_problem(obs, bio, cfg)
    return list(prob.names), prob.defaults.copy(), np.column_stack([prob.lower, prob.upper])


@dataclass(frozen=True)
class StateEstimate:
    """Per-year mean and covariance of (log n_a ..., log f)."""

    first_year: int
    mean: np.ndarray
    cov: np.ndarray
    flag: str  # filtered | smoothed | forecast

    def year_index(self, year: int) -> int:
        i = year - self.first_year
        if not 0 <= i < self.mean.shape[0]:
            raise MissingDataError(f"no {self.flag} state for year {year}")
        return i


@dataclass(frozen=True)
class FittedAssessment:
    """An assessment model fitted to data through ``last_data_year``."""

    config: AssessorConfig
    age_range: AgeRange
    param_names: tuple[str, ...]
    theta: np.ndarray
    nll: float
    converged: bool
    filtered: StateEstimate
    smoothed: StateEstimate | None
    first_data_year: int
    last_data_year: int
    bio: BiologySeries
    n_evals: int = 0
    start_nlls: tuple[float, ...] = ()

    def param(self, name: str) -> float:
        return float(self.theta[self.param_names.index(name)])

    @property
    def selectivity(self) -> np.ndarray:
        ages = self.age_range.ages
        slope = math.exp(self.param("sel_log_slope"))
        return 1.0 / (1.0 + np.exp(-slope * (ages - self.param("sel_a50"))))

    def log_q(self, fleet: str) -> dict[str, float]:
        prefix = f"log_q[{fleet},"
        return {n[len(prefix):-1]: float(v) for n, v in zip(self.param_names, self.theta)
                if n.startswith(prefix)}

    def sigma_obs(self, fleet: str) -> float:
        return math.exp(self.param(f"log_sigma_obs[{fleet}]"))

    def fishing_intensity(self, year: int) -> float:
        states = self.smoothed or self.filtered
        return float(math.exp(states.mean[states.year_index(year), -1]))


def _simplex(x0: np.ndarray, step: float, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Axis-aligned starting simplex with a fixed step in transformed units."""
    pts = np.tile(x0, (x0.size + 1, 1))
    for i in range(x0.size):
        pts[i + 1, i] = x0[i] + step if x0[i] + step <= upper[i] else x0[i] - step
    return pts


def fit(obs: ObservationSeries, bio: BiologySeries, cfg: AssessorConfig | None = None) -> FittedAssessment:
    """Maximum-likelihood fit by restarted Nelder-Mead.

    The first run starts from data-driven defaults; up to ``cfg.restarts``
    further runs start from deterministically jittered defaults and stop early
    once one reproduces the incumbent optimum. ``converged`` means the best
    run met both the parameter and the likelihood tolerance.
    """
    cfg = cfg or AssessorConfig()
    prob = _build_problem(obs, bio, cfg)
    full = prob.defaults.copy()
    fixed = dict(cfg.fixed)
    unknown = set(fixed) - set(prob.names)
    if unknown:
        raise DomainError(f"cannot fix unknown parameters {sorted(unknown)}")
    for name, value in fixed.items():
        full[prob.index(name)] = value
    free = np.array([n not in fixed for n in prob.names])
    lower, upper = prob.lower[free], prob.upper[free]
    bounds = list(zip(lower, upper))
    rng = np.random.default_rng(cfg.seed)
    full_objective = _objective(prob)

    def expand(x):
        th = full.copy()
        th[free] = x
        return th

    objective = lambda x: full_objective(expand(x))
    dim = int(free.sum())

    def run(x0, step):
        return minimize(objective, x0, method="Nelder-Mead", bounds=bounds,
                        options=dict(maxfev=cfg.max_evals, xatol=1e-3, fatol=cfg.tolerance,
                                     adaptive=True, initial_simplex=_simplex(x0, step, lower, upper)))

    n_evals = 0
    start_nlls = []
    best = None
    agreed = False
    for r in range(cfg.restarts + 1):
        x0 = full[free].copy()
        if r:
            x0 = np.clip(x0 + rng.normal(0.0, cfg.jitter, size=dim), lower, upper)
        start_nlls.append(objective(x0))
        res = run(x0, cfg.simplex_step)
        n_evals += res.nfev
        if best is not None and res.success and best.success \
                and abs(res.fun - best.fun) <= AGREEMENT_TOL:
            agreed = True
        if best is None or res.fun < best.fun:
            best = res
        if agreed:
            break
    if not agreed and best is not None and math.isfinite(best.fun):
        res = run(best.x, 0.1 * cfg.simplex_step)
        n_evals += res.nfev
        if res.fun <= best.fun:
            best = res
    best_x = expand(np.asarray(best.x))
    converged = bool(best.success) and math.isfinite(best.fun)
    out = _filter(best_x, prob)
    filtered = StateEstimate(obs.first_year, out.xf, out.pf, "filtered")
    smoothed = None
    if converged:
        xs, ps = _smooth(out)
        smoothed = StateEstimate(obs.first_year, xs, ps, "smoothed")
    else:
        log.info("assessment through %d did not converge (nll=%s)", obs.last_year, best.fun)
    return FittedAssessment(cfg, prob.age_range, tuple(prob.names), best_x, out.nll,
                            converged, filtered, smoothed, obs.first_year, obs.last_year,
                            prob.bio, n_evals, tuple(start_nlls))


def _require(model: FittedAssessment) -> StateEstimate:
    if not model.converged or model.smoothed is None:
        raise NotConvergedError(f"assessment through {model.last_data_year} did not converge")
    return model.smoothed


def estimate(model: FittedAssessment, year: int) -> AbundanceVector:
    """Numbers-at-age for ``year`` from the model's smoothed states.

    At the final data year the smoothed and filtered states coincide, so this
    is the current-year estimate there.
    """
    states = _require(model)
    if not model.first_data_year <= year <= model.last_data_year:
        raise MissingDataError(f"year {year} outside fitted range "
                               f"{model.first_data_year}..{model.last_data_year}")
    i = states.year_index(year)
    return AbundanceVector(year, np.exp(states.mean[i, :-1]), model.age_range)


def _forecast_f(model: FittedAssessment) -> float:
    states = _require(model)
    if model.config.forecast_policy == "mean_last_3":
        return float(np.mean(states.mean[-3:, -1]))
    return float(states.mean[-1, -1])


def project(model: FittedAssessment, state: np.ndarray, year: int) -> np.ndarray:
    """One deterministic step of the process mean from ``year`` to ``year + 1``.

    Biology beyond the data is carried forward from the last data year.
    """
    bio = model.bio.extended(year)
    t = year - bio.first_year
    w, mat, mort = (np.ascontiguousarray(a) for a in (bio.weight, bio.maturity, bio.natural_mortality))
    m = state.size
    g, jac = np.empty(m), np.empty((m, m))
    if model.config.recruitment_model == "beverton_holt":
        rec_model = _ekf.REC_BEVERTON_HOLT
        la, beta = model.param("log_bh_alpha"), math.exp(model.param("log_bh_beta"))
    else:
        rec_model, la, beta = _ekf.REC_RANDOM_WALK, 0.0, 0.0
    _ekf.process_mean(np.asarray(state, dtype=float), t, model.age_range.plus_group, rec_model,
                      la, beta, model.selectivity, w, mat, mort, g, jac)
    return g


def forecast(model: FittedAssessment, horizon: int = 1) -> AbundanceVector:
    """Numbers-at-age ``horizon`` years past the last data year (process mean)."""
    states = _require(model)
    if horizon < 1:
        raise DomainError("forecast horizon must be >= 1")
    if horizon > MAX_HORIZON:
        raise DomainError(f"forecast horizon {horizon} unsupported (max {MAX_HORIZON})")
    x = states.mean[-1].copy()
    x[-1] = _forecast_f(model)
    year = model.last_data_year
    for _ in range(horizon):
        x = project(model, x, year)
        year += 1
    return AbundanceVector(year, np.exp(x[:-1]), model.age_range)


def derive_parameter(n: AbundanceVector, bio: BiologySeries, kind) -> float:
    kind = ParameterKind(kind)
    if kind is ParameterKind.SSB:
        return ssb(n, bio)
    return recruitment_of(n)


def parameter_estimate(model: FittedAssessment, year: int, kind) -> float:
    """Recruitment or SSB for ``year``: an estimate within the data, a forecast beyond it."""
    if year <= model.last_data_year:
        n = estimate(model, year)
    else:
        n = forecast(model, year - model.last_data_year)
    return derive_parameter(n, model.bio.extended(year), kind)


class AssessmentCache:
    """Fitted models keyed by (data fingerprint, last year, config fingerprint).

    Insert-or-get is guarded per key so concurrent callers fit each model once.
    """

    def __init__(self):
        self._models: dict[tuple, FittedAssessment] = {}
        self._locks: dict[tuple, threading.Lock] = {}
        self._guard = threading.Lock()
        self.fits = 0

    def __len__(self) -> int:
        return len(self._models)

    @staticmethod
    def key(obs: ObservationSeries, bio: BiologySeries, cfg: AssessorConfig, last_year: int) -> tuple:
        bio_hash = hashlib.sha1(b"".join(np.ascontiguousarray(a).tobytes() for a in
                                         (bio.weight, bio.maturity, bio.natural_mortality))).hexdigest()
        return obs.fingerprint(), bio_hash, bio.first_year, last_year, cfg.fingerprint()

    def get_or_fit(self, obs: ObservationSeries, bio: BiologySeries, cfg: AssessorConfig,
                   last_year: int) -> FittedAssessment:
        key = self.key(obs, bio, cfg, last_year)
        with self._guard:
            if key in self._models:
                return self._models[key]
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._models:
                model = fit(obs.truncated(last_year), bio, cfg)
                with self._guard:
                    self._models[key] = model
                    self.fits += 1
            return self._models[key]


@dataclass(frozen=True)
class RetrospectiveMatrix:
    """Recruitment and SSB estimates from each model M_t (None when M_t failed to converge)."""

    recruitment: dict[int, StockParameterSeries | None]
    ssb: dict[int, StockParameterSeries | None]

    @property
    def model_years(self) -> list[int]:
        return sorted(self.recruitment)

    def series(self, kind) -> dict[int, StockParameterSeries | None]:
        return self.ssb if ParameterKind(kind) is ParameterKind.SSB else self.recruitment


def retrospective_matrix(obs: ObservationSeries, bio: BiologySeries, cfg: AssessorConfig,
                         first_t: int, cache: AssessmentCache | None = None) -> RetrospectiveMatrix:
    """Fit M_t for each t from ``first_t`` to the final year and collect its estimates."""
    if first_t - obs.first_year + 1 < cfg.min_years:
        raise InsufficientDataError(f"first_t={first_t} leaves fewer than {cfg.min_years} years")
    cache = cache or AssessmentCache()
    rec, sb = {}, {}
    for t in range(first_t, obs.last_year + 1):
        model = cache.get_or_fit(obs, bio, cfg, t)
        if not model.converged:
            rec[t] = sb[t] = None
            continue
        years = range(obs.first_year, t + 1)
        ests = [estimate(model, y) for y in years]
        rec[t] = StockParameterSeries(ParameterKind.RECRUITMENT,
                                      {y: recruitment_of(n) for y, n in zip(years, ests)})
        sb[t] = StockParameterSeries(ParameterKind.SSB, {y: ssb(n, bio) for y, n in zip(years, ests)})
    return RetrospectiveMatrix(rec, sb)


def mohns_rho(retro: RetrospectiveMatrix | Mapping[int, StockParameterSeries | None],
              peels: int, kind=ParameterKind.SSB) -> float:
    """Mean relative revision of terminal estimates over ``peels`` retrospective peels."""
    rows = retro.series(kind) if isinstance(retro, RetrospectiveMatrix) else dict(retro)
    final_year = max(rows)
    if peels >= len(rows):
        raise DomainError(f"peels={peels} needs more than {peels} retrospective rows")
    final = rows[final_year]
    if final is None:
        raise NotConvergedError("the full-data model did not converge")
    terms = []
    for p in range(1, peels + 1):
        y = final_year - p
        peel = rows.get(y)
        if peel is None:
            warnings.warn(f"peel {p} (model {y}) missing; excluded from Mohn's rho")
            continue
        ref = final[y]
        if ref == 0:
            warnings.warn(f"zero reference estimate for {y}; excluded from Mohn's rho")
            continue
        terms.append((peel[y] - ref) / ref)
    if not terms:
        raise DomainError("no usable peels for Mohn's rho")
    return float(np.mean(terms))


def _state_to_json(s: StateEstimate | None):
    if s is None:
        return None
    return {"first_year": s.first_year, "flag": s.flag, "mean": s.mean.tolist(), "cov": s.cov.tolist()}


def _state_from_json(d) -> StateEstimate | None:
    if d is None:
        return None
    return StateEstimate(d["first_year"], np.array(d["mean"]), np.array(d["cov"]), d["flag"])


def dumps_assessment(model: FittedAssessment) -> str:
    """JSON text holding parameters, diagnostics, states and biology of a fit."""
    bio = model.bio
    doc = {
        "format": "stockhybrid.assessment/1",
        "config": model.config.to_dict(),
        "age_range": dataclasses.asdict(model.age_range),
        "first_data_year": model.first_data_year,
        "last_data_year": model.last_data_year,
        "converged": model.converged,
        "nll": model.nll if math.isfinite(model.nll) else None,
        "n_evals": model.n_evals,
        "start_nlls": [v if math.isfinite(v) else None for v in model.start_nlls],
        "parameters": dict(zip(model.param_names, model.theta.tolist())),
        "biology": {"first_year": bio.first_year, "weight": bio.weight.tolist(),
                    "maturity": bio.maturity.tolist(),
                    "natural_mortality": bio.natural_mortality.tolist()},
        "filtered": _state_to_json(model.filtered),
        "smoothed": _state_to_json(model.smoothed),
    }
    return json.dumps(doc, indent=1)


def loads_assessment(text: str) -> FittedAssessment:
    doc = json.loads(text)
    if doc.get("format") != "stockhybrid.assessment/1":
        raise DomainError("not a stockhybrid assessment file")
    ar = AgeRange(**doc["age_range"])
    b = doc["biology"]
    bio = BiologySeries(b["first_year"], ar, np.array(b["weight"]), np.array(b["maturity"]),
                        np.array(b["natural_mortality"]))
    params = doc["parameters"]
    nll_val = doc["nll"]
    return FittedAssessment(
        AssessorConfig.from_dict(doc["config"]), ar, tuple(params), np.array(list(params.values())),
        math.inf if nll_val is None else nll_val, doc["converged"],
        _state_from_json(doc["filtered"]), _state_from_json(doc["smoothed"]),
        doc["first_data_year"], doc["last_data_year"], bio, doc["n_evals"],
        tuple(math.inf if v is None else v for v in doc["start_nlls"]))
