"""Synthetic age-structured stocks with known truth.

Dynamics run in log space with log-normal (median-preserving) noise. An
optional AR(1) environment shifts recruitment and one survey's catchability;
the assessment model ignores it, which gives the tree corrector something to
learn.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from stockhybrid.core import (
    AbundanceMatrix,
    AbundanceVector,
    AgeRange,
    BiologySeries,
    DomainError,
    FleetKind,
    FleetObservation,
    ObservationSeries,
    ParameterKind,
    StockError,
    StockParameterSeries,
    baranov_catch,
)

MAX_WARMUP_YEARS = 10_000


class ConfigError(StockError, ValueError):
    pass


@dataclass(frozen=True)
class FleetSpec:
    name: str
    kind: FleetKind
    sigma_obs: float
    ages: tuple[int, ...] | None = None  # None: every modelled age
    catchability: tuple[float, ...] | None = None
    timing: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FleetKind(self.kind))
        if self.ages is not None:
            object.__setattr__(self, "ages", tuple(int(a) for a in self.ages))
        if self.catchability is not None:
            object.__setattr__(self, "catchability", tuple(float(q) for q in self.catchability))
        if self.sigma_obs < 0:
            raise ConfigError(f"fleet {self.name}: sigma_obs must be >= 0")
        if self.kind is FleetKind.SURVEY:
            if self.timing is None or not 0 <= self.timing <= 1:
                raise ConfigError(f"survey {self.name}: timing must lie in [0, 1]")
            if self.catchability is None:
                raise ConfigError(f"survey {self.name}: catchability required")
            if any(q <= 0 for q in self.catchability):
                raise ConfigError(f"survey {self.name}: catchability must be positive")


@dataclass(frozen=True)
class EnvironmentSpec:
    """AR(1) driver e_t loading onto log recruitment and one survey's log catchability."""

    phi: float = 0.6
    sigma_env: float = 0.4
    recruitment_loading: float = 1.0
    survey_loading: float = 1.5
    survey_fleet: str | None = None  # defaults to the first survey

    def __post_init__(self):
        if not -1 < self.phi < 1:
            raise ConfigError(f"phi must lie in (-1, 1), got {self.phi}")
        if self.sigma_env < 0:
            raise ConfigError("sigma_env must be >= 0")


def logistic_selectivity(ages, a50: float, slope: float) -> np.ndarray:
    ages = np.asarray(ages, dtype=float)
    return 1.0 / (1.0 + np.exp(-slope * (ages - a50)))


def _default_fleets() -> tuple[FleetSpec, ...]:
    return (
        FleetSpec("catch", FleetKind.COMMERCIAL_CATCH, sigma_obs=0.15),
        FleetSpec("survey_Q1", FleetKind.SURVEY, sigma_obs=0.2, ages=(1, 2, 3, 4, 5, 6),
                  catchability=(2e-3, 3e-3, 4e-3, 4e-3, 4e-3, 4e-3), timing=0.2),
        FleetSpec("survey_Q4", FleetKind.SURVEY, sigma_obs=0.25, ages=(1, 2, 3, 4, 5),
                  catchability=(1e-3, 2e-3, 2.5e-3, 2.5e-3, 2.5e-3), timing=0.8),
    )


@dataclass(frozen=True)
class SimConfig:
    age_range: AgeRange = AgeRange(1, 8, True)
    n_years: int = 40
    first_year: int = 1980
    bh_alpha: float = 3.0
    bh_beta: float = 1.5e-5
    natural_mortality: float = 0.2
    selectivity: tuple[float, ...] = tuple(logistic_selectivity(range(1, 9), 2.5, 1.5).round(4))
    weight: tuple[float, ...] = (0.05, 0.25, 0.6, 1.0, 1.5, 2.0, 2.4, 2.8)
    maturity: tuple[float, ...] = (0.05, 0.3, 0.7, 0.95, 1.0, 1.0, 1.0, 1.0)
    f_init: float = 0.4
    sigma_f: float = 0.1
    f_reversion: float = 0.0  # 0 gives a pure random walk in log f
    f_path: tuple[float, ...] | None = None
    sigma_proc: float = 0.05
    sigma_rec: float = 0.3
    fleets: tuple[FleetSpec, ...] = field(default_factory=_default_fleets)
    environment: EnvironmentSpec | None = None
    seed: int = 0

    def __post_init__(self):
        a = self.age_range.n_ages
        for name in ("selectivity", "weight", "maturity"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != a:
                raise ConfigError(f"{name} needs {a} values, got {len(vals)}")
            object.__setattr__(self, name, vals)
        object.__setattr__(self, "fleets", tuple(self.fleets))
        if self.n_years < 10:
            raise ConfigError("n_years must be >= 10")
        if self.bh_alpha <= 0 or self.bh_beta <= 0:
            raise ConfigError("Beverton-Holt alpha and beta must be positive")
        if min(self.sigma_f, self.sigma_proc, self.sigma_rec) < 0 or self.natural_mortality < 0:
            raise ConfigError("noise scales and natural mortality must be >= 0")
        if not all(0 <= s <= 1 for s in self.selectivity):
            raise ConfigError("selectivity must lie in [0, 1]")
        if not 0 <= self.f_reversion <= 1:
            raise ConfigError("f_reversion must lie in [0, 1]")
        if self.f_path is not None:
            path = tuple(float(v) for v in self.f_path)
            if len(path) != self.n_years or min(path) < 0:
                raise ConfigError("f_path needs n_years non-negative values")
            object.__setattr__(self, "f_path", path)
        ages = set(self.age_range.ages.tolist())
        for fl in self.fleets:
            fl_ages = fl.ages or tuple(sorted(ages))
            if not set(fl_ages) <= ages:
                raise ConfigError(f"fleet {fl.name} covers ages outside the model")
            if fl.catchability is not None and len(fl.catchability) != len(fl_ages):
                raise ConfigError(f"fleet {fl.name}: one catchability per covered age")
        kinds = {fl.kind for fl in self.fleets}
        if kinds != {FleetKind.COMMERCIAL_CATCH, FleetKind.SURVEY}:
            raise ConfigError("need at least one catch fleet and one survey")
        if self.environment is not None and self.environment_fleet() is None:
            raise ConfigError("environment survey fleet not found")

    @property
    def last_year(self) -> int:
        return self.first_year + self.n_years - 1

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def environment_fleet(self) -> str | None:
        env = self.environment
        if env is None:
            return None
        surveys = [f.name for f in self.fleets if f.kind is FleetKind.SURVEY]
        if env.survey_fleet is None:
            return surveys[0]
        return env.survey_fleet if env.survey_fleet in surveys else None

    def biology(self) -> BiologySeries:
        return BiologySeries.constant(self.first_year, self.n_years, self.age_range,
                                      self.weight, self.maturity, self.natural_mortality)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["age_range"] = dataclasses.asdict(self.age_range)
        d["fleets"] = [
            {k: (v.value if isinstance(v, FleetKind) else (list(v) if isinstance(v, tuple) else v))
             for k, v in dataclasses.asdict(fl).items()}
            for fl in self.fleets
        ]
        for key in ("selectivity", "weight", "maturity", "f_path"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulation keys: {sorted(unknown)}")
        if "age_range" in d:
            d["age_range"] = AgeRange(**d["age_range"])
        if "fleets" in d:
            d["fleets"] = tuple(
                FleetSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in fl.items()})
                for fl in d["fleets"])
        if d.get("environment") is not None:
            d["environment"] = EnvironmentSpec(**d["environment"])
        for key in ("selectivity", "weight", "maturity", "f_path"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class TrueTrajectory:
    abundance: AbundanceMatrix
    fishing_mortality: np.ndarray  # (years, ages)
    fishing_intensity: np.ndarray  # f_t
    environment: np.ndarray  # e_t, zeros without an environment
    recruitment: StockParameterSeries
    ssb: StockParameterSeries


def beverton_holt(ssb, alpha: float, beta: float):
    """Expected recruits (thousands) from spawning biomass (tonnes)."""
    s = np.asarray(ssb, dtype=float)
    if np.any(s < 0):
        raise DomainError("ssb must be non-negative")
    out = alpha * s / (1.0 + beta * s)
    return float(out) if out.ndim == 0 else out


def _stream(seed: int, component: str) -> np.random.Generator:
    # stable per-component key so toggling one noise source leaves the others untouched
    key = int.from_bytes(hashlib.sha1(component.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))


def _ssb_values(n: np.ndarray, cfg: SimConfig) -> float:
    return float(np.sum(np.asarray(cfg.weight) * np.asarray(cfg.maturity) * n))


def step_population(n: AbundanceVector, fishing_mortality, cfg: SimConfig,
                    rng: np.random.Generator | None = None, environment: float = 0.0,
                    rec_rng: np.random.Generator | None = None) -> AbundanceVector:
    """Advance numbers-at-age one year.

    ``rng`` draws survival noise; ``rec_rng`` (defaults to ``rng``) draws the
    recruitment deviation. Without generators the step is deterministic.
    """
    values = n.values
    if np.any(values < 0):
        raise DomainError("abundance must be non-negative")
    a = values.size
    f = np.broadcast_to(np.asarray(fishing_mortality, dtype=float), (a,))
    z = f + cfg.natural_mortality
    rec_rng = rec_rng if rec_rng is not None else rng
    eps = rng.normal(0.0, 1.0, size=a - 1) * cfg.sigma_proc if rng is not None else np.zeros(a - 1)
    eta = rec_rng.normal() * cfg.sigma_rec if rec_rng is not None else 0.0

    out = np.empty(a)
    with np.errstate(divide="ignore"):
        out[1:] = values[:-1] * np.exp(-z[:-1])
        if n.age_range.plus_group:
            out[-1] += values[-1] * np.exp(-z[-1])
    out[1:] *= np.exp(eps)
    env = cfg.environment
    load = env.recruitment_loading * environment if env is not None else 0.0
    out[0] = beverton_holt(_ssb_values(values, cfg), cfg.bh_alpha, cfg.bh_beta) * np.exp(load + eta)
    return AbundanceVector(n.year + 1, out, n.age_range)


def equilibrium(cfg: SimConfig, f: float | None = None) -> np.ndarray:
    """Noise-free fixed point of the dynamics at constant fishing intensity."""
    f = cfg.f_init if f is None else f
    fm = f * np.asarray(cfg.selectivity)
    n = AbundanceVector(0, np.full(cfg.age_range.n_ages, cfg.bh_alpha / cfg.bh_beta), cfg.age_range)
    for _ in range(MAX_WARMUP_YEARS):
        nxt = step_population(n, fm, cfg)
        if np.allclose(nxt.values, n.values, rtol=1e-13, atol=0.0):
            if nxt.values[0] <= 0 or not np.all(np.isfinite(nxt.values)):
                break
            return nxt.values.copy()
        n = nxt
        if n.values[0] < 1e-300:
            break
    raise ConfigError(f"no positive equilibrium within {MAX_WARMUP_YEARS} years at f={f}")


def _fishing_path(cfg: SimConfig) -> np.ndarray:
    if cfg.f_path is not None:
        return np.asarray(cfg.f_path, dtype=float)
    rng = _stream(cfg.seed, "fishing")
    shocks = rng.normal(0.0, 1.0, size=cfg.n_years) * cfg.sigma_f
    target = np.log(cfg.f_init)
    logf = np.empty(cfg.n_years)
    logf[0] = target
    for t in range(1, cfg.n_years):
        logf[t] = logf[t - 1] + cfg.f_reversion * (target - logf[t - 1]) + shocks[t]
    return np.exp(logf)


def _environment_path(cfg: SimConfig) -> np.ndarray:
    env = cfg.environment
    if env is None:
        return np.zeros(cfg.n_years)
    rng = _stream(cfg.seed, "environment")
    shocks = rng.normal(0.0, 1.0, size=cfg.n_years)
    e = np.empty(cfg.n_years)
    e[0] = shocks[0] * env.sigma_env / np.sqrt(1.0 - env.phi ** 2)
    for t in range(1, cfg.n_years):
        e[t] = env.phi * e[t - 1] + env.sigma_env * shocks[t]
    return e


def generate_observations(truth: TrueTrajectory, cfg: SimConfig,
                          rng: np.random.Generator | None = None) -> ObservationSeries:
    """Log-normal catch-at-age and survey indices from the true state.

    With ``rng`` given every fleet draws from it; otherwise each fleet gets
    its own stream derived from the config seed.
    """
    ar = cfg.age_range
    n = truth.abundance.values
    fm = truth.fishing_mortality
    m = cfg.natural_mortality
    env_fleet = cfg.environment_fleet()
    fleets = []
    for spec in cfg.fleets:
        ages = spec.ages or tuple(ar.ages.tolist())
        idx = [ar.index(a) for a in ages]
        g = rng if rng is not None else _stream(cfg.seed, f"fleet:{spec.name}")
        noise = g.normal(0.0, 1.0, size=(cfg.n_years, len(idx))) * spec.sigma_obs
        if spec.kind is FleetKind.COMMERCIAL_CATCH:
            log_mean = np.log(baranov_catch(n[:, idx], fm[:, idx], m))
        else:
            log_mean = (np.log(spec.catchability)[None, :] + np.log(n[:, idx])
                        - spec.timing * (fm[:, idx] + m))
            if spec.name == env_fleet:
                log_mean = log_mean + cfg.environment.survey_loading * truth.environment[:, None]
        fleets.append(FleetObservation(spec.name, spec.kind, cfg.first_year,
                                       np.exp(log_mean + noise), ages, spec.timing))
    return ObservationSeries(tuple(fleets), cfg.first_year, cfg.last_year)


def simulate(cfg: SimConfig) -> tuple[TrueTrajectory, ObservationSeries, BiologySeries]:
    """Run the stock forward from its noise-free equilibrium; deterministic in ``cfg.seed``."""
    ar = cfg.age_range
    f_t = _fishing_path(cfg)
    e_t = _environment_path(cfg)
    sel = np.asarray(cfg.selectivity)
    fm = f_t[:, None] * sel[None, :]
    proc_rng = _stream(cfg.seed, "process")
    rec_rng = _stream(cfg.seed, "recruitment")

    n = np.empty((cfg.n_years, ar.n_ages))
    n[0] = equilibrium(cfg, f_t[0])
    vec = AbundanceVector(cfg.first_year, n[0], ar)
    for t in range(1, cfg.n_years):
        vec = step_population(vec, fm[t - 1], cfg, proc_rng, e_t[t - 1], rec_rng)
        n[t] = vec.values
    abundance = AbundanceMatrix(cfg.first_year, n, ar)
    years = range(cfg.first_year, cfg.last_year + 1)
    rec = StockParameterSeries(ParameterKind.RECRUITMENT, dict(zip(years, n[:, 0])))
    ssb = StockParameterSeries(ParameterKind.SSB,
                               dict(zip(years, (_ssb_values(row, cfg) for row in n))))
    truth = TrueTrajectory(abundance, fm, f_t, e_t, rec, ssb)
    return truth, generate_observations(truth, cfg), cfg.biology()


def default_config(seed: int = 0, environment: bool = False, **changes) -> SimConfig:
    """The reference stock used by the CLI defaults and the test suite.

    ``environment=True`` switches on the recruitment/survey driver that the
    assessment model does not know about.
    """
    cfg = SimConfig(seed=seed, f_reversion=0.2,
                    environment=EnvironmentSpec() if environment else None)
    return cfg.replace(**changes) if changes else cfg
