"""Domain types and closed-form fisheries arithmetic shared by every module.

Units are fixed throughout the package: abundance in thousands of fish,
weight-at-age in kg, and spawning stock biomass in tonnes (thousands x kg).
Missing observation cells are stored as NaN, which the tree learner routes on.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING = math.nan


class StockError(Exception):
    """Base class for errors raised by this package."""


class DomainError(StockError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class MissingDataError(StockError, KeyError):
    """A required year, file or record is absent."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class SchemaError(StockError, ValueError):
    """Feature names or file layouts violate their schema."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AgeRange:
    min_age: int = 1
    max_age: int = 8
    plus_group: bool = True

    def __post_init__(self):
        if self.min_age < 0:
            raise DomainError(f"min_age must be >= 0, got {self.min_age}")
        if self.max_age <= self.min_age:
            raise DomainError(f"max_age ({self.max_age}) must exceed min_age ({self.min_age})")

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.min_age, self.max_age + 1)

    @property
    def n_ages(self) -> int:
        return self.max_age - self.min_age + 1

    def index(self, age: int) -> int:
        if not self.min_age <= age <= self.max_age:
            raise DomainError(f"age {age} outside {self.min_age}..{self.max_age}")
        return age - self.min_age


@dataclass(frozen=True)
class AbundanceVector:
    """Numbers-at-age (thousands) for one year."""

    year: int
    values: np.ndarray
    age_range: AgeRange

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != (self.age_range.n_ages,):
            raise SchemaError(f"expected {self.age_range.n_ages} ages, got shape {vals.shape}")
        if np.any(vals < 0):
            raise DomainError("abundance must be non-negative")
        object.__setattr__(self, "values", vals)

    def __getitem__(self, age: int) -> float:
        return float(self.values[self.age_range.index(age)])

    def scaled(self, factor: float) -> "AbundanceVector":
        return AbundanceVector(self.year, self.values * factor, self.age_range)


@dataclass(frozen=True)
class AbundanceMatrix:
    """Numbers-at-age over a contiguous year range, shape (years, ages)."""

    first_year: int
    values: np.ndarray
    age_range: AgeRange

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim != 2 or vals.shape[1] != self.age_range.n_ages:
            raise SchemaError(f"abundance matrix shape {vals.shape} does not match ages")
        if np.any(vals < 0):
            raise DomainError("abundance must be non-negative")
        object.__setattr__(self, "values", vals)

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.first_year, self.first_year + self.values.shape[0])

    @property
    def last_year(self) -> int:
        return self.first_year + self.values.shape[0] - 1

    def row(self, year: int) -> AbundanceVector:
        i = year - self.first_year
        if not 0 <= i < self.values.shape[0]:
            raise MissingDataError(f"year {year} not in {self.first_year}..{self.last_year}")
        return AbundanceVector(year, self.values[i], self.age_range)

    def __iter__(self):
        for y in self.years:
            yield self.row(int(y))


@dataclass(frozen=True)
class BiologySeries:
    """Weight (kg), maturity fraction and natural mortality per (year, age)."""

    first_year: int
    age_range: AgeRange
    weight: np.ndarray
    maturity: np.ndarray
    natural_mortality: np.ndarray

    def __post_init__(self):
        shape = None
        for name in ("weight", "maturity", "natural_mortality"):
            arr = _frozen(getattr(self, name))
            if arr.ndim != 2 or arr.shape[1] != self.age_range.n_ages:
                raise SchemaError(f"{name} has shape {arr.shape}, expected (years, {self.age_range.n_ages})")
            if shape is not None and arr.shape != shape:
                raise SchemaError("biology arrays must share one shape")
            shape = arr.shape
            object.__setattr__(self, name, arr)
        if np.any(self.weight <= 0):
            raise DomainError("weights must be positive")
        if np.any((self.maturity < 0) | (self.maturity > 1)):
            raise DomainError("maturity must lie in [0, 1]")
        if np.any(self.natural_mortality < 0):
            raise DomainError("natural mortality must be non-negative")

    @classmethod
    def constant(cls, first_year: int, n_years: int, age_range: AgeRange,
                 weight: Sequence[float], maturity: Sequence[float],
                 natural_mortality: float | Sequence[float]) -> "BiologySeries":
        a = age_range.n_ages
        m = np.broadcast_to(np.asarray(natural_mortality, dtype=float), (a,))
        tile = lambda v: np.tile(np.asarray(v, dtype=float), (n_years, 1))
        return cls(first_year, age_range, tile(weight), tile(maturity), tile(m))

    @property
    def last_year(self) -> int:
        return self.first_year + self.weight.shape[0] - 1

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.first_year, self.last_year + 1)

    def has_year(self, year: int) -> bool:
        return self.first_year <= year <= self.last_year

    def _index(self, year: int) -> int:
        if not self.has_year(year):
            raise MissingDataError(f"biology has no data for year {year} "
                                   f"(covers {self.first_year}..{self.last_year})")
        return year - self.first_year

    def at(self, year: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        i = self._index(year)
        return self.weight[i], self.maturity[i], self.natural_mortality[i]

    def span(self, first_year: int, last_year: int) -> "BiologySeries":
        i, j = self._index(first_year), self._index(last_year)
        return BiologySeries(first_year, self.age_range, self.weight[i:j + 1],
                             self.maturity[i:j + 1], self.natural_mortality[i:j + 1])

    def truncated(self, last_year: int) -> "BiologySeries":
        return self.span(self.first_year, last_year)

    def extended(self, last_year: int) -> "BiologySeries":
        """Carry the final year's values forward to ``last_year``."""
        extra = last_year - self.last_year
        if extra <= 0:
            return self
        pad = lambda arr: np.vstack([arr, np.repeat(arr[-1:], extra, axis=0)])
        return BiologySeries(self.first_year, self.age_range, pad(self.weight),
                             pad(self.maturity), pad(self.natural_mortality))


class FleetKind(str, enum.Enum):
    COMMERCIAL_CATCH = "commercial_catch"
    SURVEY = "survey"


@dataclass(frozen=True)
class FleetObservation:
    """One data source. ``ages=None`` marks an index that is not age-stratified.

    ``values`` has shape (years, len(ages)) or (years, 1) when unstratified;
    NaN marks a missing cell.
    """

    name: str
    kind: FleetKind
    first_year: int
    values: np.ndarray
    ages: tuple[int, ...] | None
    timing: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FleetKind(self.kind))
        if self.ages is not None:
            object.__setattr__(self, "ages", tuple(int(a) for a in self.ages))
        vals = _frozen(self.values)
        width = 1 if self.ages is None else len(self.ages)
        if vals.ndim != 2 or vals.shape[1] != width:
            raise SchemaError(f"fleet {self.name}: values shape {vals.shape}, expected (years, {width})")
        present = vals[~np.isnan(vals)]
        if np.any(present <= 0):
            raise DomainError(f"fleet {self.name}: observations must be positive")
        if self.kind is FleetKind.SURVEY:
            if self.timing is None or not 0.0 <= self.timing <= 1.0:
                raise DomainError(f"survey {self.name}: timing must lie in [0, 1]")
        elif self.timing is not None:
            raise DomainError(f"catch fleet {self.name} must not carry a survey timing")
        object.__setattr__(self, "values", vals)

    @property
    def last_year(self) -> int:
        return self.first_year + self.values.shape[0] - 1

    @property
    def stratified(self) -> bool:
        return self.ages is not None

    def row(self, year: int) -> np.ndarray:
        i = year - self.first_year
        if not 0 <= i < self.values.shape[0]:
            return np.full(self.values.shape[1], MISSING)
        return self.values[i]

    def truncated(self, last_year: int) -> "FleetObservation":
        n = max(0, last_year - self.first_year + 1)
        return FleetObservation(self.name, self.kind, self.first_year, self.values[:n],
                                self.ages, self.timing)

    def scaled(self, factor: float) -> "FleetObservation":
        return FleetObservation(self.name, self.kind, self.first_year, self.values * factor,
                                self.ages, self.timing)


@dataclass(frozen=True)
class ObservationSeries:
    fleets: tuple[FleetObservation, ...]
    first_year: int
    last_year: int

    def __post_init__(self):
        fleets = tuple(self.fleets)
        object.__setattr__(self, "fleets", fleets)
        names = [f.name for f in fleets]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate fleet names: {names}")
        kinds = {f.kind for f in fleets}
        if FleetKind.COMMERCIAL_CATCH not in kinds or FleetKind.SURVEY not in kinds:
            raise SchemaError("observations need at least one catch fleet and one survey fleet")
        if self.last_year < self.first_year:
            raise SchemaError("empty year range")
        for f in fleets:
            if f.first_year < self.first_year or f.last_year > self.last_year:
                raise SchemaError(f"fleet {f.name} extends outside {self.first_year}..{self.last_year}")

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.first_year, self.last_year + 1)

    @property
    def n_years(self) -> int:
        return self.last_year - self.first_year + 1

    def fleet(self, name: str) -> FleetObservation:
        for f in self.fleets:
            if f.name == name:
                return f
        raise MissingDataError(f"no fleet named {name!r}")

    def truncated(self, last_year: int) -> "ObservationSeries":
        if last_year > self.last_year:
            raise MissingDataError(f"cannot truncate to {last_year}; data end in {self.last_year}")
        return ObservationSeries(tuple(f.truncated(last_year) for f in self.fleets),
                                 self.first_year, last_year)

    def replace_fleet(self, fleet: FleetObservation) -> "ObservationSeries":
        fleets = tuple(fleet if f.name == fleet.name else f for f in self.fleets)
        return ObservationSeries(fleets, self.first_year, self.last_year)

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for f in sorted(self.fleets, key=lambda f: f.name):
            h.update(repr((f.name, f.kind.value, f.first_year, f.ages, f.timing)).encode())
            h.update(np.ascontiguousarray(f.values).tobytes())
        h.update(repr((self.first_year, self.last_year)).encode())
        return h.hexdigest()


class ParameterKind(str, enum.Enum):
    RECRUITMENT = "recruitment"
    SSB = "ssb"


@dataclass(frozen=True)
class StockParameterSeries:
    """Recruitment (thousands) or SSB (tonnes) keyed by year."""

    kind: ParameterKind
    values: Mapping[int, float]

    def __post_init__(self):
        object.__setattr__(self, "kind", ParameterKind(self.kind))
        vals = {int(y): float(v) for y, v in sorted(self.values.items())}
        if any(v < 0 for v in vals.values()):
            raise DomainError("stock parameters must be non-negative")
        object.__setattr__(self, "values", vals)

    @property
    def years(self) -> list[int]:
        return list(self.values)

    def __getitem__(self, year: int) -> float:
        try:
            return self.values[year]
        except KeyError:
            raise MissingDataError(f"no {self.kind.value} value for year {year}") from None

    def __contains__(self, year: int) -> bool:
        return year in self.values


@dataclass(frozen=True)
class FeatureVector:
    names: tuple[str, ...]
    values: np.ndarray
    schema_id: str = field(default="")

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate feature names: {dupes}")
        vals = _frozen(self.values)
        if vals.shape != (len(names),):
            raise SchemaError("feature names and values differ in length")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", vals)
        if not self.schema_id:
            object.__setattr__(self, "schema_id", schema_id_for(names))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (self.names == other.names and self.schema_id == other.schema_id
                and np.array_equal(self.values, other.values, equal_nan=True))

    __hash__ = None

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def schema_id_for(names: Iterable[str]) -> str:
    digest = hashlib.sha1("\x1f".join(names).encode()).hexdigest()[:12]
    return f"fv1-{digest}"


def ssb(n: AbundanceVector, bio: BiologySeries) -> float:
    """Spawning stock biomass in tonnes."""
    weight, maturity, _ = bio.at(n.year)
    return float(np.sum(weight * maturity * n.values))


def recruitment_of(n: AbundanceVector) -> float:
    """Abundance of the youngest modelled age class."""
    return float(n.values[0])


def baranov_catch(n, fishing_mortality, natural_mortality) -> np.ndarray:
    """Catch in numbers over one year from abundance at the start of that year."""
    n = np.asarray(n, dtype=float)
    f = np.asarray(fishing_mortality, dtype=float)
    m = np.asarray(natural_mortality, dtype=float)
    if np.any(n < 0) or np.any(f < 0) or np.any(m < 0):
        raise DomainError("baranov_catch needs non-negative n, F and M")
    n, f, m = np.broadcast_arrays(n, f, m)
    z = f + m
    out = np.zeros(n.shape)
    pos = z > 0
    # -expm1(-z) keeps precision for small z
    out[pos] = f[pos] / z[pos] * (-np.expm1(-z[pos])) * n[pos]
    return out


def flatten_features(abundance: AbundanceVector | None = None,
                     parameters: Mapping[str, float] | None = None,
                     observations: ObservationSeries | Sequence[FleetObservation] | None = None,
                     year: int | None = None) -> FeatureVector:
    """Lay out model estimates and one year of observations as named features.

    Order: parameter estimates (``REC_hat``, ``SSB_hat``, then any others by
    name), ``N_a<age>`` ascending, then fleets sorted by name with
    ``<fleet>_a<age>`` ascending (or bare ``<fleet>`` for unstratified
    indices). Missing observation cells become NaN.
    """
    names: list[str] = []
    values: list[float] = []
    if parameters:
        fixed = [k for k in ("REC_hat", "SSB_hat") if k in parameters]
        rest = sorted(k for k in parameters if k not in fixed)
        for key in fixed + rest:
            names.append(key)
            values.append(float(parameters[key]))
    if abundance is not None:
        for age, v in zip(abundance.age_range.ages, abundance.values):
            names.append(f"N_a{age}")
            values.append(float(v))
    if observations is not None:
        if year is None:
            raise SchemaError("observations need the year to flatten")
        fleets = observations.fleets if isinstance(observations, ObservationSeries) else tuple(observations)
        for fleet in sorted(fleets, key=lambda f: f.name):
            row = fleet.row(year)
            if fleet.stratified:
                for age, v in zip(fleet.ages, row):
                    names.append(f"{fleet.name}_a{age}")
                    values.append(float(v))
            else:
                names.append(fleet.name)
                values.append(float(row[0]))
    return FeatureVector(tuple(names), np.asarray(values, dtype=float))
