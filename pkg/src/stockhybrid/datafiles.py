"""Long-form delimited data files.

observations.csv  fleet,kind,timing,year,age,value   (age empty for unstratified indices)
biology.csv       quantity,year,age,value            (quantity: weight|maturity|natural_mortality)
truth.csv         quantity,year,age,value            (simulated trajectory, age empty for scalars)

Values are written in shortest round-trip form; ``NA`` marks a missing cell.
Loading keeps the (file, line) of every cell so errors point at their source.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from stockhybrid.core import (AgeRange, BiologySeries, DomainError, FleetKind, FleetObservation,
                              ObservationSeries, SchemaError, StockError)

OBS_COLUMNS = ("fleet", "kind", "timing", "year", "age", "value")
BIO_COLUMNS = ("quantity", "year", "age", "value")
BIO_ROLES = ("weight", "maturity", "natural_mortality")
NA = "NA"


class InputError(SchemaError):
    """A malformed cell, reported with its file, line and column."""

    def __init__(self, path, line: int, column: str | None, message: str):
        self.path, self.line, self.column = str(path), line, column
        where = f"{path}:{line}" + (f": column '{column}'" if column else "")
        super().__init__(f"{where}: {message}")


class MissingInputError(StockError, FileNotFoundError):
    def __init__(self, role: str, detail: str):
        self.role = role
        super().__init__(f"missing input for {role}: {detail}")

    def __str__(self) -> str:
        return self.args[0]


def fmt(value: float) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return NA
    return repr(float(value))


def atomic_write(path: str | os.PathLike, text: str | bytes) -> None:
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode() if isinstance(text, str) else text
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_delimited(header: Iterable[str], rows: Iterable[Iterable], delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def observation_rows(obs: ObservationSeries):
    for fl in obs.fleets:
        timing = "" if fl.timing is None else fmt(fl.timing)
        ages = fl.ages if fl.stratified else (None,)
        for i, year in enumerate(range(fl.first_year, fl.last_year + 1)):
            for j, age in enumerate(ages):
                yield (fl.name, fl.kind.value, timing, year, "" if age is None else age,
                       fmt(fl.values[i, j]))


def write_observations(obs: ObservationSeries, path) -> None:
    atomic_write(path, to_delimited(OBS_COLUMNS, observation_rows(obs)))


def write_biology(bio: BiologySeries, path) -> None:
    rows = []
    for role in BIO_ROLES:
        arr = getattr(bio, role)
        for i, year in enumerate(bio.years):
            for j, age in enumerate(bio.age_range.ages):
                rows.append((role, int(year), int(age), fmt(arr[i, j])))
    atomic_write(path, to_delimited(BIO_COLUMNS, rows))


def write_truth(truth, path) -> None:
    """Simulated trajectory: numbers and F at age, then the yearly scalars."""
    rows = []
    years = truth.abundance.years
    ages = truth.abundance.age_range.ages
    for name, arr in (("abundance", truth.abundance.values), ("fishing_mortality", truth.fishing_mortality)):
        for i, year in enumerate(years):
            for j, age in enumerate(ages):
                rows.append((name, int(year), int(age), fmt(arr[i, j])))
    for i, year in enumerate(years):
        rows.append(("fishing_intensity", int(year), "", fmt(truth.fishing_intensity[i])))
        rows.append(("environment", int(year), "", fmt(truth.environment[i])))
        rows.append(("recruitment", int(year), "", fmt(truth.recruitment[int(year)])))
        rows.append(("ssb", int(year), "", fmt(truth.ssb[int(year)])))
    atomic_write(path, to_delimited(BIO_COLUMNS, rows))


def _read(path, columns: tuple[str, ...], role: str):
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(role, f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(path, 1, None, "empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise InputError(path, 1, None, f"header lacks columns {missing}; expected {list(columns)}")
        idx = {c: header.index(c) for c in columns}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(path, line, None, f"expected {len(header)} fields, got {len(row)}")
            yield line, {c: row[idx[c]].strip() for c in columns}


def _int(path, line, column, text) -> int:
    try:
        return int(text)
    except ValueError:
        raise InputError(path, line, column, f"expected an integer, got {text!r}") from None


def _float(path, line, column, text) -> float:
    if text == NA:
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise InputError(path, line, column, f"expected a number or {NA}, got {text!r}") from None
    if math.isnan(v) or math.isinf(v):
        raise InputError(path, line, column, f"non-finite value {text!r}; use {NA} for missing")
    return v


@dataclass(frozen=True)
class LoadedData:
    observations: ObservationSeries
    biology: BiologySeries
    provenance: Mapping[tuple, tuple[str, int]]  # (fleet or quantity, year, age) -> (file, line)


def load_observations(path) -> tuple[ObservationSeries, dict]:
    cells: dict[str, dict] = {}
    meta: dict[str, tuple] = {}
    prov: dict[tuple, tuple[str, int]] = {}
    for line, rec in _read(path, OBS_COLUMNS, "observations"):
        name = rec["fleet"]
        if not name:
            raise InputError(path, line, "fleet", "empty fleet name")
        try:
            kind = FleetKind(rec["kind"])
        except ValueError:
            raise InputError(path, line, "kind", f"unknown kind {rec['kind']!r}; "
                             f"expected one of {[k.value for k in FleetKind]}") from None
        timing = None if rec["timing"] in ("", NA) else _float(path, line, "timing", rec["timing"])
        year = _int(path, line, "year", rec["year"])
        age = None if rec["age"] == "" else _int(path, line, "age", rec["age"])
        value = _float(path, line, "value", rec["value"])
        if not math.isnan(value) and value <= 0:
            raise InputError(path, line, "value", f"observations must be positive (log-scale model), got {value}")
        if name in meta and meta[name] != (kind, timing, age is None):
            raise InputError(path, line, None, f"fleet {name!r} changes kind, timing or stratification")
        meta.setdefault(name, (kind, timing, age is None))
        key = (name, year, age)
        if key in prov:
            raise InputError(path, line, None, f"duplicate cell {key}, first at line {prov[key][1]}")
        prov[key] = (str(path), line)
        cells.setdefault(name, {})[(year, age)] = value
    if not cells:
        raise InputError(path, 2, None, "no observation records")
    fleets = []
    for name, vals in cells.items():
        kind, timing, unstratified = meta[name]
        years = sorted({y for y, _ in vals})
        ages = None if unstratified else tuple(sorted({a for _, a in vals}))
        width = 1 if ages is None else len(ages)
        arr = np.full((years[-1] - years[0] + 1, width), math.nan)
        for (y, a), v in vals.items():
            arr[y - years[0], 0 if ages is None else ages.index(a)] = v
        try:
            fleets.append(FleetObservation(name, kind, years[0], arr, ages, timing))
        except (SchemaError, DomainError) as exc:
            first = min(line for (f, _, _), (_, line) in prov.items() if f == name)
            raise InputError(path, first, None, str(exc)) from None
    first = min(f.first_year for f in fleets)
    last = max(f.last_year for f in fleets)
    try:
        obs = ObservationSeries(tuple(fleets), first, last)
    except SchemaError as exc:
        raise InputError(path, 1, None, str(exc)) from None
    return obs, prov


def load_biology(paths: Mapping[str, str | os.PathLike], plus_group: bool = True) -> tuple[BiologySeries, dict]:
    """Biology from one combined file (key ``biology``) and/or one file per role.

    Every role in weight/maturity/natural_mortality must be supplied by some file.
    """
    found: dict[str, dict[tuple[int, int], float]] = {r: {} for r in BIO_ROLES}
    prov: dict[tuple, tuple[str, int]] = {}
    sources = []
    if paths.get("biology"):
        sources.append(("biology", paths["biology"]))
    sources += [(r, paths[r]) for r in BIO_ROLES if paths.get(r)]
    for role, path in sources:
        for line, rec in _read(path, BIO_COLUMNS, role):
            q = rec["quantity"]
            if q not in BIO_ROLES:
                raise InputError(path, line, "quantity", f"unknown quantity {q!r}; expected {list(BIO_ROLES)}")
            if role != "biology" and q != role:
                raise InputError(path, line, "quantity", f"file given for {role} holds {q}")
            year = _int(path, line, "year", rec["year"])
            age = _int(path, line, "age", rec["age"])
            value = _float(path, line, "value", rec["value"])
            if math.isnan(value):
                raise InputError(path, line, "value", "biology cells may not be missing")
            key = (q, year, age)
            if key in prov:
                raise InputError(path, line, None, f"duplicate cell {key}, first at line {prov[key][1]}")
            prov[key] = (str(path), line)
            found[q][(year, age)] = value
    for role in BIO_ROLES:
        if not found[role]:
            raise MissingInputError(role, "no file supplies it" if not sources else
                                    f"no {role} records in {[str(p) for _, p in sources]}")
    keys = set(found["weight"])
    years = sorted({y for y, _ in keys})
    ages = sorted({a for _, a in keys})
    full = {(y, a) for y in range(years[0], years[-1] + 1) for a in range(ages[0], ages[-1] + 1)}
    for role in BIO_ROLES:
        if set(found[role]) != full:
            gap = sorted(full ^ set(found[role]))[0]
            raise MissingInputError(role, f"grid {years[0]}..{years[-1]} x ages {ages[0]}..{ages[-1]} "
                                    f"incomplete or inconsistent, e.g. year {gap[0]} age {gap[1]}")
    ar = AgeRange(ages[0], ages[-1], plus_group)
    arrays = {}
    for role in BIO_ROLES:
        arr = np.empty((years[-1] - years[0] + 1, ar.n_ages))
        for (y, a), v in found[role].items():
            arr[y - years[0], a - ar.min_age] = v
        arrays[role] = arr
    try:
        bio = BiologySeries(years[0], ar, **arrays)
    except (SchemaError, DomainError) as exc:
        raise InputError(sources[0][1], 1, None, str(exc)) from None
    return bio, prov


def load_dataset(observations, biology: Mapping[str, str | os.PathLike] | str | os.PathLike,
                 plus_group: bool = True) -> LoadedData:
    if isinstance(biology, (str, os.PathLike)):
        biology = {"biology": biology}
    obs, prov = load_observations(observations)
    bio, bprov = load_biology(biology, plus_group)
    return LoadedData(obs, bio, {**prov, **bprov})
