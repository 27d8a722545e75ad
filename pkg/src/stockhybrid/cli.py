"""Command-line workflow: simulate | assess | retro | backtest | shap | report.

Configuration is a YAML file with nested sections::

    stock: simulated
    seed: 0
    k: 17
    out: out
    simulation: {environment: true}          # or, instead of simulation:
    data: {observations: obs.csv, biology: biology.csv}
    assessor: {restarts: 3}
    gbt: {nrounds: 60}
    tasks:
      - {task: forecast, target: recruitment}
      - {task: forecast, target: ssb}         # both SSB feature variants

Exit status is 0 when every requested task produced its output, 1 when some
task failed, 2 on usage, configuration or input-file errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from stockhybrid import assessor, gbt, hybrid, shap
from stockhybrid.assessor import AssessmentCache, AssessorConfig
from stockhybrid.core import ObservationSeries, ParameterKind, StockError, recruitment_of, ssb
from stockhybrid.datafiles import (BIO_ROLES, InputError, MissingInputError, atomic_write, fmt, load_dataset,
                                   to_delimited, write_biology, write_observations, write_truth)
from stockhybrid.simulator import SimConfig, default_config, simulate

REPORT_COLUMNS = ("stock", "task", "target", "feature_variant", "label_policy", "correction", "k",
                  "rows", "skipped", "ml_rmse", "ml_r2", "baseline_rmse", "baseline_r2",
                  "leakage_violations")
ROW_COLUMNS = ("stock", "task", "target", "feature_variant", "year", "target_year",
               "baseline", "hybrid", "label", "truth")


class ConfigError(StockError, ValueError):
    pass


@dataclass(frozen=True)
class DataPaths:
    observations: Path
    biology: dict[str, Path]
    plus_group: bool = True


def _default_tasks() -> tuple[hybrid.TaskSpec, ...]:
    return tuple(s for task in hybrid.Task for target in ParameterKind
                 for s in hybrid.task_specs(task, target))


@dataclass(frozen=True)
class RunConfig:
    stock: str = "simulated"
    seed: int = 0
    k: int = hybrid.DEFAULT_K
    out: Path = Path("out")
    data: DataPaths | None = None
    simulation: SimConfig | None = None
    assessor: AssessorConfig = AssessorConfig()
    gbt: gbt.GbtHyperParams = gbt.GbtHyperParams()
    tasks: tuple[hybrid.TaskSpec, ...] = field(default_factory=_default_tasks)
    retro_peels: int = 5
    figures: bool = True

    def __post_init__(self):
        if self.data is not None and self.simulation is not None:
            raise ConfigError("give either a data section or a simulation section, not both")
        if self.data is None and self.simulation is None:
            object.__setattr__(self, "simulation", default_config(self.seed))
        if self.simulation is not None and self.simulation.seed != self.seed:
            object.__setattr__(self, "simulation", self.simulation.replace(seed=self.seed))
        if self.assessor.seed != self.seed:
            object.__setattr__(self, "assessor", dataclasses.replace(self.assessor, seed=self.seed))
        if self.data is not None:
            if not self.data.observations.is_file():
                raise MissingInputError("observations", f"file not found: {self.data.observations}")
            for role, p in self.data.biology.items():
                if not p.is_file():
                    raise MissingInputError(role, f"file not found: {p}")
        if self.k < 5:
            raise ConfigError("k must be >= 5")

    def with_overrides(self, seed=None, k=None, out=None, label_policy=None, task=None, target=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            sim = cfg.simulation.replace(seed=seed) if cfg.simulation is not None else None
            cfg = dataclasses.replace(cfg, seed=seed, simulation=sim)
        if k is not None:
            cfg = dataclasses.replace(cfg, k=k)
        if out is not None:
            cfg = dataclasses.replace(cfg, out=Path(out))
        tasks = cfg.tasks
        if task is not None or target is not None:
            tasks = tuple(s for s in tasks if (task is None or s.task.value == task)
                          and (target is None or s.target.value == target))
            if not tasks:
                tasks = tuple(s for t in ([task] if task else list(hybrid.Task))
                              for g in ([target] if target else list(ParameterKind))
                              for s in hybrid.task_specs(t, g))
        if label_policy is not None:
            tasks = tuple(dataclasses.replace(s, label_policy=hybrid.LabelPolicy(label_policy)) for s in tasks)
        return dataclasses.replace(cfg, tasks=tasks)


_TOP_KEYS = {"stock", "seed", "k", "out", "data", "simulation", "assessor", "gbt", "tasks",
             "retro_peels", "figures"}


def _simulation_from(section, seed: int) -> SimConfig:
    if section is True or section is None:
        return default_config(seed)
    if not isinstance(section, dict):
        raise ConfigError("simulation must be a mapping")
    base = default_config(seed).to_dict()
    section = dict(section)
    env = section.pop("environment", base["environment"])
    if env is True:
        env = dataclasses.asdict(default_config(seed, environment=True).environment)
    elif env is False:
        env = None
    base.update(section)
    base["environment"] = env
    base["seed"] = seed
    return SimConfig.from_dict(base)


def _tasks_from(items) -> tuple[hybrid.TaskSpec, ...]:
    if not isinstance(items, list) or not items:
        raise ConfigError("tasks must be a non-empty list")
    specs = []
    for item in items:
        if not isinstance(item, dict) or "task" not in item or "target" not in item:
            raise ConfigError(f"each task needs task and target keys, got {item!r}")
        extra = set(item) - {"task", "target", "feature_variant", "label_policy", "correction"}
        if extra:
            raise ConfigError(f"unknown task keys {sorted(extra)}")
        if item.get("feature_variant") is None:
            specs += hybrid.task_specs(item["task"], item["target"],
                                       item.get("label_policy", "final_model"),
                                       item.get("correction"))
        else:
            specs.append(hybrid.TaskSpec(**item))
    return tuple(specs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    base = path.parent
    seed = int(raw.get("seed", 0))
    kw = {"seed": seed}
    for key in ("stock", "k", "retro_peels", "figures"):
        if key in raw:
            kw[key] = raw[key]
    if "out" in raw:
        kw["out"] = base / raw["out"]
    try:
        if "data" in raw:
            d = dict(raw["data"])
            if "observations" not in d:
                raise MissingInputError("observations", "data section names no observations file")
            bio = {r: base / d[r] for r in ("biology",) + BIO_ROLES if d.get(r)}
            extra = set(d) - {"observations", "plus_group", "biology", *BIO_ROLES}
            if extra:
                raise ConfigError(f"unknown data keys {sorted(extra)}")
            kw["data"] = DataPaths(base / d["observations"], bio, bool(d.get("plus_group", True)))
        if "simulation" in raw:
            kw["simulation"] = _simulation_from(raw["simulation"], seed)
        if "assessor" in raw:
            kw["assessor"] = AssessorConfig.from_dict({**(raw["assessor"] or {}), "seed": seed})
        if "gbt" in raw:
            kw["gbt"] = gbt.GbtHyperParams(**(raw["gbt"] or {}))
        if "tasks" in raw:
            kw["tasks"] = _tasks_from(raw["tasks"])
        return RunConfig(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config: {exc}") from exc


@dataclass
class Inputs:
    obs: ObservationSeries
    bio: object
    truth: object = None


def _inputs(cfg: RunConfig) -> Inputs:
    if cfg.data is not None:
        loaded = load_dataset(cfg.data.observations, cfg.data.biology, cfg.data.plus_group)
        return Inputs(loaded.observations, loaded.biology)
    truth, obs, bio = simulate(cfg.simulation)
    return Inputs(obs, bio, truth)


def _tsv(path: Path, header, rows) -> None:
    atomic_write(path, to_delimited(header, rows, delimiter="\t"))


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg.simulation is None:
        raise ConfigError("simulate needs a simulation section, not input data")
    truth, obs, bio = simulate(cfg.simulation)
    write_observations(obs, cfg.out / "observations.csv")
    write_biology(bio, cfg.out / "biology.csv")
    write_truth(truth, cfg.out / "truth.csv")
    return 0


def cmd_assess(cfg: RunConfig) -> int:
    inp = _inputs(cfg)
    model = assessor.fit(inp.obs, inp.bio, cfg.assessor)
    atomic_write(cfg.out / "assessment.json", assessor.dumps_assessment(model))
    _tsv(cfg.out / "parameters.tsv", ("name", "value"),
         [(n, fmt(v)) for n, v in zip(model.param_names, model.theta)])
    if not model.converged:
        print(f"assessment did not converge (nll {model.nll})", file=sys.stderr)
        return 1
    rows = []
    for year in range(model.first_data_year, model.last_data_year + 1):
        rows += _state_rows("estimate", assessor.estimate(model, year), inp.bio)
    for h in range(1, assessor.MAX_HORIZON + 1):
        n = assessor.forecast(model, h)
        rows += _state_rows("forecast", n, model.bio.extended(n.year))
    _tsv(cfg.out / "estimates.tsv", ("source", "year", "quantity", "age", "value"), rows)
    return 0


def _state_rows(source: str, n, bio) -> list[tuple]:
    rows = [(source, n.year, "abundance", int(a), fmt(v)) for a, v in zip(n.age_range.ages, n.values)]
    rows.append((source, n.year, "recruitment", "", fmt(recruitment_of(n))))
    rows.append((source, n.year, "ssb", "", fmt(ssb(n, bio))))
    return rows


def cmd_retro(cfg: RunConfig) -> int:
    inp = _inputs(cfg)
    first_t = inp.obs.first_year + cfg.assessor.min_years - 1
    retro = assessor.retrospective_matrix(inp.obs, inp.bio, cfg.assessor, first_t)
    rows = []
    for kind in ParameterKind:
        for model_year, series in sorted(retro.series(kind).items()):
            if series is None:
                rows.append((model_year, "", kind.value, "NA"))
                continue
            rows += [(model_year, y, kind.value, fmt(series[y])) for y in series.years]
    _tsv(cfg.out / "retro.tsv", ("model_year", "year", "quantity", "value"), rows)
    rho_rows = []
    status = 0
    for kind in ParameterKind:
        try:
            rho = assessor.mohns_rho(retro, cfg.retro_peels, kind)
        except StockError as exc:
            print(f"mohn's rho for {kind.value}: {exc}", file=sys.stderr)
            rho, status = math.nan, 1
        rho_rows.append((kind.value, cfg.retro_peels, fmt(rho)))
    _tsv(cfg.out / "mohn.tsv", ("quantity", "peels", "rho"), rho_rows)
    if cfg.figures:
        from stockhybrid.plotting import plot_retrospective
        plot_retrospective(retro, cfg.out / "retro.png", cfg.stock)
    return status


def run_backtests(cfg: RunConfig, inp: Inputs, cache: AssessmentCache | None = None):
    """One report per task spec; failures are collected rather than raised."""
    cache = cache or AssessmentCache()
    reports, failures = [], []
    for spec in cfg.tasks:
        truth = None
        if inp.truth is not None:
            truth = inp.truth.recruitment if spec.target is ParameterKind.RECRUITMENT else inp.truth.ssb
        try:
            reports.append(hybrid.backtest(spec, inp.obs, inp.bio, cfg.assessor, cfg.k, cfg.gbt,
                                           cache, cfg.stock, truth))
        except StockError as exc:
            failures.append((spec, str(exc)))
    return reports, failures


def report_rows(reports) -> tuple[list[tuple], list[tuple]]:
    summary, rows = [], []
    for rep in reports:
        s = rep.spec
        summary.append((rep.stock, s.task.value, s.target.value, s.feature_variant.value,
                        s.label_policy.value, s.correction.value, rep.k, len(rep.rows),
                        ";".join(f"{y}:{why.split(':')[0]}" for y, why in rep.skipped),
                        fmt(rep.ml_rmse), fmt(rep.ml_r2), fmt(rep.baseline_rmse), fmt(rep.baseline_r2),
                        len(hybrid.audit_leakage(rep))))
        for r in rep.rows:
            rows.append((rep.stock, s.task.value, s.target.value, s.feature_variant.value, r.year,
                         r.target_year, fmt(r.baseline), fmt(r.hybrid), fmt(r.label), fmt(r.truth)))
    return summary, rows


def _report_failures(failures) -> int:
    for spec, why in failures:
        print(f"task {spec.name} failed: {why}", file=sys.stderr)
    return 1 if failures else 0


def cmd_backtest(cfg: RunConfig) -> int:
    inp = _inputs(cfg)
    reports, failures = run_backtests(cfg, inp)
    summary, rows = report_rows(reports)
    _tsv(cfg.out / "report.tsv", REPORT_COLUMNS, summary)
    _tsv(cfg.out / "report_rows.tsv", ROW_COLUMNS, rows)
    if cfg.figures and reports:
        from stockhybrid.plotting import plot_backtest
        plot_backtest(reports, cfg.out / "backtest.png")
    return _report_failures(failures)


def explain(report: hybrid.BacktestReport) -> list[tuple[int, str, shap.Attribution]]:
    """Attributions of the last evaluation step's corrector for its training and test tuples."""
    res = report.results[-1]
    background = [tt.features for tt in res.dataset.train]
    out = []
    for tt in res.dataset.train + (res.dataset.test,):
        role = "test" if tt is res.dataset.test else "train"
        out.append((tt.year, role, shap.tree_shap(res.ensemble, tt.features, background)))
    return out


def cmd_shap(cfg: RunConfig) -> int:
    inp = _inputs(cfg)
    reports, failures = run_backtests(cfg, inp)
    rows, imp_rows = [], []
    for rep in reports:
        s = rep.spec
        attrs = explain(rep)
        for year, role, a in attrs:
            for name, value, phi in zip(a.names, a.values, a.phi):
                rows.append((rep.stock, s.name, year, role, name, fmt(value), fmt(phi)))
        ranking = shap.aggregate_importance([a for _, _, a in attrs])
        imp_rows += [(rep.stock, s.name, i + 1, name, fmt(v)) for i, (name, v) in enumerate(ranking)]
        if cfg.figures:
            from stockhybrid.plotting import plot_shap
            records = {n: [(a.values[j], a.phi[j]) for _, _, a in attrs] for j, n in enumerate(attrs[0][2].names)}
            fname = f"shap_{s.task.value}_{s.target.value}_{s.feature_variant.value}.png"
            plot_shap(records, [n for n, _ in ranking], cfg.out / fname, f"{rep.stock}: {s.name}")
    _tsv(cfg.out / "shap.tsv", ("stock", "spec", "sample_year", "role", "feature", "feature_value", "phi"), rows)
    _tsv(cfg.out / "shap_importance.tsv", ("stock", "spec", "rank", "feature", "mean_abs_phi"), imp_rows)
    return _report_failures(failures)


def format_rmse(v: float) -> str:
    return "NA" if math.isnan(v) else f"{v:.0f}"


def format_r2(v: float) -> str:
    return "NA" if math.isnan(v) else f"{v:.3f}"


def render_report(records: Sequence[dict]) -> str:
    """Aligned text table: stock, task spec, then ML and baseline RMSE / R2."""
    header = ("Stock", "Task", "Target", "Features", "ML RMSE", "ML R2", "Baseline RMSE", "Baseline R2")
    body = []
    for r in records:
        num = lambda key: float(r[key]) if r[key] not in ("", "NA") else math.nan
        body.append((r["stock"], r["task"], r["target"], r["feature_variant"],
                     format_rmse(num("ml_rmse")), format_r2(num("ml_r2")),
                     format_rmse(num("baseline_rmse")), format_r2(num("baseline_r2"))))
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    numeric = set(range(4, len(header)))
    line = lambda cells: "  ".join(c.rjust(w) if i in numeric else c.ljust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths))).rstrip()
    out = [line(header), line(tuple("-" * w for w in widths))]
    out += [line(b) for b in body]
    return "\n".join(out) + "\n"


def read_tsv(path: Path) -> list[dict]:
    if not path.is_file():
        raise MissingInputError("report", f"file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:] if ln]


def cmd_report(cfg: RunConfig) -> int:
    text = render_report(read_tsv(cfg.out / "report.tsv"))
    atomic_write(cfg.out / "report.txt", text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"simulate": cmd_simulate, "assess": cmd_assess, "retro": cmd_retro,
            "backtest": cmd_backtest, "shap": cmd_shap, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stockhybrid", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="seed for simulation and optimiser restarts")
    p.add_argument("--k", type=int, help="backtest evaluation years beyond the first (k+1 rows)")
    p.add_argument("--label-policy", choices=[lp.value for lp in hybrid.LabelPolicy])
    p.add_argument("--task", choices=[t.value for t in hybrid.Task])
    p.add_argument("--target", choices=[t.value for t in ParameterKind])
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.k, args.out, args.label_policy,
                                                       args.task, args.target)
        if args.no_figures:
            cfg = dataclasses.replace(cfg, figures=False)
    except (StockError, ValueError) as exc:
        print(f"stockhybrid: error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg)
    except (MissingInputError, InputError) as exc:
        print(f"stockhybrid: error: {exc}", file=sys.stderr)
        return 2
    except StockError as exc:
        print(f"stockhybrid: {args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
