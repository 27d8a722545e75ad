import dataclasses
import math
import sys

import numpy as np

from stockhybrid.assessor import LOG_SIGMA_MIN, AssessorConfig, parameter_layout, q_blocks
from stockhybrid.core import FleetKind
from stockhybrid.simulator import SimConfig, default_config


def noise_free_config(seed: int = 0, **changes) -> SimConfig:
    """Truth with no process or observation noise; F still wanders so it is identifiable."""
    cfg = default_config(seed, sigma_proc=0.0, sigma_rec=0.0, sigma_f=0.2, **changes)
    return cfg.replace(fleets=tuple(dataclasses.replace(f, sigma_obs=0.0) for f in cfg.fleets))


def noise_free_assessor(obs, bio) -> AssessorConfig:
    """Assessor with every variance except the F walk pinned at the floor."""
    names = parameter_layout(obs, bio, AssessorConfig())[0]
    fixed = tuple((n, LOG_SIGMA_MIN) for n in names if n.startswith("log_sigma") and n != "log_sigma_f")
    return AssessorConfig(update_iterations=2, fixed=fixed)


def true_log_q(cfg: SimConfig) -> dict[str, float]:
    """Simulated log catchability per assessor block, keyed like the parameter names."""
    out = {}
    for fl in cfg.fleets:
        if fl.kind is not FleetKind.SURVEY:
            continue
        q = dict(zip(fl.ages, fl.catchability))
        for block, members in q_blocks(list(fl.ages), cfg.age_range.min_age):
            vals = {q[a] for a in members}
            assert len(vals) == 1, "simulated q must be constant within an assessor block"
            out[f"log_q[{fl.name},{block}]"] = math.log(vals.pop())
    return out


def true_theta(cfg: SimConfig, obs, bio) -> np.ndarray:
    """The assessor parameter vector implied by a simulation config."""
    names, _, bounds = parameter_layout(obs, bio, AssessorConfig())
    floor = math.exp(LOG_SIGMA_MIN)
    sigma_obs = {f.name: f.sigma_obs for f in cfg.fleets}
    values = {"log_sigma_proc": math.log(max(cfg.sigma_proc, floor)),
              "log_sigma_rec": math.log(max(cfg.sigma_rec, floor)),
              "log_sigma_f": math.log(max(cfg.sigma_f, floor)),
              "sel_a50": 2.5, "sel_log_slope": math.log(1.5),
              "log_bh_alpha": math.log(cfg.bh_alpha), "log_bh_beta": math.log(cfg.bh_beta)}
    values.update({f"log_sigma_obs[{k}]": math.log(max(v, floor)) for k, v in sigma_obs.items()})
    values.update(true_log_q(cfg))
    theta = np.array([values[n] for n in names])
    return np.clip(theta, bounds[:, 0], bounds[:, 1])


# acceptance criteria record one line each; printed in the terminal summary and as they finish
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    sys.__stdout__.write(f"\n{line}\n")
    sys.__stdout__.flush()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
