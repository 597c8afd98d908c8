"""Convergence studies: scenario pipeline, rate fits and envelope verdicts."""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell import capacity_table
from .corrector import ErrorRecord, build_corrector, check_resolution, theorem_errors
from .errors import ConfigError, PerfhomError, StageError
from .fem import OperatorCoefficients, default_lambda, function_norm, solve_homogenized, solve_perturbed
from .mesh import GradingPolicy, mesh_perforated, mesh_unperforated, refine
from .perforation import (PerforationSpec, epsilon_schedule, regime_from_config, require_a1,
                          spec_from_config)
from .strange_term import assemble_beta_eps, check_criterion_offsets, snapped_rho1

THEOREMS = ("thm1", "thm2")


# --------------------------------------------------------------------------
# rate fits and verdicts


@dataclass
class RateFit:
    eps: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    r2: float

    def to_json(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2,
                "eps": list(map(float, self.eps)), "errors": list(map(float, self.errors))}


def fit_rate(pairs) -> RateFit:
    """Least-squares slope of log(error) against log(eps)."""
    pairs = [(float(e), float(v)) for e, v in pairs]
    if len(pairs) < 3:
        raise ConfigError(f"rate fit needs at least 3 points, got {len(pairs)}")
    e, v = np.array(pairs).T
    if np.any(e <= 0):
        raise ConfigError("eps values must be positive")
    if np.any(v <= 0):
        raise ConfigError("non-positive error value (exact cancellation?); report it separately")
    x, y = np.log(e), np.log(v)
    slope, intercept = np.polyfit(x, y, 1)
    res = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(res @ res) / ss if ss > 0 else 1.0
    if not math.isfinite(slope):
        raise ConfigError("rate fit produced a non-finite slope")
    return RateFit(e, v, float(slope), float(intercept), r2)


@dataclass
class Verdict:
    eps: float
    measured: float
    envelope: float
    bound: float
    passed: bool


def _metric(which: str, metric: str | None):
    if metric is not None:
        return metric
    return "e_H1_corr" if which == "thm1" else "e_H1_plain"


def _envelope(rec: ErrorRecord, which: str, metric: str) -> float:
    if which == "thm2" and metric == "e_L2":
        return rec.predicted_l2
    return rec.predicted


def compare_predicted(records, which: str = "thm1", slack: float = 2.0, metric: str | None = None) -> list[Verdict]:
    """measured <= slack * C * envelope with C fixed at the coarsest eps."""
    records = list(records)
    if which not in THEOREMS:
        raise ConfigError(f"unknown theorem {which!r}")
    if len(records) < 3:
        raise ConfigError("comparison needs at least 3 records")
    gammas = {round(r.gamma, 12) for r in records}
    if len(gammas) > 1:
        raise ConfigError(f"records mix gamma values {sorted(gammas)}")
    metric = _metric(which, metric)
    records = sorted(records, key=lambda r: -r.eps)
    env = [_envelope(r, which, metric) for r in records]
    meas = [getattr(r, metric) for r in records]
    if not env[0] > 0:
        raise ConfigError("envelope vanishes at the coarsest eps; cannot calibrate")
    C = meas[0] / env[0]
    out = []
    for r, m, e in zip(records, meas, env):
        bound = slack * C * e
        out.append(Verdict(r.eps, m, e, bound, m <= bound))
    return out


# --------------------------------------------------------------------------
# scenarios


COEFFICIENT_PRESETS = {
    "laplace_plus_one": dict(A=None, drift=None, A0=1.0, c0=1.0),
    "laplace": dict(A=None, drift=None, A0=0.0, c0=1.0),
}


@dataclass
class Scenario:
    name: str
    config: dict
    which: str = "thm1"
    coefficients: str = "laplace_plus_one"
    source: float = 1.0
    beta: float | None = None  # None: periodic average of beta_eps
    h_cells: int = 16  # far-field elements per lattice period
    refine_check: bool = True
    resolution_tol: float = 0.1
    kind: str = "study"  # or "capacity_suite"

    def __post_init__(self):
        if self.kind == "capacity_suite":
            return
        if self.which not in THEOREMS:
            raise ConfigError(f"unknown theorem {self.which!r}")
        if self.coefficients not in COEFFICIENT_PRESETS:
            raise ConfigError(f"unknown coefficient preset {self.coefficients!r}")
        sched = self.schedule
        if len(sched) < 3:
            raise ConfigError(f"eps schedule needs at least 3 points, got {len(sched)}")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ConfigError("eps schedule must be strictly decreasing")
        for e in sched:
            regime_from_config(self.config, e)  # raises when eta is not admissible

    @property
    def schedule(self) -> list[float]:
        return epsilon_schedule(self.config)

    @property
    def gamma(self) -> float:
        return float(self.config.get("gamma", 0.0))

    def coeffs(self) -> OperatorCoefficients:
        return OperatorCoefficients(**COEFFICIENT_PRESETS[self.coefficients])

    def to_json(self) -> dict:
        return {"name": self.name, "config": self.config, "which": self.which, "coefficients": self.coefficients,
                "source": self.source, "beta": self.beta, "h_cells": self.h_cells,
                "refine_check": self.refine_check, "resolution_tol": self.resolution_tol, "kind": self.kind}

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        d = dict(d)
        if "scenario" in d:  # perforation config with an embedded scenario block
            block = dict(d.pop("scenario"))
            block.setdefault("name", d.get("name", "study"))
            block["config"] = d
            d = block
        return cls(**d)

    def with_seed(self, seed: int) -> "Scenario":
        cfg = copy.deepcopy(self.config)
        cfg["seed"] = int(seed)
        d = self.to_json()
        d["config"] = cfg
        return Scenario(**d)


def _lattice_config(**over) -> dict:
    cfg = {"dimension": 2, "domain": {"cells": 1}, "lattice": {"spacing": 4.0},
           "epsilon": [0.354, 0.25, 0.177], "gamma": 4.0, "shape": {"kind": "disk", "semi_axes": [1.0]},
           "law": {"kind": "dirichlet"}}
    cfg.update(over)
    return cfg


ROBIN_LAW = {"kind": "robin_linear_plus", "b": 1.0, "remainder": "linear",
             "mu2": {"coef": 1.0, "eps_power": -0.5, "eta_power": -0.5, "kappa_power": -0.5}}


def _robin_law(factor: float) -> dict:
    law = copy.deepcopy(ROBIN_LAW)
    law["mu2"]["coef"] = factor
    return law


SCENARIOS: dict[str, Scenario] = {
    "thm1_dirichlet_lattice": Scenario("thm1_dirichlet_lattice", _lattice_config()),
    "thm2_dirichlet_lattice": Scenario("thm2_dirichlet_lattice", _lattice_config(gamma=0.0, eta_gamma=0.4),
                                       which="thm2"),
    "robin_lattice": Scenario("robin_lattice", _lattice_config(law=_robin_law(1.0))),
    "robin_lattice_mu2x10": Scenario("robin_lattice_mu2x10", _lattice_config(law=_robin_law(10.0))),
    "capacity_suite": Scenario("capacity_suite", {}, kind="capacity_suite"),
}


def get_scenario(name_or_path) -> Scenario:
    if str(name_or_path) in SCENARIOS:
        return SCENARIOS[str(name_or_path)]
    p = Path(name_or_path)
    if not p.exists():
        raise ConfigError(f"no scenario preset or file named {name_or_path!r}")
    return Scenario.from_json(json.loads(p.read_text()))


def periodic_beta(spec: PerforationSpec, field) -> float:
    """Average of beta_eps over one lattice cell (the periodic limit)."""
    if not len(spec):
        return 0.0
    return float(field.ball_mass().sum() / spec.domain.volume)


# --------------------------------------------------------------------------
# pipeline


@dataclass
class EpsilonResult:
    record: ErrorRecord
    guards: dict
    criterion: dict
    meshes: dict = field(default_factory=dict)


def _stage(name, eps, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except (PerfhomError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise StageError(name, eps, exc) from exc


def _errors_at(spec, coeffs, fld, scen: Scenario, h: float, segments: int | None, lam: float):
    policy = GradingPolicy(h=h, segments=segments)
    m = mesh_perforated(spec, policy)
    m0 = mesh_unperforated(spec.domain, h / 2)
    ue = solve_perturbed(m, coeffs, scen.source, lam=lam)
    u0 = solve_homogenized(m0, coeffs, fld, scen.source, lam=lam)
    fn = function_norm(scen.source, m0)
    return m, m0, ue, u0, fn


def run_epsilon(scen: Scenario, eps: float) -> EpsilonResult:
    spec = _stage("spec", eps, spec_from_config, scen.config, eps)
    _stage("validate", eps, require_a1, spec)
    coeffs = scen.coeffs()
    field_eps = _stage("capacities", eps, assemble_beta_eps, spec)
    beta = scen.beta if scen.beta is not None else periodic_beta(spec, field_eps)
    fld = field_eps.with_beta(beta)
    spacing = float(scen.config.get("lattice", {}).get("spacing", 4.0))

    def criterion():
        rho1 = snapped_rho1(eps)
        cfield = fld
        dom = scen.config.get("domain")
        if isinstance(dom, dict) and "cells" in dom:
            # same periodic field on a torus large enough to hold the windows
            cells = int(math.ceil(rho1 / eps)) + 2
            cfg = dict(scen.config, domain={"cells": cells})
            cspec = spec_from_config(cfg, eps)
            cfield = assemble_beta_eps(cspec).with_beta(beta)
        rep = check_criterion_offsets(cfield, (spacing,) * spec.n, rho1, beta)
        return {"rho1": rho1, "rho2": rep.sup_deviation, "surrogate": rep.sup_deviation + rho1}

    crit = _stage("criterion", eps, criterion)
    corr = _stage("corrector", eps, build_corrector, spec)
    lam = default_lambda(coeffs, spec.domain)
    h = spacing * eps / scen.h_cells
    m, m0, ue, u0, fn = _stage("solve", eps, _errors_at, spec, coeffs, fld, scen, h, None, lam)
    rec = _stage("errors", eps, theorem_errors, ue, u0, corr, scen.which, fn, crit["surrogate"])
    guards = {"a1": True, "solver_residual": max(ue.residual, u0.residual)}
    meshes = {"perforated_vertices": m.n_points, "homogenized_vertices": m0.n_points}
    if scen.refine_check:
        segs = 2 * m.rings[0]["segments"] if m.rings else None
        _, _, ue2, u02, fn2 = _stage("refine", eps, _errors_at, spec, coeffs, fld, scen, h / 2, segs, lam)
        rec2 = _stage("errors", eps, theorem_errors, ue2, u02, corr, scen.which, fn2, crit["surrogate"])
        guards["refinement_change"] = _stage("resolution", eps, check_resolution, rec, rec2,
                                             scen.resolution_tol)
    return EpsilonResult(rec, guards, crit, meshes)


def records_csv(records) -> str:
    if not records:
        return ""
    out = records[0].to_csv(header=True)
    for r in records[1:]:
        out += r.to_csv(header=False)
    return out


def read_records(path) -> list[ErrorRecord]:
    rows = list(csv.DictReader(open(path)))
    recs = []
    for r in rows:
        comps = {k[5:]: float(v) for k, v in r.items() if k.startswith("pred:")}
        which = "thm2" if any(k.startswith("w21:") for k in comps) else "thm1"
        recs.append(ErrorRecord(float(r["eps"]), float(r["eta"]), float(r["gamma"]), float(r["e_H1_corr"]),
                                float(r["e_L2"]), float(r["e_H1_plain"]), float(r["f_norm"]), comps, which))
    return recs


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"


def plot_records(records, path, title: str = "") -> None:
    """Self-contained log-log SVG of the three errors against eps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "perfhom"
    matplotlib.rcParams["svg.fonttype"] = "path"
    eps = [r.eps for r in records]
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, mk in (("e_H1_corr", "o-"), ("e_L2", "s-"), ("e_H1_plain", "^-")):
        ax.loglog(eps, [getattr(r, name) for r in records], mk, label=name)
    ax.set_xlabel("eps")
    ax.set_ylabel("error / |f|")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def summarize(scen: Scenario, results: list[EpsilonResult], slack: float = 2.0) -> dict:
    records = [r.record for r in results]
    summary = {"scenario": scen.to_json(), "per_eps": [], "fits": {}, "verdicts": []}
    for r in results:
        summary["per_eps"].append({"eps": r.record.eps, "guards": r.guards, "criterion": r.criterion,
                                   "meshes": r.meshes})
    if len(records) >= 3:
        for name in ("e_H1_corr", "e_L2", "e_H1_plain"):
            try:
                summary["fits"][name] = fit_rate([(r.eps, getattr(r, name)) for r in records]).to_json()
            except ConfigError as exc:
                summary["fits"][name] = {"error": str(exc)}
        summary["verdicts"] = [v.__dict__ for v in compare_predicted(records, scen.which, slack)]
    return summary


def run_scenario(scen: Scenario | str, out: str | Path | None = None, slack: float = 2.0) -> dict:
    """Run every eps of a scenario; writes records.csv, summary.json and errors.svg under ``out``.

    A failing stage raises StageError after the records computed so far are written.
    """
    if isinstance(scen, str):
        scen = get_scenario(scen)
    outdir = Path(out) if out is not None else None
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
    if scen.kind == "capacity_suite":
        table = capacity_table()
        bundle = {"scenario": scen.to_json(), "capacities": table}
        if outdir is not None:
            (outdir / "capacities.json").write_text(_dump(table))
        return bundle
    results: list[EpsilonResult] = []

    def flush():
        if outdir is None:
            return
        (outdir / "records.csv").write_text(records_csv([r.record for r in results]))
        (outdir / "summary.json").write_text(_dump(summarize(scen, results, slack)))

    for eps in scen.schedule:
        try:
            results.append(run_epsilon(scen, eps))
        except StageError:
            flush()
            raise
    flush()
    summary = summarize(scen, results, slack)
    if outdir is not None:
        plot_records([r.record for r in results], outdir / "errors.svg", scen.name)
    summary["records"] = [r.record for r in results]
    summary["ok"] = all(v["passed"] for v in summary["verdicts"])
    return summary
