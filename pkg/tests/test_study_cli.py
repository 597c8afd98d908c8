import json
import math

import numpy as np
import pytest

from perfhom.cli import main
from perfhom.corrector import ErrorRecord
from perfhom.errors import ConfigError, StageError
from perfhom.fem import OperatorCoefficients, norm, solve_perturbed
from perfhom.mesh import mesh_unperforated, refine
from perfhom.perforation import Domain, save_config
from perfhom.study import (SCENARIOS, Scenario, compare_predicted, fit_rate, get_scenario, read_records,
                           run_scenario)

FAST = {"name": "fast_lattice", "which": "thm1", "h_cells": 8, "refine_check": False,
        "config": {"dimension": 2, "domain": {"cells": 1}, "lattice": {"spacing": 4.0},
                   "epsilon": [0.354, 0.25, 0.177], "gamma": 4.0,
                   "shape": {"kind": "disk", "semi_axes": [1.0]}, "law": {"kind": "dirichlet"}}}


def test_fit_exact_power_laws():
    f = fit_rate([(0.25, 0.1), (0.125, 0.05), (0.0625, 0.025)])
    assert f.slope == pytest.approx(1.0, abs=1e-12) and f.r2 == pytest.approx(1.0, abs=1e-12)
    f2 = fit_rate([(0.25, 0.0625), (0.125, 0.015625), (0.5, 0.25)])
    assert f2.slope == pytest.approx(2.0, abs=1e-12)


def test_fit_rejects_bad_input():
    with pytest.raises(ConfigError):
        fit_rate([(0.25, 0.1), (0.125, 0.05)])
    with pytest.raises(ConfigError, match="non-positive"):
        fit_rate([(0.25, 0.1), (0.125, 0.0), (0.0625, 0.02)])


def test_fit_mms_slope():
    coeffs = OperatorCoefficients(A0=1.0)
    exact = lambda x: (np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]),
                       np.pi * np.column_stack([np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]),
                                                np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])]))
    f = lambda x: (2 * np.pi**2 + 1) * exact(x)[0]
    mesh = mesh_unperforated(Domain.unit_square(), 0.25)
    pairs = []
    for h in (0.25, 0.125, 0.0625):
        pairs.append((h, norm(solve_perturbed(mesh, coeffs, f), exact, "L2")))
        mesh = refine(mesh)
    assert 1.8 <= fit_rate(pairs).slope <= 2.2


def test_fit_scale_invariance():
    pairs = [(0.3, 0.2), (0.2, 0.11), (0.1, 0.07), (0.05, 0.02)]
    a = fit_rate(pairs).slope
    b = fit_rate([(e, 37.5 * v) for e, v in pairs]).slope
    assert abs(a - b) <= 1e-12


def _records(values, gamma=4.0):
    return [ErrorRecord(e, 0.1, gamma, m, m, m, 1.0, {"eps": e}) for e, m in values]


def test_compare_on_envelope_passes_and_outlier_flagged():
    v = compare_predicted(_records([(0.4, 0.4), (0.2, 0.2), (0.1, 0.1)]))
    assert all(x.passed for x in v)
    v = compare_predicted(_records([(0.4, 0.4), (0.2, 2.0), (0.1, 0.1)]))
    assert [x.passed for x in v] == [True, False, True]


def test_compare_rejects_mixed_gamma():
    recs = _records([(0.4, 0.4), (0.2, 0.2)]) + _records([(0.1, 0.1)], gamma=1.0)
    with pytest.raises(ConfigError, match="gamma"):
        compare_predicted(recs)


def test_scenario_validation():
    cfg = dict(FAST["config"])
    with pytest.raises(ConfigError):
        Scenario("empty", dict(cfg, epsilon=[]))
    with pytest.raises(ConfigError, match="decreasing"):
        Scenario("up", dict(cfg, epsilon=[0.177, 0.25, 0.354]))
    assert set(SCENARIOS) >= {"thm1_dirichlet_lattice", "thm2_dirichlet_lattice", "capacity_suite"}
    with pytest.raises(ConfigError):
        get_scenario("no_such_scenario")


def test_capacity_suite_matches_table(tmp_path):
    res = run_scenario("capacity_suite", tmp_path)
    table = json.loads((tmp_path / "capacities.json").read_text())
    assert len(table) == 4 and all(r["error"] < 1e-3 for r in table)
    assert res["capacities"] == table


def test_stage_error_names_stage(tmp_path):
    scen = Scenario.from_json(dict(FAST, config=dict(FAST["config"], lattice={"spacing": 2.0})))
    with pytest.raises(StageError) as info:
        run_scenario(scen, tmp_path)
    assert info.value.stage == "spec" and info.value.eps == 0.354


def test_cli_verbs_and_determinism(tmp_path, capsys):
    scen = tmp_path / "fast.json"
    scen.write_text(json.dumps(FAST))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["study", str(scen), "--out", str(a)]) == 0
    assert main(["study", str(scen), "--out", str(b), "--threads", "1"]) == 0
    for name in ("records.csv", "summary.json", "errors.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    svg = (a / "errors.svg").read_text()
    assert "<svg" in svg and "href=\"http" not in svg
    assert len(read_records(a / "records.csv")) == 3
    capsys.readouterr()
    assert main(["fit", str(a / "records.csv")]) == 0
    fits = json.loads(capsys.readouterr().out)
    assert fits["e_L2"]["slope"] > 0.7
    before = (a / "errors.svg").read_bytes()
    assert main(["report", str(a)]) == 0
    assert (a / "errors.svg").read_bytes() == before


def test_cli_validate_capacities_criterion(tmp_path, capsys):
    cfg = {"dimension": 2, "domain": {"cells": 4}, "lattice": {"spacing": 4.0}, "epsilon": [0.25, 0.125],
           "gamma": 4.0, "shape": {"kind": "disk", "semi_axes": [1.0]}, "law": {"kind": "dirichlet"},
           "jitter": 0.2, "seed": 1}
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    assert main(["validate", str(path)]) == 0
    assert main(["capacities", str(path), "--out", str(tmp_path / "caps")]) == 0
    assert json.loads((tmp_path / "caps" / "capacities.json").read_text())["K"] == [0.0] * 16
    capsys.readouterr()
    main(["criterion", str(path), "--seed", "2"])
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 2 and all(r["beta"] == pytest.approx(1 / 16) for r in rows)
    assert main(["capacities", "capacity_suite"]) == 0


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dimension": 2, "epsilon": [], "bogus": True}))
    assert main(["validate", str(bad)]) == 2
    assert "error" in capsys.readouterr().err
