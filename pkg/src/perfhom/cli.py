"""Command-line entry point: ``perfhom <verb> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _set_threads(n: int | None) -> None:
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _config(path):
    from .perforation import load_config

    return load_config(path)


def cmd_validate(args) -> int:
    from .perforation import epsilon_schedule, spec_from_config, validate_assumption_a1

    cfg = _config(args.config)
    ok = True
    for eps in epsilon_schedule(cfg):
        spec = spec_from_config(cfg, eps)
        rep = validate_assumption_a1(spec)
        print(f"eps={eps:g}  cavities={len(spec)}  eta={spec.eta:.6g}")
        print(rep)
        ok &= rep.passed
    return 0 if ok else 1


def cmd_capacities(args) -> int:
    from .cell import capacity_table
    from .perforation import spec_from_config
    from .strange_term import compute_capacities

    if args.config == "capacity_suite":
        _print(capacity_table())
        return 0
    cfg = _config(args.config)
    spec = spec_from_config(cfg)
    K = compute_capacities(spec)
    out = {"eps": spec.eps, "eta": spec.eta, "K": [float(k) for k in K]}
    _print(out)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "capacities.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_criterion(args) -> int:
    from .perforation import epsilon_schedule, spec_from_config
    from .strange_term import assemble_beta_eps, check_criterion_offsets, snapped_rho1
    from .study import periodic_beta

    cfg = _config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    spacing = float(cfg.get("lattice", {}).get("spacing", 4.0))
    rows = []
    ok = True
    for eps in epsilon_schedule(cfg):
        spec = spec_from_config(cfg, eps)
        fld = assemble_beta_eps(spec)
        beta = periodic_beta(spec, fld) if cfg.get("beta") is None else float(cfg["beta"])
        rho1 = snapped_rho1(eps)
        rep = check_criterion_offsets(fld, (spacing,) * spec.n, rho1, beta)
        rows.append({"eps": eps, "beta": beta, **rep.to_json()})
        ok &= rep.passed
    _print(rows)
    return 0 if ok else 1


def cmd_study(args) -> int:
    from .errors import StageError
    from .study import get_scenario, run_scenario

    scen = get_scenario(args.config)
    if args.seed is not None and scen.kind != "capacity_suite":
        scen = scen.with_seed(args.seed)
    out = args.out or f"results/{scen.name}"
    try:
        res = run_scenario(scen, out, slack=args.slack)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if scen.kind == "capacity_suite":
        _print(res["capacities"])
        return 0
    for rec in res["records"]:
        print(f"eps={rec.eps:<7g} e_H1_corr={rec.e_H1_corr:.4e} e_L2={rec.e_L2:.4e} e_H1_plain={rec.e_H1_plain:.4e}")
    for name, fit in res["fits"].items():
        if "slope" in fit:
            print(f"slope {name}: {fit['slope']:.3f} (R2={fit['r2']:.4f})")
    print(f"written to {out}")
    return 0 if res["ok"] else 1


def cmd_fit(args) -> int:
    from .study import fit_rate, read_records

    recs = read_records(args.csv)
    out = {}
    for name in ("e_H1_corr", "e_L2", "e_H1_plain"):
        fit = fit_rate([(r.eps, getattr(r, name)) for r in recs])
        out[name] = {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2}
    _print(out)
    return 0


def cmd_report(args) -> int:
    from .study import compare_predicted, plot_records, read_records

    d = Path(args.dir)
    recs = read_records(d / "records.csv")
    which = recs[0].which if recs else "thm1"
    verdicts = compare_predicted(recs, which, args.slack)
    print(f"{'eps':>8} {'measured':>12} {'envelope':>12} {'bound':>12}  verdict")
    for v in verdicts:
        print(f"{v.eps:8.4g} {v.measured:12.4e} {v.envelope:12.4e} {v.bound:12.4e}  {'pass' if v.passed else 'FAIL'}")
    title = d.name
    if (d / "summary.json").exists():
        title = json.loads((d / "summary.json").read_text())["scenario"]["name"]
    plot_records(sorted(recs, key=lambda r: -r.eps), Path(args.out or d) / "errors.svg", title)
    return 0 if all(v.passed for v in verdicts) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the jitter seed")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    common.add_argument("--slack", type=float, default=2.0, help="envelope slack factor")
    p = argparse.ArgumentParser(prog="perfhom", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    for name, fn, arg, hlp in (
        ("validate", cmd_validate, "config", "check the geometric assumptions for every eps"),
        ("capacities", cmd_capacities, "config", "capacity constants (or 'capacity_suite')"),
        ("criterion", cmd_criterion, "config", "window criterion for the strange-term density"),
        ("study", cmd_study, "config", "run a scenario preset or scenario file"),
        ("fit", cmd_fit, "csv", "fit rates to a records.csv"),
        ("report", cmd_report, "dir", "verdict table and plot for a study directory"),
    ):
        sp = sub.add_parser(name, help=hlp, parents=[common])
        sp.add_argument(arg)
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    from .errors import PerfhomError

    try:
        return args.func(args)
    except PerfhomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
