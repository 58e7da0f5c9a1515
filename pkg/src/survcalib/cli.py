"""Command-line interface: fit, simulate, curves.

``survcalib fit`` ingests a one-row-per-subject CSV plus a study-config JSON
declaring column roles, fits the requested estimators, and writes a JSON
report (optionally with a per-subject exposure-probability trajectory CSV).
``survcalib simulate`` runs the Monte-Carlo harness for a scenario file and
writes a summary CSV.  ``survcalib curves`` emits plottable survival-curve
points of the change-time distribution (NPMLE steps and/or a smooth Weibull
curve), optionally stratified by a binary calibration covariate.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np

from .calibration import RiskSetCalibration, probability_trajectories
from .data_model import ColumnRoles, Dataset, dataset_from_csv
from .estimators import fit_lvcf, fit_midi, fit_oc, fit_rsc
from .icfit import fit_npmle, fit_ph_spline, fit_weibull, select_knots
from .simulate import KNOWN_METHODS, Scenario, run_study
from .splines import equally_spaced_basis

FAMILIES = ("npmle", "weibull", "ph-spline")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except BrokenPipeError:
        return 1
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survcalib")
    sub = parser.add_subparsers(required=True)

    p_fit = sub.add_parser("fit", help="fit estimators to a subject CSV")
    p_fit.add_argument("--input", required=True)
    p_fit.add_argument("--config", required=True, help="study-config JSON (column roles)")
    p_fit.add_argument("--method", action="append", default=None,
                       help=f"repeatable; one of {', '.join(KNOWN_METHODS)}")
    p_fit.add_argument("--family", default="ph-spline", choices=FAMILIES)
    p_fit.add_argument("--knots", default="5",
                       help="comma-separated interior-knot candidates for ph-spline")
    p_fit.add_argument("--degree", type=int, default=3)
    p_fit.add_argument("--criterion", default="bic", choices=("aic", "bic"))
    p_fit.add_argument("--rsc-width", type=float, default=0.5)
    p_fit.add_argument("--conf-level", type=float, default=0.95)
    p_fit.add_argument("--trajectories", default=None,
                       help="also write P(X(t)=1 | history) paths to this CSV")
    p_fit.add_argument("--out", required=True)
    p_fit.set_defaults(handler=cmd_fit)

    p_sim = sub.add_parser("simulate", help="run a Monte-Carlo study")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON file")
    p_sim.add_argument("--reps", type=int, required=True)
    p_sim.add_argument("--method", action="append", default=None)
    p_sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_sim.add_argument("--workers", type=int, default=1)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(handler=cmd_simulate)

    p_cur = sub.add_parser("curves", help="survival-curve points of the change time")
    p_cur.add_argument("--input", required=True)
    p_cur.add_argument("--config", required=True)
    p_cur.add_argument("--family", action="append", default=None,
                       choices=("npmle", "weibull"))
    p_cur.add_argument("--stratify-by", default=None,
                       help="name of a binary calibration covariate column")
    p_cur.add_argument("--out", required=True)
    p_cur.set_defaults(handler=cmd_curves)
    return parser


def _load_roles(path: str) -> ColumnRoles:
    with open(path) as fh:
        return ColumnRoles.from_dict(json.load(fh))


def _fit_calibration(dataset: Dataset, args):
    """Fit the requested change-time model family; returns (model, report)."""
    if args.family == "npmle":
        fit = fit_npmle(dataset.intervals)
        report = {"family": "npmle", "loglik": fit.loglik,
                  "support_intervals": [[p, (None if math.isinf(q) else q)]
                                        for p, q in fit.support_intervals],
                  "masses": [float(m) for m in fit.masses],
                  "converged": fit.converged}
        return fit, report
    if args.family == "weibull":
        fit = fit_weibull(dataset.intervals)
        report = {"family": "weibull", "shape": fit.shape, "scale": fit.scale,
                  "loglik": fit.loglik, "converged": fit.converged}
        return fit, report
    candidates = [int(tok) for tok in str(args.knots).split(",") if tok.strip()]
    basis, fit, trace = select_knots(dataset.intervals, dataset.q, candidates,
                                     degree=args.degree, criterion=args.criterion)
    report = {
        "family": "ph-spline",
        "selected_m": len(basis.interior_knots),
        "degree": basis.degree,
        "interior_knots": [float(k) for k in basis.interior_knots],
        "boundary": [basis.lower, basis.upper],
        "criterion": args.criterion,
        "knot_trace": trace,
        "psi": [float(x) for x in fit.psi],
        "alpha": [float(x) for x in fit.alpha],
        "loglik": fit.loglik,
        "converged": fit.converged,
    }
    return (basis, fit), report


def cmd_fit(args) -> int:
    roles = _load_roles(args.config)
    dataset = dataset_from_csv(args.input, roles)
    methods = [m.lower() for m in (args.method or ["lvcf"])]
    for m in methods:
        if m not in KNOWN_METHODS:
            print(f"error: unknown method {m!r}; valid: {', '.join(KNOWN_METHODS)}",
                  file=sys.stderr)
            return 2
    needs_calibration = any(m in ("oc", "rsc") for m in methods)
    calib_report = None
    calib_model = None
    basis = None
    if needs_calibration or args.trajectories:
        if args.family == "ph-spline" and dataset.q.shape[1] == 0 and not roles.q:
            pass  # covariate-free spline model is fine
        fitted, calib_report = _fit_calibration(dataset, args)
        if args.family == "ph-spline":
            basis, calib_model = fitted
        else:
            calib_model = fitted

    results = {}
    for m in methods:
        if m == "lvcf":
            fit = fit_lvcf(dataset)
        elif m == "midi":
            fit = fit_midi(dataset)
        elif m == "oc":
            fit = fit_oc(dataset, calib_model)
        else:
            rsc = RiskSetCalibration.fit(dataset, family=args.family,
                                         grid_width=args.rsc_width, basis=basis,
                                         baseline_model=calib_model)
            fit = fit_rsc(dataset, grouping_width=args.rsc_width, rsc=rsc)
        results[m] = fit.to_dict(level=args.conf_level)

    payload = {"input": args.input, "n_subjects": len(dataset),
               "n_events": dataset.n_events, "methods": results}
    if calib_report:
        payload["calibration"] = calib_report
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)

    if args.trajectories:
        times = np.unique(dataset.obs_times[dataset.events])
        if times.size == 0:
            times = np.linspace(0, float(dataset.obs_times.max()), 51)
        paths = probability_trajectories(calib_model, dataset, times)
        with open(args.trajectories, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "t", "prob_exposed"])
            for j, s in enumerate(dataset.subjects):
                for e, t in enumerate(times):
                    writer.writerow([s.id, f"{t:.6g}", f"{paths[e, j]:.6g}"])
    return 0


def cmd_simulate(args) -> int:
    with open(args.scenario) as fh:
        scenario = Scenario.from_json(fh.read())
    if args.seed is not None:
        scenario.seed = args.seed
    methods = [m.lower() for m in (args.method or ["lvcf", "oc"])]
    for m in methods:
        if m not in KNOWN_METHODS:
            print(f"error: unknown method {m!r}; valid: {', '.join(KNOWN_METHODS)}",
                  file=sys.stderr)
            return 2
    summary = run_study(scenario, methods, args.reps, workers=args.workers)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["Method", "Mean", "EMP.SE", "SEhat",
                                                "CP95", "n_used", "n_failed"])
        writer.writeheader()
        for row in summary.to_csv_rows():
            writer.writerow(row)
    print(f"seed={scenario.seed} reps={args.reps} -> {args.out}")
    return 0


def cmd_curves(args) -> int:
    roles = _load_roles(args.config)
    dataset = dataset_from_csv(args.input, roles)
    families = args.family or ["npmle", "weibull"]
    strata: list[tuple[str, Dataset]] = [("all", dataset)]
    if args.stratify_by:
        if args.stratify_by not in roles.q:
            print(f"error: stratification column {args.stratify_by!r} is not a "
                  "declared calibration covariate", file=sys.stderr)
            return 2
        col = roles.q.index(args.stratify_by)
        vals = dataset.q[:, col]
        strata = []
        for lvl in np.unique(vals):
            mask = vals == lvl
            if not mask.any():
                print(f"warning: empty stratum {lvl}", file=sys.stderr)
                continue
            strata.append((f"{args.stratify_by}={lvl:g}", dataset.subset(mask)))

    rows = []
    for label, sub in strata:
        finite = [iv.right for iv in sub.intervals if not iv.is_right_censored]
        top = max(finite) if finite else max(iv.left for iv in sub.intervals) + 1.0
        for family in families:
            if family == "npmle":
                fit = fit_npmle(sub.intervals)
                jumps = sorted({iv[1] for iv in fit.support_intervals if math.isfinite(iv[1])})
                grid = [0.0]
                for qpt in jumps:
                    grid += [qpt - 1e-9, qpt]   # both sides of each step
                grid.append(top)
                for t in grid:
                    rows.append((family, label, max(t, 0.0), float(fit.survival(t))))
            else:
                fit = fit_weibull(sub.intervals)
                for t in np.linspace(0.0, top, 101):
                    rows.append((family, label, float(t), float(fit.survival(t))))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family", "stratum", "time", "survival"])
        for fam, label, t, s in rows:
            writer.writerow([fam, label, f"{t:.9g}", f"{s:.9g}"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
