"""Command-line entry points.

Subcommands: moments, complexity, bound, estimate, simulate, check. Designs
and simulation recipes are YAML files; tabular inputs and outputs are the
CSV schemas documented in the module they belong to.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import yaml

from .bounds import aronow_samii_bound, certify_bound, neyman_bound_crd, psd_clip
from .designs import CompletelyRandomizedDesign, build_design
from .harness import (
    SimConfig,
    impute_potential_outcomes,
    preprocess_covariates,
    run_simulation,
)
from .linear import (
    ExperimentData,
    estimate_report,
    load_covariates_csv,
    load_observed_csv,
)
from .moments import (
    DesignMoments,
    closed_form_or_exact_moments,
    design_complexity,
    exact_moments,
    mc_moments,
)
from .network import positivity_report


def _load_yaml(path):
    with open(path) as fh:
        return yaml.safe_load(fh)


def _design_from_args(args):
    spec = _load_yaml(args.design)
    if "design" in spec:
        spec = spec["design"]
    return build_design(spec)


def _moments_from_args(args, design):
    if getattr(args, "load_moments", None):
        return DesignMoments.load_npz(args.load_moments)
    if args.mc is not None:
        return mc_moments(design, reps=args.mc, seed=args.seed)
    return closed_form_or_exact_moments(design)


def _add_moment_source_args(parser):
    parser.add_argument("--design", required=True, help="design YAML file")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--exact", action="store_true", help="enumerate the support (default)")
    group.add_argument("--mc", type=int, default=None, metavar="REPS", help="Monte-Carlo draws")
    group.add_argument("--load-moments", default=None, help="previously saved moments .npz")
    parser.add_argument("--seed", type=int, default=0)


def cmd_moments(args):
    design = _design_from_args(args)
    moments = _moments_from_args(args, design)
    if args.out:
        moments.save_npz(args.out)
    if args.pi_csv:
        moments.pi_to_csv(args.pi_csv)
    if args.d_csv:
        moments.d_to_csv(args.d_csv)
    flagged = int(moments.zero_mask.sum() + moments.maybe_zero_mask.sum())
    print(
        f"moments computed ({moments.method}): kn={moments.kn}, "
        f"flagged cells={flagged}"
    )
    report = positivity_report(moments)
    if not report.is_clean():
        print(
            f"positivity: {report.zero_count} zero cells, "
            f"{report.small_count} cells below {report.threshold}"
        )
    return 0


def cmd_complexity(args):
    design = _design_from_args(args)
    moments = _moments_from_args(args, design)
    k = design.k
    print(("diag-zeroed " if args.zero_diag else "") + "largest-eigenvalue measures by arm pair:")
    print("      " + "".join(f"{'arm' + str(b + 1):>11}" for b in range(k)))
    for a in range(k):
        cells = []
        for b in range(k):
            if b <= a:
                cells.append(" " * 11)
                continue
            value = design_complexity(moments, arms=[a, b], zero_diag=args.zero_diag)
            cells.append(f"{value:>11.2f}")
        print(f"arm{a + 1:<3}" + "".join(cells))
    full = design_complexity(moments, zero_diag=args.zero_diag)
    print(f"all arms: {full:.6g}")
    return 0


def cmd_bound(args):
    design = _design_from_args(args)
    moments = _moments_from_args(args, design)
    if args.kind == "neyman":
        if not (isinstance(design, CompletelyRandomizedDesign) and design.k == 2):
            print("error: the neyman bound needs a two-arm completely randomized design", file=sys.stderr)
            return 2
        bound = neyman_bound_crd(design.n, int(design.counts[0]))
    else:
        bound = aronow_samii_bound(moments)
    if args.psd_clip:
        bound = psd_clip(bound)
    cert = certify_bound(moments, bound)
    if args.out:
        bound.to_csv(args.out)
    if args.report:
        cert.to_json(args.report)
    status = "ok" if (cert.psd_ok and cert.identified_ok) else "FAILED"
    print(
        f"{bound.name} bound {status}: min_eig={cert.min_eigenvalue:.3g}, "
        f"mask_violations={cert.mask_violations}"
    )
    return 0 if status == "ok" else 1


def cmd_estimate(args):
    design = _design_from_args(args)
    moments = _moments_from_args(args, design)
    arms, y = load_observed_csv(args.data)
    if len(arms) != design.n:
        print("error: observed rows do not match the design size", file=sys.stderr)
        return 2
    if args.covariates:
        X = preprocess_covariates(load_covariates_csv(args.covariates))
    else:
        X = np.zeros((design.n, 0))
    from .designs import AssignmentRealization

    data = ExperimentData(
        n=design.n,
        k=design.k,
        y_obs=y,
        assignment=AssignmentRealization(design.n, design.k, arms),
        X=X,
        moments=moments,
    )
    bound = aronow_samii_bound(moments)
    if args.psd_clip:
        bound = psd_clip(bound)
    contrast = [float(v) for v in args.contrast.split(",")]
    reports = [
        estimate_report(kind.strip(), data, bound, contrast).__dict__
        for kind in args.estimators.split(",")
    ]
    text = json.dumps(reports, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0


def cmd_simulate(args):
    recipe = _load_yaml(args.config)
    design = build_design(recipe["design"])
    cov = recipe.get("covariates", {})
    if "csv" in cov:
        raw = load_covariates_csv(cov["csv"])
    elif "generate" in cov:
        gen = cov["generate"]
        rng = np.random.default_rng(gen.get("seed", 0))
        raw = rng.standard_normal((design.n, gen["p"]))
    else:
        raw = None
    X = (
        preprocess_covariates(raw, topcode_columns=tuple(cov.get("topcode_columns", ())))
        if raw is not None
        else np.zeros((design.n, 0))
    )
    outcome = recipe["outcome"]
    y_full = impute_potential_outcomes(
        X, outcome.get("coeffs", [0.0] * X.shape[1]), outcome["intercepts"], outcome.get("seed", 0)
    )
    moments_spec = recipe.get("moments", {"method": "exact"})
    preloaded = (
        DesignMoments.load_npz(moments_spec["npz"]) if "npz" in moments_spec else None
    )
    from .model_assisted import OptimizerConfig

    cfg = SimConfig(
        design=design,
        y_full=y_full,
        X=X,
        estimators=recipe["estimators"],
        contrast=np.asarray(recipe["contrast"], dtype=float),
        replications=int(recipe["replications"]),
        seed=int(recipe["seed"]),
        moments=preloaded,
        moments_method=moments_spec.get("method", "exact"),
        moments_reps=int(moments_spec.get("reps", 100_000)),
        bound_kind=recipe.get("bound", "aronow_samii"),
        apply_psd_clip=bool(recipe.get("psd_clip", False)),
        level=float(recipe.get("level", 0.95)),
        optimizer=OptimizerConfig(**recipe.get("optimizer", {})),
        workers=int(args.workers if args.workers is not None else recipe.get("workers", 1)),
    )
    table = run_simulation(cfg)
    if args.out:
        table.to_csv(args.out)
    if args.json:
        table.to_json(args.json)
    print(table.display())
    failed = {k: v for k, v in table.failures.items() if v}
    if failed:
        print(f"failed replications excluded: {failed}")
    return 0


def cmd_check(args):
    from .moments import crd_first_order_matrix, largest_eigenvalue
    from .designs import BernoulliDesign, stream_rng
    from .linear import estimate_linear, intercept_matrix, plugin_varbound

    failures = 0

    def report(label, ok):
        nonlocal failures
        print(f"[{'pass' if ok else 'FAIL'}] {label}")
        failures += 0 if ok else 1

    for n in range(2, 7):
        for n_t in range(1, n):
            exact = exact_moments(CompletelyRandomizedDesign(n, [n_t, n - n_t]))
            if np.max(np.abs(exact.D - crd_first_order_matrix(n, n_t))) > 1e-12:
                report(f"analytic two-arm matrix n={n}", False)
                break
    report("analytic two-arm design matrix vs enumeration (n <= 6)", failures == 0)

    design = CompletelyRandomizedDesign(5, [2, 3])
    table = design.enumerate_support()
    moments = exact_moments(design)
    rng = stream_rng(123)
    y_full = rng.standard_normal(10)
    acc = np.zeros(2)
    for idx in range(len(table)):
        data = ExperimentData.from_full(
            y_full, table.realization(idx), np.zeros((5, 0)), moments
        )
        acc += table.probabilities[idx] * estimate_linear("ht", data).mu_hat
    truth = intercept_matrix(5, 2).T @ y_full / 5
    report("exact unbiasedness of the weighted estimator", np.max(np.abs(acc - truth)) < 1e-12)

    bern = BernoulliDesign(3, [0.5, 0.5])
    m = exact_moments(bern)
    cert = certify_bound(m, aronow_samii_bound(m))
    report("general bound is valid and identified", cert.psd_ok and cert.identified_ok)
    report(
        "spectral measure equals 2 for the half-half independent design",
        abs(largest_eigenvalue(m.D) - 2.0) < 1e-8,
    )

    bern2 = BernoulliDesign(2, [0.5, 0.5])
    m2 = exact_moments(bern2)
    bound2 = aronow_samii_bound(m2)
    zc = np.array([0.0, -2.0, 2.0, 4.0])
    support = bern2.enumerate_support()
    mean_raw = sum(
        support.probabilities[i]
        * plugin_varbound(zc, support.realization(i), bound2).raw
        for i in range(len(support))
    )
    report("plug-in bound worked example (mean 12)", abs(mean_raw - 12.0) < 1e-10)

    print(f"{failures} failure(s)")
    return 0 if failures == 0 else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="designest",
        description="design-based estimation for randomized experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("moments", help="compute and export design moments")
    _add_moment_source_args(p)
    p.add_argument("--out", help="save moments as .npz")
    p.add_argument("--pi-csv", help="export inclusion probabilities as CSV")
    p.add_argument("--d-csv", help="export the design matrix as i,j,value CSV")
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("complexity", help="largest-eigenvalue design measures")
    _add_moment_source_args(p)
    p.add_argument("--zero-diag", action="store_true", help="zero the diagonal first")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("bound", help="build and certify a variance bound")
    _add_moment_source_args(p)
    p.add_argument("--kind", choices=["aronow_samii", "neyman"], default="aronow_samii")
    p.add_argument("--psd-clip", action="store_true")
    p.add_argument("--out", help="bound matrix CSV")
    p.add_argument("--report", help="certification report JSON")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("estimate", help="estimate contrasts on one dataset")
    _add_moment_source_args(p)
    p.add_argument("--data", required=True, help="observed-data CSV (unit_id,arm,y)")
    p.add_argument("--covariates", help="covariates CSV (unit_id,x1..xp)")
    p.add_argument("--estimators", default="ht,hajek", help="comma-separated kinds")
    p.add_argument("--contrast", required=True, help="comma-separated contrast vector")
    p.add_argument("--psd-clip", action="store_true")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run a simulation recipe")
    p.add_argument("--config", required=True, help="simulation YAML")
    p.add_argument("--out", help="metrics CSV path")
    p.add_argument("--json", help="metrics JSON path")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check", help="run the built-in oracle suite")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
