"""Command line entry point: ``w1ray <command> ...``.

Exit codes: 0 success, 2 bad input or config, 3 a verification failed.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io, plotting
from .exact_ot import solve_w1, validate_duals
from .harness import TASKS, ConfigError, ExperimentConfig, run, verify_all
from .map_recovery import OutsideHypothesesWarning, recover_map, verify_pushforward
from .measures import bounding_domain, make_empirical, synth_dataset
from .potential import DiscretePotential, rays
from .ttc import Backend, train

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3


def _meta(args, inputs=(), seed=0) -> dict:
    """Hash of the command options and the bytes of every input file."""
    h = hashlib.sha256()
    opts = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    h.update(repr(sorted(opts.items())).encode())
    for p in inputs:
        h.update(Path(p).read_bytes())
    return {"config": h.hexdigest()[:16], "seed": seed}


def cmd_solve(args) -> int:
    mu, nu = io.read_points(args.mu), io.read_points(args.nu)
    plan, duals = solve_w1(mu, nu, center=not args.no_center)
    rep = validate_duals(plan, duals, mu, nu)
    out = io.ensure_dir(args.out)
    meta = _meta(args, [args.mu, args.nu])
    io.write_plan(out / "plan.csv", plan, meta)
    io.write_duals(out / "duals.csv", duals, meta)
    io.write_table(out / "summary.csv", ["w1", "gap", "iterations"], [(duals.w1, rep.duality_gap, plan.iterations)], meta)
    print(f"W1 = {duals.w1:.12g}  gap = {rep.duality_gap:.2e}  slack = {rep.slackness:.2e}")
    return EXIT_OK if rep.passed else EXIT_VERIFY


def _potential_paths(args):
    if args.potential:
        parts = args.potential.split("+")
        if len(parts) != 2:
            raise ConfigError("--potential expects <duals.csv>+<points.csv>")
        return parts
    if not (args.duals and args.atoms):
        raise ConfigError("give --potential or both --duals and --atoms")
    return args.duals, args.atoms


def cmd_rays(args) -> int:
    duals_path, atoms_path = _potential_paths(args)
    pot = io.load_potential(duals_path, atoms_path)
    query = io.read_points(args.query)
    if query.dim != pot.dim:
        raise ConfigError(f"query dim {query.dim} does not match potential dim {pot.dim}")
    r = rays(pot, query.points)
    out = io.ensure_dir(args.out)
    io.write_rays(out / "rays.csv", query.points, r, _meta(args, [duals_path, atoms_path, args.query]))
    print(f"{len(query)} rays, {int(r.tie.sum())} kink points")
    return EXIT_OK


def cmd_map(args) -> int:
    mu, nu = io.read_points(args.mu), io.read_points(args.nu)
    plan, duals = solve_w1(mu, nu)
    pot = DiscretePotential(nu.points, duals.target_values, bounding_domain(mu, nu))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", OutsideHypothesesWarning)
        rm = recover_map(pot, mu, plan)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    rep = verify_pushforward(rm, mu, nu, duals.w1)
    out = io.ensure_dir(args.out)
    meta = _meta(args, [args.mu, args.nu])
    io.write_table(
        out / "map.csv", ["source", "target", "alpha", "tie_flag"],
        zip(range(len(mu)), rm.targets, rm.alpha, rm.tie.astype(int)), meta,
    )
    ok = rm.mismatch_mass <= 1e-3 and rep.cost_rel_error <= 1e-6
    # split plan rows mean the discrete problem has no deterministic map at all
    outside = rm.outside_hypotheses or rm.split_rows > 0
    status = "outside hypotheses" if outside else ("pass" if ok else "fail")
    rows = [
        ("mismatch_mass", rm.mismatch_mass),
        ("max_mass_deviation", rep.max_mass_deviation),
        ("map_cost", rep.cost),
        ("w1", rep.w1),
        ("cost_rel_error", rep.cost_rel_error),
        ("unsnapped", rep.unsnapped),
        ("tie_mass", rm.tie_mass),
        ("split_rows", rm.split_rows),
        ("status", status),
    ]
    io.write_table(out / "verify.csv", ["metric", "value"], rows, meta)
    print(f"mismatch {rm.mismatch_mass:.3g}  cost rel error {rep.cost_rel_error:.3g}  [{status}]")
    return EXIT_VERIFY if (args.strict and status == "fail") else EXIT_OK


def cmd_ttc(args) -> int:
    mu, nu = io.read_points(args.mu), io.read_points(args.nu)
    try:
        backend = Backend.parse(args.backend, args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    pipe, metrics = train(
        mu, nu, args.steps, args.fit_at, backend, step_mode=args.step_mode, seed=args.seed,
        keep_snapshots=args.snapshots or args.plots,
    )
    out = io.ensure_dir(args.out)
    meta = _meta(args, [args.mu, args.nu], args.seed)
    for n, st in enumerate(pipe.stages):
        pdir = out / "pipeline"
        io.write_points(pdir / f"stage_{n}_atoms.csv", make_empirical(st.potential.atoms), meta)
        io.write_table(pdir / f"stage_{n}_values.csv", ["index", "value"], enumerate(st.potential.values), meta)
        io.write_table(pdir / f"stage_{n}_eta.csv", ["eta", "fitted"], [(st.eta, int(st.fitted))], meta)
    io.write_dicts(out / "metrics.csv", list(metrics.rows()), meta,
                   ["stage", "w1_before", "w1_after", "eta", "fraction_long", "fitted"])
    if args.snapshots:
        for n, snap in enumerate(metrics.snapshots):
            io.write_points(out / f"mu_{n}.csv", mu.with_points(snap), meta)
    if args.plots and len(metrics):
        plotting.w1_curve(out / "w1_curve.png", [metrics.w1_before[0]] + metrics.w1_after, meta=meta)
        if mu.dim == 2:
            dom = bounding_domain(mu, nu)
            for n, snap in enumerate(metrics.snapshots):
                plotting.scatter_stage(out / f"stage_{n:02d}.png", snap, nu.points, f"stage {n}", meta, (dom.lo, dom.hi))
    if metrics.note:
        print(metrics.note)
    if len(metrics):
        print(f"W1 {metrics.w1_before[0]:.6g} -> {metrics.w1_after[-1]:.6g} in {len(metrics)} stages")
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {
        "task": args.task, "seed": args.seed, "steps": args.steps, "fit_at": args.fit_at,
        "backend": args.backend, "out": args.out, "sigmas": args.sigmas,
    }
    if args.no_plots:
        overrides["plots"] = False
    cfg = ExperimentConfig.load(args.config, **overrides)
    art = run(cfg)
    for row in art.summary:
        extra = ""
        if not np.isnan(row["psnr_final"]):
            extra = f"  PSNR {row['psnr_baseline']:.2f} -> {row['psnr_final']:.2f} dB"
        print(f"{row['task']} {row['corruption']}  W1 {row['w1_initial']:.4g} -> {row['w1_final']:.4g}{extra}")
    print(f"wrote {len(art.files)} files to {art.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    code, results = verify_all(args.seed, args.out, inject_dual_perturbation=args.inject_dual_perturbation, quick=args.quick)
    for r in results:
        print(f"{r.status:>18}  {r.check:<28} {r.value:.3g} (tol {r.tolerance:.3g})")
    return code


def cmd_synth(args) -> int:
    params = {}
    for kv in args.param:
        k, _, v = kv.partition("=")
        if not _:
            raise ConfigError(f"--param expects key=value, got {kv!r}")
        try:
            params[k] = int(v)
        except ValueError:
            try:
                params[k] = float(v)
            except ValueError:
                raise ConfigError(f"non-numeric value for {k}: {v!r}") from None
    m = synth_dataset(args.name, args.seed, **params)
    io.write_points(args.out, m, _meta(args, seed=args.seed))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="w1ray", description="Exact W1 potentials, map recovery and uniform-step transport.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="exact W1, plan and duals")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-center", action="store_true", help="keep the raw simplex duals")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("rays", help="gradient and ray extents at query points")
    p.add_argument("--potential", help="<duals.csv>+<points.csv>")
    p.add_argument("--duals")
    p.add_argument("--atoms")
    p.add_argument("--query", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_rays)

    p = sub.add_parser("map", help="recover the transport map from the potential")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true", help="exit 3 when the recovered map disagrees with the plan")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("ttc", help="train a uniform-step transport pipeline")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--fit-at", default="all", help="all, alternating or comma list of stage indices")
    p.add_argument("--backend", default="exact", help="exact or perturbed:<sigma>")
    p.add_argument("--step-mode", choices=("uniform", "alpha"), default="uniform")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--snapshots", action="store_true", help="write mu_<n>.csv per stage")
    p.add_argument("--plots", action="store_true", help="write PNG scatters and the W1 curve")
    p.set_defaults(func=cmd_ttc)

    p = sub.add_parser("run", help="run a toy experiment")
    p.add_argument("task", nargs="?", choices=TASKS)
    p.add_argument("--config", help="INI file with an [experiment] section")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--fit-at")
    p.add_argument("--backend")
    p.add_argument("--sigmas", help="comma list of noise levels")
    p.add_argument("--out")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run every numerical check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--inject-dual-perturbation", action="store_true", help="negative control: must fail")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", default=[], help="generator keyword, key=value")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, io.FormatError, FileNotFoundError, NotADirectoryError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
