"""Command line entry point ``flowharnack``.

Exit codes: 0 success, 1 a check failed, 2 invalid configuration,
3 numerical abort (positivity loss, degenerate metric, step size).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import conjugate as cj
from . import flow
from . import geometry as geo
from . import io
from . import pipeline
from . import presets
from .errors import CFLError, ConfigError, DegenerateMetricError, PositivityError

log = logging.getLogger("flowharnack")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def load_scenario(spec, grid=None, seed=None):
    """A preset name or a path to a scenario file, with command line overrides."""
    if spec in presets.PRESETS:
        sc = presets.preset(spec)
    else:
        path = Path(spec)
        if not path.exists():
            raise ConfigError(f"no preset or file named {spec!r}", None)
        sc = io.read_scenario(path)
    if grid is not None:
        sc = replace(sc, nx=grid, ny=grid, basepoint_i=sc.basepoint_i * grid // sc.nx,
                     basepoint_j=sc.basepoint_j * grid // sc.ny)
    if seed is not None:
        sc = replace(sc, seed=seed)
    return io.validate(sc)


def _outdir(sc, given):
    return Path(given) if given else Path(sc.output) / sc.name


def cmd_run(args):
    sc = load_scenario(args.scenario, args.grid, args.seed)
    out = _outdir(sc, args.out)
    if args.refine:
        study = pipeline.refine_levels(sc, args.refine, coarsest=args.grid or 32)
        out.mkdir(parents=True, exist_ok=True)
        doc = io.jsonable({"scenario": sc.name, "config_hash": io.config_hash(sc), **study})
        (out / "refine.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        if "identity_orders" in study:
            print(f"identity residual orders: {', '.join(f'{o:.2f}' for o in study['identity_orders'])}")
            print(f"laplacian residual orders: {', '.join(f'{o:.2f}' for o in study['laplacian_orders'])}")
            if min(study["identity_order"], study["laplacian_order"]) < pipeline.ORDER_MIN:
                return EXIT_FAIL
        return EXIT_OK
    ctx = pipeline.RunContext(sc)
    records = pipeline.run_checks(ctx)
    pipeline.write_outputs(ctx, out, records)
    _print_records(records)
    return pipeline.exit_code(records)


def cmd_flow(args):
    sc = load_scenario(args.scenario, args.grid, args.seed)
    out = _outdir(sc, args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj = presets.run_flow(sc)
    save_trajectory(out / "trajectory.ckpt", sc, traj)
    io.write_scenario(sc, out / "scenario.ini")
    print(f"wrote {out / 'trajectory.ckpt'} ({len(traj.times)} slices, T={traj.T!r})")
    return EXIT_OK


def save_trajectory(path, sc, traj):
    arrays = {"times": traj.times, "u": traj.u}
    if traj.aux is not None:
        arrays["aux"] = traj.aux
    extra = {"params": presets.model_params(sc), "dt": traj.dt, "store_stride": traj.store_stride,
             "nonconformal": traj.nonconformal, "config_hash": io.config_hash(sc)}
    io.write_checkpoint(path, traj.chart, traj.T, sc.model, arrays, extra)


def load_trajectory(path):
    ck = io.read_checkpoint(path)
    chart = io.chart_from_header(ck.header)
    extra = ck.header["extra"]
    m0 = geo.ConformalMetric(chart, ck.fields["u"][0])
    model = presets.build_model(extra["params"], m0)
    return flow.FlowTrajectory(chart, model, ck.fields["times"], ck.fields["u"], ck.fields.get("aux"),
                               dt=extra["dt"], store_stride=extra["store_stride"],
                               nonconformal=extra["nonconformal"])


def cmd_kernel(args):
    traj = load_trajectory(args.checkpoint)
    try:
        x, y = (float(v) for v in args.at.split(","))
    except ValueError:
        raise ConfigError(f"--at expects x,y, got {args.at!r}", None) from None
    c = traj.chart
    i = int(round(x / c.hx)) % c.nx
    j = int(round(y / c.hy)) % c.ny
    ker = cj.solve_kernel(traj, (i, j))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    io.write_checkpoint(out / f"kernel_{i}_{j}.ckpt", c, traj.t0, traj.model.tag, {"u": ker.u(0)},
                        {"basepoint": [i, j], "T": traj.T})
    doc = {
        "basepoint": [i, j],
        "mass_drift": ker.mass_drift(),
        "diagonal_at_start": float(4 * np.pi * ker.tau(0) * ker.u(0)[i, j]),
        "clean_tau": ker.tau(ker.clean_index()),
    }
    (out / f"kernel_{i}_{j}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_check(args):
    run_dir = Path(args.run_dir)
    sc = io.read_scenario(run_dir / "scenario.ini")
    if args.name not in pipeline.CHECK_FUNCS:
        raise ConfigError(f"unknown check {args.name!r}; choose from {sorted(pipeline.CHECK_FUNCS)}", None)
    ctx = pipeline.RunContext(sc)
    names = ("dalpha", args.name) if args.name in pipeline.GATED else (args.name,)
    records = pipeline.run_checks(ctx, names)
    _print_records(records)
    return pipeline.exit_code(records)


def cmd_report(args):
    doc = json.loads((Path(args.run_dir) / "summary.json").read_text())
    print(f"scenario {doc['scenario']}  config {doc['config_hash'][:12]}  seed {doc['seed']}")
    for r in doc["checks"]:
        print(f"  {r['name']:<14} {r['verdict']:<8} value={r['value']!s:<24} tol={r['tolerance']!s}")
    failed = [r["name"] for r in doc["checks"] if r["verdict"] == "fail"]
    return EXIT_FAIL if failed else EXIT_OK


def _print_records(records):
    for r in records:
        print(f"{r.name:<14} {r.verdict:<8} value={r.value:.6g} tol={r.tolerance:.6g}")
    failed = [r.name for r in records if r.verdict == "fail"]
    if failed:
        print("failed checks: " + ", ".join(failed))
    for r in records:
        if r.verdict == "warning":
            print(f"warning: {r.name}: {r.detail.get('note', '')}")


def build_parser():
    p = argparse.ArgumentParser(prog="flowharnack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--grid", type=int, help="grid points per side")
        sp.add_argument("--seed", type=int, help="seed for randomized probes")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("run", help="evolve, solve and check a scenario")
    sp.add_argument("scenario", help="preset name or scenario file")
    sp.add_argument("--refine", type=int, default=0, help="run k refinement levels and report orders")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("flow", help="evolve only and write a trajectory checkpoint")
    sp.add_argument("scenario")
    common(sp)
    sp.set_defaults(func=cmd_flow)

    sp = sub.add_parser("kernel", help="conjugate heat kernel from a trajectory checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--at", required=True, help="basepoint x,y in chart coordinates")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_kernel)

    sp = sub.add_parser("check", help="re-run one check for a run directory")
    sp.add_argument("name")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("report", help="print the summary of a run directory")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PositivityError, DegenerateMetricError) as exc:
        print(f"numerical abort at t={getattr(exc, 'time', None)}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CFLError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
