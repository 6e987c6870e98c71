"""Command line entry point: ``utnmpc run|compare|forecast|topology|bench``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import forecast as fc
from .harness import (
    CONTROLLERS, ComparisonError, ScenarioError, compare, default_scenario_text, load_run, render_table,
    run_scenario, scenario_from_dict, write_comparison,
)
from .network import (
    ConfigParseError, TopologyError, default_benchmark, describe, load_topology_file, serialize_topology,
    validate_partition,
)
from .parallel import WORKERS_ENV


def _load_scenario(ref: str, seed: int | None):
    if ref in ("default", "builtin"):
        doc, base = yaml.safe_load(default_scenario_text()), None
    else:
        p = Path(ref)
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ScenarioError(str(exc)) from exc
        base = p.parent
    if seed is not None:
        doc = {**doc, "seed": seed}
    return scenario_from_dict(doc, base)


def _coord_overrides(args) -> dict:
    out = {}
    for key in ("rho", "tol", "max_rounds", "relaxation", "alpha0"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if args.no_sensitivity:
        out["use_sensitivity"] = False
    return out


def cmd_run(args) -> int:
    if args.workers is not None:
        os.environ[WORKERS_ENV] = str(args.workers)
    sc = _load_scenario(args.scenario, args.seed)
    coord = _coord_overrides(args)
    if coord:
        sc.coordination = dataclasses.replace(sc.coordination, **coord)
    mpc = {k: v for k, v in (("opt_tol", args.opt_tol), ("max_iter", args.max_iter)) if v is not None}
    if mpc:
        sc.mpc = dataclasses.replace(sc.mpc, **mpc)

    def progress(k, n):
        if k == n or k % 20 == 0:
            print(f"\r{args.controller}: step {k}/{n}", end="" if k < n else "\n", file=sys.stderr, flush=True)

    res = run_scenario(sc, args.controller, args.out, progress=None if args.quiet else progress)
    m = res.metrics
    print(f"{m.controller}: TTS {m.tts:.4e} veh*s, max queue {m.max_queue:.1f} veh, "
          f"clamps {m.constraint_violations}, wall {m.wall_time:.2f} s -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    runs = [load_run(d) for d in args.runs]
    names = args.names.split(",") if args.names else None
    rows = compare(runs, names)
    print(render_table(rows))
    out = Path(args.out) if args.out else Path(args.runs[0]).parent / "comparison.csv"
    write_comparison(out, rows)
    print(f"\nwritten {out}")
    return 0


def _read_series(path: Path, column: str):
    """``(T, N)`` array and link ids from ``trajectory.csv`` or a wide CSV
    whose header names one link per column."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    if "control_step" in rows[0] and "link" in rows[0]:
        ids = sorted({int(r["link"]) for r in rows})
        return fc.history_from_trajectory(rows, column, ids), ids
    cols = [c for c in rows[0] if c not in ("step", "time_s")]
    ids = [int(c) for c in cols]
    return np.array([[float(r[c]) for c in cols] for r in rows]), ids


def _weights_for(topo_ref, ids, K):
    topo = None if topo_ref in (None, "none") else _topology(topo_ref)
    if topo is None or K == 0:
        return fc.hop_weights(np.zeros((len(ids), len(ids)), dtype=bool), K, ids)
    idx = {z: i for i, z in enumerate(ids)}
    A = np.zeros((len(ids), len(ids)), dtype=bool)
    for z, d in topo.streams:
        if z in idx and d in idx:
            A[idx[z], idx[d]] = True
    return fc.hop_weights(A, K, ids)


def cmd_forecast_fit(args) -> int:
    y, ids = _read_series(Path(args.history), args.column)
    m, n = (args.m, args.n) if args.topology != "none" else (0, 0)
    W = _weights_for(args.topology, ids, max(m, n if args.q else 0))
    model = fc.fit(y, p=args.p, d=args.d, q=args.q, m=m, n=n, weights=W,
                   nonnegative=args.nonnegative)
    fc.save_model(model, args.model)
    print(f"fitted STARIMA({args.p},{args.d},{args.q}) on {y.shape[0]} steps x {y.shape[1]} links -> {args.model}")
    print("phi:", np.array2string(np.asarray(model.phi), precision=4))
    return 0


def cmd_forecast_predict(args) -> int:
    model = fc.load_model(args.model)
    y, ids = _read_series(Path(args.history), args.column)
    if list(model.weights.link_ids) and list(model.weights.link_ids) != ids:
        raise ValueError(f"history links {ids} differ from the model's {list(model.weights.link_ids)}")
    pred = fc.predict(model, y, args.horizon)
    out = Path(args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [str(z) for z in ids])
        for h, row in enumerate(pred, start=1):
            w.writerow([h] + [f"{v:.9f}" for v in row])
    print(f"{args.horizon}-step forecast for {len(ids)} links -> {out}")
    return 0


def _topology(ref):
    return default_benchmark() if ref in (None, "builtin") else load_topology_file(ref)


def cmd_topology_validate(args) -> int:
    topo = _topology(args.file)
    diags = validate_partition(topo)
    for d in diags:
        print(f"partition: {d}")
    if diags:
        return 1
    print(f"ok: {len(topo.links)} links, {len(topo.junctions)} junctions, "
          f"{len(topo.partition.subsystems)} subsystems")
    return 0


def cmd_topology_show(args) -> int:
    topo = _topology(args.file)
    print(serialize_topology(topo) if args.yaml else describe(topo))
    return 0


def cmd_bench(args) -> int:
    from .bench import run_benchmark

    print(json.dumps(run_benchmark(args.repeat), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="utnmpc", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one controller closed-loop on a scenario")
    r.add_argument("--scenario", default="default", help="scenario YAML, or 'default' for the shipped one")
    r.add_argument("--controller", required=True, choices=CONTROLLERS)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--workers", type=int, help=f"worker threads (default ${WORKERS_ENV} or 1)")
    r.add_argument("--rho", type=float, help="augmented-Lagrangian penalty")
    r.add_argument("--alpha0", type=float, help="initial multiplier step")
    r.add_argument("--tol", type=float, help="coordination residual tolerance")
    r.add_argument("--max-rounds", dest="max_rounds", type=int, help="coordination round cap")
    r.add_argument("--relaxation", type=float, help="under-relaxation of subsystem plans")
    r.add_argument("--no-sensitivity", action="store_true", help="drop the neighbor sensitivity term")
    r.add_argument("--opt-tol", dest="opt_tol", type=float, help="NLP optimality tolerance")
    r.add_argument("--max-iter", dest="max_iter", type=int, help="NLP iteration cap")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="tabulate metrics of several runs")
    c.add_argument("--runs", nargs="+", required=True, help="run directories; the first is the baseline")
    c.add_argument("--names", help="comma-separated column names")
    c.add_argument("--out", help="comparison.csv path (default: next to the first run)")
    c.set_defaults(fn=cmd_compare)

    f = sub.add_parser("forecast", help="STARIMA demand forecasting")
    fsub = f.add_subparsers(dest="action", required=True)
    ff = fsub.add_parser("fit", help="fit a model to a history CSV")
    ff.add_argument("--history", required=True, help="trajectory.csv or a wide CSV with one column per link")
    ff.add_argument("--model", required=True, help="output JSON")
    ff.add_argument("--column", default="f_in", help="trajectory column to model")
    ff.add_argument("--topology", default="builtin",
                    help="topology YAML for the spatial weights, 'builtin', or 'none' for a purely temporal model")
    for name, default in (("p", 2), ("d", 0), ("q", 1), ("m", 1), ("n", 1)):
        ff.add_argument(f"--{name}", type=int, default=default)
    ff.add_argument("--nonnegative", action="store_true", help="floor forecasts at zero")
    ff.set_defaults(fn=cmd_forecast_fit)
    fp = fsub.add_parser("predict", help="forecast from a fitted model")
    fp.add_argument("--model", required=True)
    fp.add_argument("--history", required=True)
    fp.add_argument("--column", default="f_in")
    fp.add_argument("--horizon", type=int, default=7)
    fp.add_argument("--out", required=True, help="output CSV")
    fp.set_defaults(fn=cmd_forecast_predict)

    t = sub.add_parser("topology", help="inspect network descriptions")
    tsub = t.add_subparsers(dest="action", required=True)
    tv = tsub.add_parser("validate")
    tv.add_argument("file", nargs="?", help="topology YAML (default: the built-in benchmark)")
    tv.set_defaults(fn=cmd_topology_validate)
    ts = tsub.add_parser("show")
    ts.add_argument("file", nargs="?")
    ts.add_argument("--yaml", action="store_true", help="print the normalized YAML instead of a summary")
    ts.set_defaults(fn=cmd_topology_show)

    b = sub.add_parser("bench", help="time the numba kernels against the Python fallback")
    b.add_argument("--repeat", type=int, default=200)
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ScenarioError, ComparisonError, TopologyError, ConfigParseError, fc.InsufficientHistoryError,
            fc.RankDeficientRegressionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
