"""Command-line entry point: ``cldnn {run,grid,regress,diagnose,table}``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgio
from .control import settling_time
from .dnn import ActivationKind, DnnModel, forward
from .history import HistoryStack, identifiability_rank
from .regression import NreProblem, RegressionEstimator, run_regression
from .sim import (
    ExperimentConfig, compare_table, dumps, format_table, grid_configs, grid_summary,
    run_experiment, run_grid,
)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _fail(msg, code=EXIT_USAGE):
    print(f"error: {msg}", file=sys.stderr)
    return code


def _resolve_config(args) -> ExperimentConfig:
    conf = cfgio.load(args.config) if args.config else ExperimentConfig()
    over = {}
    seed = args.seed if args.seed is not None else os.environ.get("CLDNN_SEED")
    if seed is not None:
        try:
            over["seed"] = int(seed)
        except ValueError as exc:
            raise cfgio.ConfigError(f"seed must be an integer, got {seed!r}") from exc
    for attr, key in (("law", "law"), ("plant", "plant"), ("traj", "trajectory"),
                      ("duration", "duration"), ("dt", "dt")):
        val = getattr(args, attr, None)
        if val is not None:
            over[key] = val
    try:
        return replace(conf, **over)
    except ValueError as exc:
        raise cfgio.ConfigError(str(exc)) from exc


def _run_name(c: ExperimentConfig):
    return f"{c.plant}_{c.trajectory}_{c.law}_seed{c.seed}"


def _write_run(result, out: Path):
    name = _run_name(result.config)
    result.write_series(out / f"{name}.csv")
    result.write_f_error(out / f"{name}_ferr.csv")
    (out / f"{name}.json").write_text(dumps(result.metrics()))


def cmd_run(args):
    conf = _resolve_config(args)
    if args.dump_config:
        sys.stdout.write(cfgio.dumps(conf))
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(conf)
    _write_run(result, out)
    print(f"{_run_name(conf)}: rms_e={result.rms_e:.4g} rms_u={result.rms_u:.4g} "
          f"rms_fapprox={result.rms_fapprox:.4g} rms_fapprox_offtraj={result.rms_fapprox_offtraj:.4g} "
          f"fe_satisfied_ever={result.fe_satisfied_ever}")
    if result.diverged:
        print(f"aborted: {result.message}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _tables(records, out: Path):
    cells = {}
    for rec in records:
        cells.setdefault((rec["plant"], rec["trajectory"], rec["seed"]), {})[rec["law"]] = rec
    texts = []
    for (plant, traj, seed), laws in sorted(cells.items()):
        if "baseline" not in laws:
            raise KeyError(f"no baseline result for {plant}/{traj} seed {seed}")
        cmp = compare_table(laws)
        stem = f"table_{plant}_{traj}_seed{seed}"
        cmp.write_csv(out / f"{stem}.csv")
        (out / f"{stem}.json").write_text(cmp.as_json())
        texts.append(format_table(cmp))
    return texts


def cmd_grid(args):
    base = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_grid(base, workers=args.workers)
    for r in results:
        _write_run(r, out)
    records = grid_summary(results)
    (out / "summary.json").write_text(dumps(records))
    for text in _tables(records, out):
        print(text, end="\n\n")
    bad = [r for r in results if r.diverged]
    return EXIT_FAILED if bad else EXIT_OK


def cmd_table(args):
    src = Path(args.results_dir)
    summary = src / "summary.json"
    if summary.exists():
        records = json.loads(summary.read_text())
    else:
        records = [json.loads(p.read_text()) for p in sorted(src.glob("*.json"))
                   if not p.name.startswith("table_")]
    if not records:
        return _fail(f"no results found in {src}")
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    try:
        texts = _tables(records, out)
    except (KeyError, ValueError) as exc:
        return _fail(str(exc).strip("'\""))
    print("\n\n".join(texts))
    return EXIT_OK


def _regress_signal(t):
    t = 8.0 * t
    return 2.0 * np.array([np.sin(1.3 * t) * np.cos(0.37 * t), np.sin(0.71 * t + 1) * np.cos(1.9 * t),
                           np.cos(2.3 * t) * np.sin(0.53 * t + 0.4)])


def cmd_regress(args):
    """Fit a randomly drawn network target with one of the regression laws."""
    model = DnnModel(3, (3, 3, 2))
    seed = args.seed if args.seed is not None else int(os.environ.get("CLDNN_SEED", 0))
    rng = np.random.default_rng(seed)
    mask = model.live_mask()
    theta_star = rng.uniform(-2.0, 2.0, model.n_params) * mask
    step = rng.normal(size=model.n_params) * mask
    theta0 = theta_star - args.offset * step / np.linalg.norm(step)
    problem = NreProblem(lambda x: forward(model, x, theta_star), ((-2.0,) * 3, (2.0,) * 3))
    gain = args.gamma1 if args.gamma1 is not None else (6.0 if args.law == "gradient" else 0.2)
    est = RegressionEstimator(model, theta0, gamma1=gain, gamma2=0.0, law=args.law,
                              stack=HistoryStack(200, 5))
    duration = args.duration if args.duration is not None else 60.0
    dt = args.dt if args.dt is not None else 0.01
    trace = run_regression(est, problem, _regress_signal, duration, dt, theta_star=theta_star)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / f"regress_{args.law}_seed{seed}.csv")
    arr = trace.as_arrays()
    print(f"{args.law}: |theta error| {arr['theta_err'][0]:.4g} -> {arr['theta_err'][-1]:.4g}, "
          f"|y error| {arr['y_err'][0]:.4g} -> {arr['y_err'][-1]:.4g}")
    return EXIT_OK


def cmd_diagnose(args):
    if args.what == "settling":
        try:
            t = settling_time(args.k_delta, args.lam1, args.z0, args.delta_f, args.delta_acc)
        except ValueError as exc:
            print(str(exc))
            return EXIT_FAILED
        print(f"settling time: {t!r} s")
        return EXIT_OK
    with open(args.points) as fh:
        pts = np.array([[float(v) for v in row] for row in csv.reader(fh) if row and not row[0].startswith("#")])
    widths = tuple(int(w) for w in args.widths.split(","))
    model = DnnModel(pts.shape[1], widths, ActivationKind(args.activation))
    seed = args.seed if args.seed is not None else int(os.environ.get("CLDNN_SEED", 0))
    theta = model.random_theta(np.random.default_rng(seed))
    rep = identifiability_rank(pts, model, theta)
    print(f"rank: {rep.rank} / {rep.n_params}")
    print(f"identifiable: {str(rep.identifiable).lower()}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="cldnn", description="Concurrent-learning DNN control and regression experiments")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, with_law=True):
        sp.add_argument("--config")
        sp.add_argument("--out", default="results")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--duration", type=float)
        sp.add_argument("--dt", type=float)
        if with_law:
            sp.add_argument("--law", choices=("baseline", "cl1", "cl2"))
            sp.add_argument("--plant", choices=("f1", "f2", "zero"))
            sp.add_argument("--traj", choices=("circular", "sinusoidal"))

    run = sub.add_parser("run", help="simulate one closed-loop experiment")
    common(run)
    run.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    run.set_defaults(func=cmd_run)

    grid = sub.add_parser("grid", help="run every plant x trajectory x law combination")
    common(grid, with_law=False)
    grid.add_argument("--workers", type=int, default=1)
    grid.set_defaults(func=cmd_grid)

    reg = sub.add_parser("regress", help="regression demo on a network-generated target")
    reg.add_argument("--law", choices=("gradient", "cl1", "cl2"), default="cl1")
    reg.add_argument("--out", default="results")
    reg.add_argument("--seed", type=int)
    reg.add_argument("--duration", type=float)
    reg.add_argument("--dt", type=float)
    reg.add_argument("--gamma1", type=float)
    reg.add_argument("--offset", type=float, default=1.0, help="initial distance from the target weights")
    reg.set_defaults(func=cmd_regress)

    diag = sub.add_parser("diagnose", help="settling-time and identifiability calculators")
    dsub = diag.add_subparsers(dest="what", required=True)
    st = dsub.add_parser("settling")
    st.add_argument("--k-delta", type=float, required=True)
    st.add_argument("--lam1", type=float, required=True)
    st.add_argument("--z0", type=float, required=True)
    st.add_argument("--delta-f", type=float, required=True)
    st.add_argument("--delta-acc", type=float, required=True)
    ident = dsub.add_parser("identifiability")
    ident.add_argument("--points", required=True, help="CSV file, one input point per row")
    ident.add_argument("--widths", default="3,3,2")
    ident.add_argument("--activation", default="tanh", choices=[a.value for a in ActivationKind])
    ident.add_argument("--seed", type=int)
    diag.set_defaults(func=cmd_diagnose)

    tab = sub.add_parser("table", help="build comparison tables from saved results")
    tab.add_argument("results_dir")
    tab.add_argument("--out")
    tab.set_defaults(func=cmd_table)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except cfgio.ConfigError as exc:
        return _fail(str(exc))
    except OSError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
