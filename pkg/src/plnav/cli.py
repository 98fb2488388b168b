"""Command-line entry point.

    plnav simulate    --config scenario.yaml --out data/ [--seed N]
    plnav solve-ls    data/ [--out data/ls_solutions.csv]
    plnav solve-fgo   data/ [--ls FILE] [--out FILE] [--config C] [--max-iters N] [--fixed-sigma-p S]
    plnav evaluate    data/ [more_data/ ...] --out report/
    plnav paper-table [--config C] [--out report/] [--seed S] [--runs N] [--jobs J] [--reference]

Failures print one line to stderr,
``plnav-error code=<CODE> field=<FIELD> message=<json string>``, and exit
with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .dataio import (
    ERRORS_HEADER,
    TRAJECTORY_HEADER,
    DataFormatError,
    load_dataset,
    read_fgo,
    read_ls,
    write_cost_log,
    write_csv,
    write_dataset,
    write_fgo,
    write_ls,
)
from .frames import enu_rotation, geodetic_to_ecef
from .graph import ImuGapError, SolverError
from .metrics import fixture_report, improvement, reference_reports, render_csv, render_table
from .pipeline import FgoConfig, evaluate, ls_body_positions, monte_carlo, solve_fgo, solve_ls_epochs
from .pseudorange import GeometryError
from .sim import ScenarioError, signal_variants, simulate

log = logging.getLogger("plnav")

EXIT_CODES = {"config": 2, "data": 3, "imu_gap": 4, "geometry": 4, "solver": 5, "epoch_mismatch": 3}


class CliError(Exception):
    def __init__(self, code: str, message: str, field: str = "-"):
        super().__init__(message)
        self.code = code
        self.field = field


# ---------------------------------------------------------------- manifest


def _write_manifest(out_dir: Path, command: str, inputs: dict, outputs, seed=None, started=None) -> Path:
    """Merge this command's record into ``out_dir/manifest.json``."""
    path = Path(out_dir) / "manifest.json"
    try:
        data = json.loads(path.read_text()) if path.is_file() else {}
    except json.JSONDecodeError:
        data = {}
    runs = data.get("runs", [])
    runs = [r for r in runs if r.get("command") != command]
    runs.append({
        "command": command,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(str(Path(p).name) for p in outputs),
        "seed": seed,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })
    data = {"tool": "plnav", "version": __version__, "runs": runs}
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------- commands


def _fgo_config(args) -> FgoConfig:
    _, fgo = load_config(getattr(args, "config", None))
    if getattr(args, "max_iters", None) is not None:
        if args.max_iters < 1:
            raise ConfigError("--max-iters", "must be >= 1")
        fgo = replace(fgo, optimizer=replace(fgo.optimizer, max_iterations=args.max_iters))
    if getattr(args, "fixed_sigma_p", None) is not None:
        if not args.fixed_sigma_p > 0:
            raise ConfigError("--fixed-sigma-p", "must be > 0")
        fgo = replace(fgo, fixed_sigma_p=args.fixed_sigma_p)
    return fgo


def cmd_simulate(args) -> int:
    started = _now()
    cfg, _ = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds = simulate(cfg)
    out = Path(args.out)
    files = write_dataset(ds, out)
    _write_manifest(out, "simulate", {"config": args.config, "dataset": out}, files, cfg.seed, started)
    print(f"wrote {len(ds.imu)} IMU samples and {len(ds.epochs)} epochs to {out}")
    return 0


def cmd_solve_ls(args) -> int:
    started = _now()
    data = Path(args.dataset)
    ds = load_dataset(data)
    sols = solve_ls_epochs(ds)
    out = Path(args.out) if args.out else data / "ls_solutions.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ls(out, sols)
    _write_manifest(out.parent, "solve-ls", {"dataset": data}, [out], ds.config.seed, started)
    bad = sum(not s.converged for s in sols)
    print(f"{len(sols)} epochs, {len(sols) - bad} converged, {bad} flagged -> {out}")
    return 0


def cmd_solve_fgo(args) -> int:
    started = _now()
    data = Path(args.dataset)
    ds = load_dataset(data)
    ls_path = Path(args.ls) if args.ls else data / "ls_solutions.csv"
    ls = read_ls(ls_path)
    fgo_cfg = _fgo_config(args)
    result, _, used = solve_fgo(ds, ls, fgo_cfg)
    out = Path(args.out) if args.out else data / "fgo_solution.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    cost_path = out.with_name(out.stem + "_cost.csv")
    write_fgo(out, result.states)
    write_cost_log(cost_path, result.cost_history)
    _write_manifest(out.parent, "solve-fgo", {"dataset": data, "ls": ls_path, "config": args.config},
                    [out, cost_path], ds.config.seed, started)
    print(f"{len(result.states)} states, cost {result.initial_cost:.6g} -> {result.final_cost:.6g} "
          f"in {result.iterations} iterations ({result.message}) -> {out}")
    return 0


def _check_alignment(ls, fgo, truth) -> None:
    ls_ep = {round(s.epoch, 9) for s in ls if s.converged}
    fgo_ep = {round(s.epoch, 9) for s in fgo}
    odd = sorted(ls_ep ^ fgo_ep)
    if truth is not None:
        odd += sorted(e for e in fgo_ep if e < truth.t[0] - 1e-9 or e > truth.t[-1] + 1e-9)
    if odd:
        shown = ", ".join(f"{e:g}" for e in odd[:10])
        raise CliError("epoch_mismatch", f"epochs not aligned between LS, FGO and truth: {shown}", "epoch")


def cmd_evaluate(args) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, err_rows, traj_rows, imp_rows = [], [], [], []
    for d in map(Path, args.datasets):
        ds = load_dataset(d, require_truth=True)
        ls = read_ls(d / "ls_solutions.csv")
        fgo = read_fgo(d / "fgo_solution.csv")
        _check_alignment(ls, fgo, ds.truth)
        label = ds.config.name
        ls_rep, fgo_rep = evaluate(ds, ls, fgo, label)
        reports += [ls_rep, fgo_rep]
        ok = [s for s in ls if s.converged]
        ep = [s.epoch for s in ok]
        for rep in (ls_rep, fgo_rep):
            err_rows += [(label, rep.algorithm, e, a, b) for e, a, b in zip(ep, rep.e2d, rep.e3d)]
        C = enu_rotation(ds.config.origin)
        o = geodetic_to_ecef(ds.config.origin)
        enu = lambda x: (np.atleast_2d(x) - o) @ C.T  # noqa: E731
        t_enu = enu(ds.truth.interpolate_position(ep))
        l_enu = enu(ls_body_positions(ds, ok))
        f_enu = enu(np.array([s.position for s in fgo]))
        traj_rows += [(label, e, *t_enu[k, :2], *l_enu[k, :2], *f_enu[k, :2]) for k, e in enumerate(ep)]
        imp_rows.append((label, ls_rep.mae_2d, fgo_rep.mae_2d, improvement(fgo_rep.mae_2d, ls_rep.mae_2d),
                         ls_rep.mae_3d, fgo_rep.mae_3d, improvement(fgo_rep.mae_3d, ls_rep.mae_3d)))
    files = _write_reports(out, reports, imp_rows)
    write_csv(out / "errors.csv", ERRORS_HEADER, err_rows)
    write_csv(out / "trajectory.csv", TRAJECTORY_HEADER, traj_rows)
    files += [out / "errors.csv", out / "trajectory.csv"]
    _write_manifest(out, "evaluate", {"datasets": ",".join(args.datasets)}, files, None, started)
    sys.stdout.write(render_table(reports))
    return 0


IMPROVEMENT_HEADER = ("signals", "ls_mae_2d", "fgo_mae_2d", "improvement_2d_pct",
                      "ls_mae_3d", "fgo_mae_3d", "improvement_3d_pct")


def _write_reports(out: Path, reports, imp_rows) -> list[Path]:
    (out / "report.csv").write_text(render_csv(reports))
    text = render_table(reports)
    if imp_rows:
        text += "\nFGO vs LS mean error reduction\n"
        text += "".join(f"  {r[0]:<12} 2D {r[3]:6.1f} %   3D {r[6]:6.1f} %\n" for r in imp_rows)
        write_csv(out / "improvement.csv", IMPROVEMENT_HEADER, imp_rows)
    (out / "report.txt").write_text(text)
    return [out / "report.csv", out / "report.txt"] + ([out / "improvement.csv"] if imp_rows else [])


RUNS_HEADER = ("signals", "seed", "pdop", "hdop", "vdop", "ls_mae_2d", "ls_max_2d", "ls_mae_3d", "ls_max_3d",
               "fgo_mae_2d", "fgo_max_2d", "fgo_mae_3d", "fgo_max_3d", "fgo_iterations")


def _mean_report(reps):
    r0 = reps[0]
    m = lambda name: float(np.mean([getattr(r, name) for r in reps]))  # noqa: E731
    return fixture_report(r0.label, r0.algorithm, m("mean_pdop"), m("mean_hdop"), m("mean_vdop"),
                          m("mae_2d"), m("max_2d"), m("mae_3d"), m("max_3d"))


def cmd_paper_table(args) -> int:
    started = _now()
    if args.reference:
        sys.stdout.write(render_table(reference_reports()))
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            files = _write_reports(out, reference_reports(), [])
            _write_manifest(out, "paper-table", {"reference": True}, files, None, started)
        return 0
    if args.runs < 1:
        raise ConfigError("--runs", "must be >= 1")
    template, _ = load_config(args.config)
    fgo_cfg = _fgo_config(args)
    seed0 = template.seed if args.seed is None else args.seed
    variants = signal_variants(template)
    configs = [replace(v, seed=seed0 + k) for k in range(args.runs) for v in variants]
    runs = monte_carlo(configs, fgo_cfg, jobs=args.jobs)

    names = [v.name for v in variants]
    reports, imp_rows, run_rows = [], [], []
    for name in names:
        mine = [r for r in runs if r.name == name]
        ls_m, fgo_m = _mean_report([r.ls for r in mine]), _mean_report([r.fgo for r in mine])
        reports += [ls_m, fgo_m]
        imp_rows.append((name, ls_m.mae_2d, fgo_m.mae_2d, improvement(fgo_m.mae_2d, ls_m.mae_2d),
                         ls_m.mae_3d, fgo_m.mae_3d, improvement(fgo_m.mae_3d, ls_m.mae_3d)))
    for r in runs:
        run_rows.append((r.name, r.seed, r.ls.mean_pdop, r.ls.mean_hdop, r.ls.mean_vdop,
                         r.ls.mae_2d, r.ls.max_2d, r.ls.mae_3d, r.ls.max_3d,
                         r.fgo.mae_2d, r.fgo.max_2d, r.fgo.mae_3d, r.fgo.max_3d, r.fgo_iterations))
    text = render_table(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = _write_reports(out, reports, imp_rows)
        write_csv(out / "runs.csv", RUNS_HEADER, run_rows)
        files.append(out / "runs.csv")
        _write_manifest(out, "paper-table", {"config": args.config, "runs": args.runs}, files, seed0, started)
    sys.stdout.write(text)
    for row in imp_rows:
        print(f"{row[0]:<12} 3D error reduction {row[6]:6.1f} %")
    return 0


# ---------------------------------------------------------------- plumbing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plnav", description="GNSS/pseudolite LS and IMU factor-graph positioning")
    p.add_argument("--version", action="version", version=f"plnav {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", help="YAML config (defaults if omitted)")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--seed", type=int, help="override scenario seed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("solve-ls", help="per-epoch single-difference LS fixes")
    s.add_argument("dataset")
    s.add_argument("--out", help="output CSV (default: <dataset>/ls_solutions.csv)")
    s.set_defaults(func=cmd_solve_ls)

    s = sub.add_parser("solve-fgo", help="factor graph smoothing of the LS fixes with IMU")
    s.add_argument("dataset")
    s.add_argument("--ls", help="LS solutions CSV (default: <dataset>/ls_solutions.csv)")
    s.add_argument("--out", help="output CSV (default: <dataset>/fgo_solution.csv)")
    s.add_argument("--config", help="YAML config; only its solver section is used")
    s.add_argument("--max-iters", type=int, dest="max_iters")
    s.add_argument("--fixed-sigma-p", type=float, dest="fixed_sigma_p",
                   help="use this position sigma (m) instead of the LS covariance")
    s.set_defaults(func=cmd_solve_fgo)

    s = sub.add_parser("evaluate", help="error statistics against truth")
    s.add_argument("datasets", nargs="+", help="dataset directories holding both solutions")
    s.add_argument("--out", required=True, help="report directory")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("paper-table", help="four-signal-set LS vs FGO comparison table")
    s.add_argument("--config", help="YAML config used as the scenario template")
    s.add_argument("--out", help="report directory")
    s.add_argument("--seed", type=int, help="first seed")
    s.add_argument("--runs", type=int, default=1, help="Monte Carlo runs per signal set")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.add_argument("--max-iters", type=int, dest="max_iters")
    s.add_argument("--fixed-sigma-p", type=float, dest="fixed_sigma_p")
    s.add_argument("--reference", action="store_true", help="print the published reference table instead")
    s.set_defaults(func=cmd_paper_table)
    return p


def _error_line(code: str, field: str, message: str) -> str:
    return f"plnav-error code={code} field={field} message={json.dumps(message)}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        err = (e.code, e.field, str(e))
    except ConfigError as e:
        err = ("config", e.field, str(e))
    except ScenarioError as e:
        err = ("config", f"scenario.{e.field}", str(e))
    except DataFormatError as e:
        err = ("data", e.path, str(e))
    except ImuGapError as e:
        err = ("imu_gap", "imu.csv", str(e))
    except GeometryError as e:
        err = ("geometry", "-", str(e))
    except SolverError as e:
        err = ("solver", "-", str(e))
    except (OSError, ValueError) as e:
        err = ("data", "-", str(e))
    print(_error_line(*err), file=sys.stderr)
    return EXIT_CODES.get(err[0], 1)


if __name__ == "__main__":
    sys.exit(main())
