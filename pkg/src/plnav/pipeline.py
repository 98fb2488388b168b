"""End-to-end processing: per-epoch LS, graph construction and solve, evaluation.

Functions here accept any dataset object exposing ``epochs``, ``rover_obs``,
``base_obs``, ``transmitters`` (per epoch), ``base_position``, ``imu`` and
``config`` (with ``noise``, ``lever`` and ``origin``), i.e. a
:class:`~plnav.sim.SimulatedDataset` or one loaded from CSV files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .frames import ecef_to_geodetic, enu_rotation
from .graph import (
    OptimizationResult,
    OptimizerConfig,
    PriorSigmas,
    build_graph,
    initial_states,
    make_prior,
    solve,
)
from .metrics import ErrorReport, position_errors, summarize
from .pseudorange import (
    GeometryError,
    LsConfig,
    LsSolution,
    difference_epoch,
    solve_ls,
)


@dataclass(frozen=True)
class FgoConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    prior: PriorSigmas = field(default_factory=PriorSigmas)
    sigma_p_floor: float = 0.5
    fixed_sigma_p: float | None = None
    initial_yaw: float | None = None
    align_window: float = 20.0


def _group(obs, epochs):
    out = {k: [] for k in range(len(epochs))}
    index = {round(float(e), 9): k for k, e in enumerate(epochs)}
    for o in obs:
        k = index.get(round(float(o.epoch), 9))
        if k is not None:
            out[k].append(o)
    return out


def solve_ls_epochs(dataset, max_iterations: int = 20, step_tolerance: float = 1e-6) -> list[LsSolution]:
    """One LS fix per epoch; the previous fix seeds the next. Failed epochs come back unconverged."""
    rover = _group(dataset.rover_obs, dataset.epochs)
    base = _group(dataset.base_obs, dataset.epochs)
    guess = np.asarray(dataset.base_position, dtype=float)
    clock = 0.0
    out = []
    for k, e in enumerate(dataset.epochs):
        sd = difference_epoch(rover[k], base[k])
        cfg = LsConfig(dataset.base_position, guess, max_iterations, step_tolerance, clock)
        try:
            sol = solve_ls(sd, dataset.transmitters[k], cfg)
        except GeometryError:
            sol = LsSolution.failed(float(e), len(sd))
        out.append(sol)
        if sol.converged:
            guess, clock = sol.position, sol.clock
    return out


def solve_fgo(dataset, ls_solutions, cfg: FgoConfig | None = None):
    """Build and solve the graph over the converged LS epochs.

    Returns ``(result, graph, used_solutions)``.
    """
    cfg = cfg or FgoConfig()
    used = [s for s in ls_solutions if s.converged]
    if not used:
        raise ValueError("no converged LS epochs to build a graph from")
    lever = np.asarray(dataset.config.lever, dtype=float)
    graph = build_graph(used, dataset.imu, dataset.config.noise, None, lever,
                        sigma_p_floor=cfg.sigma_p_floor, fixed_sigma_p=cfg.fixed_sigma_p)
    level = enu_rotation(ecef_to_geodetic(used[0].position)).T
    states0 = initial_states(graph, used, lever, level, yaw=cfg.initial_yaw, align_window=cfg.align_window)
    graph = graph.with_prior(make_prior(states0[0], used[0], cfg.prior))
    result = solve(graph, states0, cfg.optimizer)
    return result, graph, used


def ls_body_positions(dataset, ls_solutions) -> np.ndarray:
    """LS antenna fixes moved to the IMU point with the reference attitude."""
    ant = np.array([s.position for s in ls_solutions])
    R = dataset.truth.interpolate_rotation([s.epoch for s in ls_solutions])
    return ant - R @ np.asarray(dataset.config.lever, dtype=float)


@dataclass
class ScenarioRun:
    name: str
    seed: int
    ls: list
    fgo: OptimizationResult
    ls_report: ErrorReport
    fgo_report: ErrorReport
    seconds: float


def evaluate(dataset, ls_solutions, fgo, label: str) -> tuple[ErrorReport, ErrorReport]:
    """LS and FGO reports; ``fgo`` is an OptimizationResult or its list of states."""
    states = getattr(fgo, "states", fgo)
    origin = dataset.config.origin
    ok = [s for s in ls_solutions if s.converged]
    ep = [s.epoch for s in ok]
    dops = [s.dop for s in ok]
    ls_err = position_errors(ep, ls_body_positions(dataset, ok), dataset.truth, origin)
    f_ep = [s.epoch for s in states]
    fgo_err = position_errors(f_ep, np.array([s.position for s in states]), dataset.truth, origin)
    return summarize(ls_err, dops, label, "LS"), summarize(fgo_err, dops, label, "FGO")


def run_scenario(scenario_cfg, fgo_cfg: FgoConfig | None = None) -> ScenarioRun:
    from .sim import simulate

    t0 = time.perf_counter()
    ds = simulate(scenario_cfg)
    ls = solve_ls_epochs(ds)
    result, _, _ = solve_fgo(ds, ls, fgo_cfg)
    ls_rep, fgo_rep = evaluate(ds, ls, result, scenario_cfg.name)
    return ScenarioRun(scenario_cfg.name, scenario_cfg.seed, ls, result, ls_rep, fgo_rep, time.perf_counter() - t0)


@dataclass(frozen=True)
class RunSummary:
    """Per-run numbers kept by the Monte Carlo harness."""

    name: str
    seed: int
    ls: ErrorReport
    fgo: ErrorReport
    fgo_iterations: int
    cost_decreasing: bool
    seconds: float


def _summary_job(args) -> RunSummary:
    cfg, fgo_cfg = args
    run = run_scenario(cfg, fgo_cfg)
    h = np.asarray(run.fgo.cost_history)
    return RunSummary(cfg.name, cfg.seed, run.ls_report, run.fgo_report, run.fgo.iterations,
                      bool(np.all(np.diff(h) < 0)), run.seconds)


def monte_carlo(configs, fgo_cfg: FgoConfig | None = None, jobs: int = 1) -> list[RunSummary]:
    """Run every scenario config; results come back in input order whatever ``jobs`` is."""
    work = [(c, fgo_cfg) for c in configs]
    if jobs <= 1:
        return [_summary_job(w) for w in work]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_summary_job, work, chunksize=1))
