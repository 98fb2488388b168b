"""Factor graph over GNSS/PL epochs and its Levenberg-Marquardt batch solver.

One state node per LS epoch. Every node carries a position factor; each pair
of consecutive nodes is linked by one preintegrated IMU factor and one bias
random-walk factor; node 0 carries a prior.

The cost is the plain sum of squared Mahalanobis norms of all residuals.
Because every factor touches at most two consecutive nodes, the normal
matrix is banded with half-bandwidth 2 * 15 - 1 in the natural node
ordering, and the damped system is solved with a banded Cholesky.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, solve_triangular, solveh_banded
from scipy.optimize import least_squares

from .frames import apply_lever_arm, gravity_ecef, right_jacobian_inv, skew, so3_exp, so3_log
from .navstate import BA, BG, POS, ROT, TANGENT_DIM, ImuBias, NavState, StateDelta, retract
from .preintegration import (
    ImuNoiseParams,
    ImuSample,
    ImuSeries,
    PreintegratedImu,
    imu_residual,
    integrate_sample,
    preintegrate_spans,
    residual_jacobians,
)
from .pseudorange import LsSolution

log = logging.getLogger(__name__)

__all__ = [
    "BiasFactor",
    "FactorGraph",
    "ImuFactor",
    "ImuGapError",
    "NavState",
    "OptimizationResult",
    "OptimizerConfig",
    "PositionFactor",
    "PriorFactor",
    "SolverError",
    "StateDelta",
    "bias_residual",
    "build_graph",
    "initial_states",
    "make_prior",
    "position_residual",
    "retract",
    "solve",
    "total_cost",
]


class ImuGapError(ValueError):
    """IMU stream has a hole inside an inter-epoch span."""


class SolverError(RuntimeError):
    """Non-finite residuals or an unsolvable damped system."""


def _whitener(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, rtol=1e-9, atol=1e-15):
        raise ValueError("covariance is not symmetric")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    return solve_triangular(L, np.eye(len(cov)), lower=True)


class _Factor:
    keys: tuple[int, ...]
    kind: str
    sqrt_info: np.ndarray

    def residual(self, states: Sequence[NavState]) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, states: Sequence[NavState]) -> list[np.ndarray]:
        raise NotImplementedError

    def cost(self, states: Sequence[NavState]) -> float:
        e = self.sqrt_info @ self.residual(states)
        return float(e @ e)


@dataclass
class PriorFactor(_Factor):
    target: NavState
    covariance: np.ndarray
    key: int = 0

    kind = "prior"

    def __post_init__(self):
        self.keys = (self.key,)
        self.sqrt_info = _whitener(self.covariance)

    def residual(self, states):
        s, t = states[self.key], self.target
        return np.concatenate(
            [
                so3_log(t.rotation.T @ s.rotation),
                s.position - t.position,
                s.velocity - t.velocity,
                s.bias.accel - t.bias.accel,
                s.bias.gyro - t.bias.gyro,
            ]
        )

    def jacobians(self, states):
        J = np.eye(TANGENT_DIM)
        s, t = states[self.key], self.target
        J[ROT, ROT] = right_jacobian_inv(so3_log(t.rotation.T @ s.rotation))
        return [J]


@dataclass
class ImuFactor(_Factor):
    i: int
    j: int
    pre: PreintegratedImu
    gravity: np.ndarray

    kind = "imu"

    def __post_init__(self):
        self.keys = (self.i, self.j)
        self.gravity = np.asarray(self.gravity, dtype=float)
        self.sqrt_info = _whitener(self.pre.covariance)

    def residual(self, states):
        return imu_residual(states[self.i], states[self.j], self.pre, self.gravity).vector()

    def jacobians(self, states):
        Ji, Jj = residual_jacobians(states[self.i], states[self.j], self.pre, self.gravity)
        return [Ji, Jj]


@dataclass
class BiasFactor(_Factor):
    i: int
    j: int
    accel_cov: np.ndarray
    gyro_cov: np.ndarray

    kind = "bias"

    def __post_init__(self):
        self.keys = (self.i, self.j)
        cov = np.zeros((6, 6))
        cov[:3, :3] = self.accel_cov
        cov[3:, 3:] = self.gyro_cov
        self.sqrt_info = _whitener(cov)

    def residual(self, states):
        da, dg = bias_residual(states[self.i], states[self.j])
        return np.concatenate([da, dg])

    def jacobians(self, states):
        Ji = np.zeros((6, TANGENT_DIM))
        Ji[:3, BA] = -np.eye(3)
        Ji[3:, BG] = -np.eye(3)
        return [Ji, -Ji]


@dataclass
class PositionFactor(_Factor):
    i: int
    measurement: np.ndarray
    covariance: np.ndarray
    lever: np.ndarray

    kind = "position"

    def __post_init__(self):
        self.keys = (self.i,)
        self.measurement = np.asarray(self.measurement, dtype=float)
        self.lever = np.asarray(self.lever, dtype=float)
        self.sqrt_info = _whitener(self.covariance)

    def residual(self, states):
        return position_residual(states[self.i], self)

    def jacobians(self, states):
        R = states[self.i].rotation
        J = np.zeros((3, TANGENT_DIM))
        J[:, ROT] = -R @ skew(self.lever)
        J[:, POS] = np.eye(3)
        return [J]


def position_residual(s: NavState, f: PositionFactor) -> np.ndarray:
    return apply_lever_arm(s.rotation, s.position, f.lever) - f.measurement


def bias_residual(s_i: NavState, s_j: NavState) -> tuple[np.ndarray, np.ndarray]:
    return s_j.bias.accel - s_i.bias.accel, s_j.bias.gyro - s_i.bias.gyro


@dataclass
class FactorGraph:
    num_states: int
    epochs: np.ndarray
    factors: list = field(default_factory=list)

    def add(self, factor: _Factor) -> None:
        if any(k < 0 or k >= self.num_states for k in factor.keys):
            raise IndexError(f"factor keys {factor.keys} outside graph of {self.num_states} states")
        self.factors.append(factor)

    def count(self, kind: str) -> int:
        return sum(1 for f in self.factors if f.kind == kind)

    def of_kind(self, kind: str) -> list:
        return [f for f in self.factors if f.kind == kind]

    def with_prior(self, prior: PriorFactor) -> "FactorGraph":
        rest = [f for f in self.factors if f.kind != "prior"]
        return FactorGraph(self.num_states, self.epochs, [prior] + rest)


def total_cost(graph: FactorGraph, states: Sequence[NavState]) -> float:
    total = 0.0
    for f in graph.factors:  # fixed order
        total += f.cost(states)
    return total


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 100
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    cost_tolerance: float = 1e-10
    step_tolerance: float = 1e-9
    max_lambda: float = 1e12
    # Decreases below this are at the round-off floor of the whitened residuals.
    absolute_cost_tolerance: float = 1e-11

    def __post_init__(self):
        if not (self.max_iterations > 0 and self.initial_lambda > 0 and self.cost_tolerance > 0
                and self.step_tolerance > 0):
            raise ValueError("optimizer settings must be positive")
        if not (self.lambda_up > 1.0 > self.lambda_down > 0.0):
            raise ValueError("need lambda_up > 1 > lambda_down > 0")


@dataclass
class FactorReport:
    kind: str
    keys: tuple
    cost: float


@dataclass
class OptimizationResult:
    states: list
    final_cost: float
    initial_cost: float
    iterations: int
    converged: bool
    cost_history: list
    factor_report: list
    message: str = ""


def _linearize(graph: FactorGraph, states, n: int):
    """Whitened residual, gradient J^T r and dense J^T J."""
    H = np.zeros((n, n))
    g = np.zeros(n)
    cost = 0.0
    for f in graph.factors:
        W = f.sqrt_info
        r = W @ f.residual(states)
        if not np.all(np.isfinite(r)):
            raise SolverError(f"non-finite residual in {f.kind} factor {f.keys}")
        cost += float(r @ r)
        blocks = [W @ J for J in f.jacobians(states)]
        for ka, Ja in zip(f.keys, blocks):
            sa = slice(ka * TANGENT_DIM, (ka + 1) * TANGENT_DIM)
            g[sa] += Ja.T @ r
            for kb, Jb in zip(f.keys, blocks):
                sb = slice(kb * TANGENT_DIM, (kb + 1) * TANGENT_DIM)
                H[sa, sb] += Ja.T @ Jb
    return cost, g, H


def _bandwidth(graph: FactorGraph) -> int:
    gap = max((max(f.keys) - min(f.keys) for f in graph.factors), default=0)
    return (gap + 1) * TANGENT_DIM - 1


def _solve_damped(H: np.ndarray, g: np.ndarray, lam: float, bw: int) -> np.ndarray:
    d = np.diag(H).copy()
    d = np.maximum(d, 1e-12 * max(1.0, float(d.max())))
    A = H + lam * np.diag(d)
    n = len(g)
    ab = np.zeros((bw + 1, n))
    for k in range(bw + 1):
        ab[k, : n - k] = np.diagonal(A, -k)
    return solveh_banded(ab, -g, lower=True)


def _retract_all(states, delta):
    return [retract(s, delta[k * TANGENT_DIM:(k + 1) * TANGENT_DIM]) for k, s in enumerate(states)]


def solve(graph: FactorGraph, initial_states: Sequence[NavState],
          cfg: OptimizerConfig | None = None) -> OptimizationResult:
    """Levenberg-Marquardt with multiplicative (Marquardt) diagonal damping.

    A step is accepted only if it lowers the cost, so the recorded cost
    history is strictly decreasing.
    """
    cfg = cfg or OptimizerConfig()
    if graph.num_states < 1 or len(initial_states) != graph.num_states:
        raise ValueError("initial_states must hold one state per graph node")
    touched = {k for f in graph.factors for k in f.keys}
    if touched != set(range(graph.num_states)):
        raise ValueError(f"states {sorted(set(range(graph.num_states)) - touched)} have no factor")

    n = graph.num_states * TANGENT_DIM
    bw = _bandwidth(graph)
    states = list(initial_states)
    cost, g, H = _linearize(graph, states, n)
    initial_cost = cost
    history = [cost]
    lam = cfg.initial_lambda
    converged = False
    message = "max iterations"
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        accepted = False
        while lam <= cfg.max_lambda:
            try:
                delta = _solve_damped(H, g, lam, bw)
            except (LinAlgError, ValueError):
                lam *= cfg.lambda_up
                continue
            trial = _retract_all(states, delta)
            new_cost = total_cost(graph, trial)
            if math.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            lam *= cfg.lambda_up
        if not accepted:
            converged = True
            message = "no further decrease possible"
            break
        drop = cost - new_cost
        rel = drop / max(cost, 1e-300)
        step = float(np.linalg.norm(delta))
        states = trial
        lam = max(lam * cfg.lambda_down, 1e-15)
        log.debug("iter %d cost %.6e -> %.6e lambda %.1e", it, cost, new_cost, lam)
        cost, g, H = _linearize(graph, states, n)
        history.append(cost)
        if rel < cfg.cost_tolerance or step < cfg.step_tolerance or drop < cfg.absolute_cost_tolerance:
            converged = True
            if rel < cfg.cost_tolerance:
                message = "relative cost change"
            elif step < cfg.step_tolerance:
                message = "step size"
            else:
                message = "absolute cost change"
            break

    report = [FactorReport(f.kind, f.keys, f.cost(states)) for f in graph.factors]
    return OptimizationResult(
        states=states,
        final_cost=cost,
        initial_cost=initial_cost,
        iterations=it,
        converged=converged,
        cost_history=history,
        factor_report=report,
        message=message,
    )


def _span_indices(t: np.ndarray, t_i: float, t_j: float, eps: float = 1e-9) -> tuple[int, int]:
    start = int(np.searchsorted(t, t_i + eps, side="right"))
    stop = int(np.searchsorted(t, t_j + eps, side="right"))
    return start, stop


def build_graph(
    ls_solutions: Sequence[LsSolution],
    imu: ImuSeries | Sequence[ImuSample],
    noise: ImuNoiseParams,
    prior: PriorFactor | None,
    lever,
    sigma_p_floor: float = 0.5,
    fixed_sigma_p: float | None = None,
    bias_lin: ImuBias | None = None,
) -> FactorGraph:
    """Assemble the graph from time-sorted, converged LS fixes and the IMU stream.

    Gravity for each IMU factor is evaluated once, at the LS fix of its first
    epoch, and held over the span.
    """
    if not isinstance(imu, ImuSeries):
        imu = ImuSeries.from_samples(imu)
    sols = list(ls_solutions)
    if not sols:
        raise ValueError("need at least one LS solution")
    epochs = np.array([s.epoch for s in sols])
    if np.any(np.diff(epochs) <= 0):
        raise ValueError("LS solutions must be strictly time-sorted")
    lever = np.asarray(lever, dtype=float)
    nominal = 1.0 / noise.sample_rate
    graph = FactorGraph(len(sols), epochs)
    if prior is not None:
        graph.add(prior)

    for k, s in enumerate(sols):
        if fixed_sigma_p is not None:
            cov = fixed_sigma_p ** 2 * np.eye(3)
        else:
            cov = np.array(s.covariance, dtype=float)
            idx = np.diag_indices(3)
            cov[idx] = np.maximum(cov[idx], sigma_p_floor ** 2)
        graph.add(PositionFactor(k, s.position, cov, lever))

    spans = []
    for k in range(len(sols) - 1):
        t_i, t_j = epochs[k], epochs[k + 1]
        start, stop = _span_indices(imu.t, t_i, t_j)
        times = np.concatenate([[t_i], imu.t[start:stop]])
        gaps = np.diff(times)
        if stop == start or np.any(gaps > 2.0 * nominal + 1e-9) or (t_j - times[-1]) > 2.0 * nominal + 1e-9:
            worst = float(max(gaps.max(initial=0.0), t_j - times[-1]))
            raise ImuGapError(f"IMU gap of {worst:.6f} s inside interval ({t_i}, {t_j}]")
        spans.append((t_i, start, stop))

    pres = preintegrate_spans(imu, spans, noise, bias_lin)
    for k, ((t_i, start, stop), pre) in enumerate(zip(spans, pres)):
        tail = epochs[k + 1] - imu.t[stop - 1]
        if tail > 1e-9 and stop < len(imu):
            # Epoch falls between samples: hold the next sample up to t_j.
            pre = integrate_sample(pre, imu[stop], tail, noise)
        graph.add(ImuFactor(k, k + 1, pre, gravity_ecef(s_pos(sols[k]))))
        dt = pre.dt_total
        graph.add(
            BiasFactor(
                k,
                k + 1,
                noise.accel_bias_walk ** 2 * dt * np.eye(3),
                noise.gyro_bias_walk ** 2 * dt * np.eye(3),
            )
        )
    return graph


def s_pos(sol: LsSolution) -> np.ndarray:
    return np.asarray(sol.position, dtype=float)


@dataclass(frozen=True)
class PriorSigmas:
    roll_pitch: float = 0.1  # rad
    yaw: float = 0.5  # rad
    velocity: float = 1.0  # m/s
    accel_bias: float = 0.05  # m/s^2, MEMS turn-on
    gyro_bias: float = 5e-3  # rad/s, MEMS turn-on
    position_floor: float = 0.5  # m


def make_prior(state0: NavState, ls0: LsSolution, sig: PriorSigmas = PriorSigmas()) -> PriorFactor:
    pos_var = np.maximum(np.diag(np.asarray(ls0.covariance, dtype=float)), sig.position_floor ** 2)
    d = np.concatenate(
        [
            [sig.roll_pitch ** 2, sig.roll_pitch ** 2, sig.yaw ** 2],
            pos_var,
            np.full(3, sig.velocity ** 2),
            np.full(3, sig.accel_bias ** 2),
            np.full(3, sig.gyro_bias ** 2),
        ]
    )
    return PriorFactor(state0, np.diag(d))


def _rotate_about(axis: np.ndarray, angle: float) -> np.ndarray:
    K = skew(axis)
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def _refine_alignment(C, R0, sp, gp, t, ant, lever, use):
    """Nonlinear fit of the initial attitude correction, position and velocity."""

    def resid(x):
        Cx = so3_exp(x[6:9]) @ C
        out = [ant[k] - Cx @ R0[k] @ lever - x[0:3] - x[3:6] * t[k] - gp[k] - Cx @ sp[k] for k in use]
        return np.concatenate(out)

    x0 = np.zeros(9)
    first = resid(x0)
    # Seed position and velocity by the linear fit given the current attitude.
    A = np.vstack([np.hstack([np.eye(3), t[k] * np.eye(3)]) for k in use])
    x0[0:6] = np.linalg.lstsq(A, first, rcond=None)[0]
    fit = least_squares(resid, x0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not fit.success or np.linalg.norm(fit.x[6:9]) > 0.5:
        return C, x0[3:6]
    return so3_exp(fit.x[6:9]) @ C, fit.x[3:6]


def initial_states(
    graph: FactorGraph,
    ls_solutions: Sequence[LsSolution],
    lever,
    level_rotation: np.ndarray,
    yaw: float | None = None,
    align_window: float = 20.0,
    refine: bool = True,
) -> list[NavState]:
    """Cold-start states for the solver.

    Attitude is dead-reckoned from a level initial attitude by chaining the
    preintegrated rotations. The initial yaw (about the local up axis) is
    either given or fitted jointly with initial position and velocity to
    the LS track over the first ``align_window`` seconds; with ``refine`` the
    fitted attitude is then freed in all three axes. Velocities follow
    from the same dead reckoning; positions are the LS fixes with the lever
    arm removed; biases start at zero.
    """
    sols = list(ls_solutions)
    K = len(sols)
    lever = np.asarray(lever, dtype=float)
    up = level_rotation[:, 2]
    imu = {f.i: f for f in graph.of_kind("imu")}

    # Dead reckoning with zero initial yaw, velocity and position.
    R0 = [level_rotation]
    sv = [np.zeros(3)]
    sp = [np.zeros(3)]
    gv = [np.zeros(3)]
    gp = [np.zeros(3)]
    for k in range(K - 1):
        f = imu[k]
        dt = f.pre.dt_total
        Rk = R0[-1]
        sp.append(sp[-1] + sv[-1] * dt + Rk @ f.pre.delta_p)
        sv.append(sv[-1] + Rk @ f.pre.delta_v)
        gp.append(gp[-1] + gv[-1] * dt + 0.5 * f.gravity * dt * dt)
        gv.append(gv[-1] + f.gravity * dt)
        R0.append(Rk @ f.pre.delta_R)

    t = np.array([s.epoch for s in sols]) - sols[0].epoch
    meas = np.array([s.position for s in sols]) - lever @ level_rotation.T
    use = np.flatnonzero(t <= align_window + 1e-9)
    v0 = np.zeros(3)
    fitted = False
    if yaw is None and len(use) >= 3:
        rows, rhs = [], []
        for k in use:
            x = sp[k]
            par = (up @ x) * up
            perp = x - par
            A = np.zeros((3, 8))
            A[:, 0:3] = np.eye(3)
            A[:, 3:6] = t[k] * np.eye(3)
            A[:, 6] = perp
            A[:, 7] = np.cross(up, x)
            rows.append(A)
            rhs.append(meas[k] - gp[k] - par)
        A = np.vstack(rows)
        b = np.concatenate(rhs)
        if np.linalg.cond(A) < 1e8:
            sol, *_ = np.linalg.lstsq(A, b, rcond=None)
            yaw = math.atan2(sol[7], sol[6])
            v0 = sol[3:6]
            fitted = True
        else:
            yaw = None
    if yaw is None:
        # Weak horizontal excitation: yaw from the fitted initial velocity.
        sel = use if len(use) >= 2 else np.arange(K)
        if len(sel) >= 2:
            coef = np.polyfit(t[sel], meas[sel], 1)
            v0 = coef[0]
        east, north = level_rotation[:, 0], level_rotation[:, 1]
        yaw = math.atan2(v0 @ north, v0 @ east) if np.linalg.norm(v0) > 1e-6 else 0.0
    C = _rotate_about(up, yaw)
    if fitted and refine:
        C, v0 = _refine_alignment(C, R0, sp, gp, t, np.array([s.position for s in sols]), lever, use)

    states = []
    for k in range(K):
        R = C @ R0[k]
        states.append(
            NavState(
                rotation=R,
                position=sols[k].position - R @ lever,
                velocity=v0 + gv[k] + C @ sv[k],
                bias=ImuBias(),
                epoch=sols[k].epoch,
            )
        )
    return states
