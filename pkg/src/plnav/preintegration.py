"""On-manifold IMU preintegration between two GNSS/PL epochs.

Samples are integrated with a zero-order hold: a sample stamped ``t_k`` is
held over ``(t_{k-1}, t_k]``. The preintegrated covariance is ordered
(rotation, velocity, position). Gravity is not part of the deltas; it enters
through :func:`predict_state` and :func:`imu_residual`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .frames import (
    right_jacobian,
    right_jacobian_inv,
    right_jacobian_many,
    skew,
    skew_many,
    so3_exp,
    so3_exp_many,
    so3_log,
)
from .navstate import ImuBias, NavState

GYRO_BIAS_WARN = 0.05  # rad/s
ACCEL_BIAS_WARN = 0.5  # m/s^2


class BiasDriftWarning(UserWarning):
    """Bias estimate moved far from the preintegration linearization point."""


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuSeries:
    """Column-wise IMU stream: times (N,), gyro (N, 3), accel (N, 3)."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(len(t), 3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(len(t), 3))
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples: Iterable[ImuSample]) -> "ImuSeries":
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            np.array([s.t for s in samples]),
            np.array([s.gyro for s in samples]),
            np.array([s.accel for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> ImuSample:
        return ImuSample(self.t[k], self.gyro[k], self.accel[k])

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def slice(self, start: int, stop: int) -> "ImuSeries":
        return ImuSeries(self.t[start:stop], self.gyro[start:stop], self.accel[start:stop])


@dataclass(frozen=True)
class ImuNoiseParams:
    gyro_noise_density: float = 2.0e-4  # rad/s/sqrt(Hz)
    accel_noise_density: float = 2.0e-3  # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 2.0e-5  # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 2.0e-4  # m/s^3/sqrt(Hz)
    sample_rate: float = 200.0  # Hz

    def __post_init__(self):
        for name in (
            "gyro_noise_density",
            "accel_noise_density",
            "gyro_bias_walk",
            "accel_bias_walk",
            "sample_rate",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class PreintegratedImu:
    delta_R: np.ndarray = field(default_factory=lambda: np.eye(3))
    delta_v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))
    J_dR_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_dv_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_dv_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_dp_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_dp_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dt_total: float = 0.0
    bias_lin: ImuBias = field(default_factory=ImuBias)
    n_samples: int = 0


class CorrectedDeltas(NamedTuple):
    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    bias_far: bool


@dataclass(frozen=True)
class ImuResidual:
    r_dR: np.ndarray
    r_dv: np.ndarray
    r_dp: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.r_dR, self.r_dv, self.r_dp])


def _stack(pres, name):
    return np.array([getattr(p, name) for p in pres], dtype=float)


def _fold_batch(pres: Sequence[PreintegratedImu], gyro: np.ndarray, accel: np.ndarray, dts: np.ndarray,
                noise: ImuNoiseParams) -> list[PreintegratedImu]:
    """Fold sample runs into several accumulators at once.

    ``gyro``/``accel`` are (B, n, 3) and ``dts`` is (B, n). Rows shorter than
    ``n`` are padded with zero-length steps, which leave an accumulator
    unchanged.
    """
    B, n = dts.shape
    dR, dv, dp = _stack(pres, "delta_R"), _stack(pres, "delta_v"), _stack(pres, "delta_p")
    cov = _stack(pres, "covariance")
    JRg = _stack(pres, "J_dR_dbg")
    Jva, Jvg = _stack(pres, "J_dv_dba"), _stack(pres, "J_dv_dbg")
    Jpa, Jpg = _stack(pres, "J_dp_dba"), _stack(pres, "J_dp_dbg")
    bg = np.array([p.bias_lin.gyro for p in pres])
    ba = np.array([p.bias_lin.accel for p in pres])
    qg = noise.gyro_noise_density ** 2
    qa = noise.accel_noise_density ** 2
    eye3 = np.eye(3)

    w = gyro - bg[:, None, :]
    a_all = accel - ba[:, None, :]
    phi = (w * dts[..., None]).reshape(-1, 3)
    E_all = so3_exp_many(phi).reshape(B, n, 3, 3)
    Jr_all = right_jacobian_many(phi).reshape(B, n, 3, 3)
    Sa_all = skew_many(a_all)
    A = np.tile(np.eye(9), (B, 1, 1))

    for k in range(n):
        dt1 = dts[:, k, None]
        dt = dt1[..., None]
        dt2 = dt * dt
        E, Jr, a = E_all[:, k], Jr_all[:, k], a_all[:, k]
        Et = np.swapaxes(E, 1, 2)
        Ra = dR @ Sa_all[:, k]
        RaJ = Ra @ JRg

        Jpa = Jpa + Jva * dt - 0.5 * dt2 * dR
        Jpg = Jpg + Jvg * dt - 0.5 * dt2 * RaJ
        Jva = Jva - dt * dR
        Jvg = Jvg - dt * RaJ
        JRg = Et @ JRg - dt * Jr

        A[:, 0:3, 0:3] = Et
        A[:, 3:6, 0:3] = -dt * Ra
        A[:, 6:9, 0:3] = -0.5 * dt2 * Ra
        A[:, 6:9, 3:6] = dt * eye3
        cov = A @ cov @ np.swapaxes(A, 1, 2)
        # Discrete white noise has variance density^2 / dt per sample.
        cov[:, 0:3, 0:3] += qg * dt * (Jr @ np.swapaxes(Jr, 1, 2))
        cov[:, 3:6, 3:6] += qa * dt * eye3
        cov[:, 3:6, 6:9] += 0.5 * qa * dt2 * eye3
        cov[:, 6:9, 3:6] += 0.5 * qa * dt2 * eye3
        cov[:, 6:9, 6:9] += 0.25 * qa * dt2 * dt * eye3

        Rav = np.einsum("bij,bj->bi", dR, a)
        dp = dp + dv * dt1 + 0.5 * dt1 * dt1 * Rav
        dv = dv + dt1 * Rav
        dR = dR @ E

    totals = dts.sum(axis=1)
    counts = (dts > 0).sum(axis=1)
    out = []
    for b, p in enumerate(pres):
        out.append(
            replace(
                p,
                delta_R=dR[b],
                delta_v=dv[b],
                delta_p=dp[b],
                covariance=0.5 * (cov[b] + cov[b].T),
                J_dR_dbg=JRg[b],
                J_dv_dba=Jva[b],
                J_dv_dbg=Jvg[b],
                J_dp_dba=Jpa[b],
                J_dp_dbg=Jpg[b],
                dt_total=p.dt_total + float(totals[b]),
                n_samples=p.n_samples + int(counts[b]),
            )
        )
    return out


def _fold(pre: PreintegratedImu, gyro, accel, dts, noise: ImuNoiseParams) -> PreintegratedImu:
    dts = np.asarray(dts, dtype=float)
    if np.any(~(dts > 0)):
        raise ValueError(f"non-positive integration interval in {dts[~(dts > 0)][:3]}")
    return _fold_batch([pre], np.asarray(gyro)[None], np.asarray(accel)[None], dts[None], noise)[0]


def integrate_sample(acc: PreintegratedImu, sample: ImuSample, dt: float,
                     noise: ImuNoiseParams) -> PreintegratedImu:
    """Fold one sample, held over an interval of length ``dt``, into ``acc``."""
    if not dt > 0:
        raise ValueError(f"non-positive integration interval {dt}")
    return _fold(acc, sample.gyro[None, :], sample.accel[None, :], np.array([dt]), noise)


def preintegrate(samples: ImuSeries | Sequence[ImuSample], t_start: float, noise: ImuNoiseParams,
                 bias_lin: ImuBias | None = None) -> PreintegratedImu:
    """Preintegrate a run of samples; the first one is held from ``t_start``."""
    if not isinstance(samples, ImuSeries):
        samples = ImuSeries.from_samples(samples)
    start = PreintegratedImu(bias_lin=bias_lin if bias_lin is not None else ImuBias())
    if len(samples) == 0:
        return start
    dts = np.diff(np.concatenate([[t_start], samples.t]))
    return _fold(start, samples.gyro, samples.accel, dts, noise)


def preintegrate_spans(imu: ImuSeries, spans: Sequence[tuple[float, int, int]], noise: ImuNoiseParams,
                       bias_lin: ImuBias | None = None) -> list[PreintegratedImu]:
    """Preintegrate several runs ``imu[start:stop]`` held from ``t_start`` in one batched pass.

    Equivalent to calling :func:`preintegrate` on each run.
    """
    if not spans:
        return []
    n = max(stop - start for _, start, stop in spans)
    B = len(spans)
    gyro = np.zeros((B, n, 3))
    accel = np.zeros((B, n, 3))
    dts = np.zeros((B, n))
    for b, (t0, start, stop) in enumerate(spans):
        m = stop - start
        gyro[b, :m] = imu.gyro[start:stop]
        accel[b, :m] = imu.accel[start:stop]
        d = np.diff(np.concatenate([[t0], imu.t[start:stop]]))
        if np.any(~(d > 0)):
            raise ValueError(f"non-positive integration interval in span starting at {t0}")
        dts[b, :m] = d
    start_acc = PreintegratedImu(bias_lin=bias_lin if bias_lin is not None else ImuBias())
    return _fold_batch([start_acc] * B, gyro, accel, dts, noise)


def bias_corrected_deltas(pre: PreintegratedImu, bias: ImuBias) -> CorrectedDeltas:
    """First-order update of the deltas to a new bias estimate."""
    db = bias - pre.bias_lin
    far = bool(np.max(np.abs(db.gyro)) > GYRO_BIAS_WARN or np.max(np.abs(db.accel)) > ACCEL_BIAS_WARN)
    if far:
        warnings.warn(
            f"bias moved {db.gyro} rad/s, {db.accel} m/s^2 from linearization point",
            BiasDriftWarning,
            stacklevel=2,
        )
    return CorrectedDeltas(
        pre.delta_R @ so3_exp(pre.J_dR_dbg @ db.gyro),
        pre.delta_v + pre.J_dv_dba @ db.accel + pre.J_dv_dbg @ db.gyro,
        pre.delta_p + pre.J_dp_dba @ db.accel + pre.J_dp_dbg @ db.gyro,
        far,
    )


def predict_state(state_i: NavState, pre: PreintegratedImu, gravity) -> NavState:
    """Propagate ``state_i`` through the preintegrated motion (biases carried over)."""
    if not pre.dt_total > 0:
        raise ValueError("preintegration spans no time")
    g = np.asarray(gravity, dtype=float)
    dR, dv, dp, _ = bias_corrected_deltas(pre, state_i.bias)
    dt = pre.dt_total
    Ri = state_i.rotation
    return NavState(
        rotation=Ri @ dR,
        position=state_i.position + state_i.velocity * dt + 0.5 * g * dt * dt + Ri @ dp,
        velocity=state_i.velocity + g * dt + Ri @ dv,
        bias=state_i.bias,
        epoch=state_i.epoch + dt,
    )


def imu_residual(state_i: NavState, state_j: NavState, pre: PreintegratedImu, gravity) -> ImuResidual:
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    dR, dv, dp, _ = bias_corrected_deltas(pre, state_i.bias)
    Ri_t = state_i.rotation.T
    return ImuResidual(
        r_dR=so3_log(dR.T @ Ri_t @ state_j.rotation),
        r_dv=Ri_t @ (state_j.velocity - state_i.velocity - g * dt) - dv,
        r_dp=Ri_t @ (state_j.position - state_i.position - state_i.velocity * dt - 0.5 * g * dt * dt) - dp,
    )


def residual_jacobians(state_i: NavState, state_j: NavState, pre: PreintegratedImu,
                       gravity) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians (9x15 each) of the stacked residual w.r.t. the tangents of both states.

    Columns follow the tangent layout (rotation, position, velocity, accel
    bias, gyro bias); the residual does not depend on the biases of state j.
    """
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    db = state_i.bias - pre.bias_lin
    phi_bg = pre.J_dR_dbg @ db.gyro
    dR = pre.delta_R @ so3_exp(phi_bg)
    Ri, Rj = state_i.rotation, state_j.rotation
    Ri_t = Ri.T
    E = dR.T @ Ri_t @ Rj
    r_R = so3_log(E)
    Jr_inv = right_jacobian_inv(r_R)
    dv_world = state_j.velocity - state_i.velocity - g * dt
    dp_world = state_j.position - state_i.position - state_i.velocity * dt - 0.5 * g * dt * dt

    Ji = np.zeros((9, 15))
    Jj = np.zeros((9, 15))
    Ji[0:3, 0:3] = -Jr_inv @ Rj.T @ Ri
    Ji[0:3, 12:15] = -Jr_inv @ E.T @ right_jacobian(phi_bg) @ pre.J_dR_dbg
    Jj[0:3, 0:3] = Jr_inv

    Ji[3:6, 0:3] = skew(Ri_t @ dv_world)
    Ji[3:6, 6:9] = -Ri_t
    Ji[3:6, 9:12] = -pre.J_dv_dba
    Ji[3:6, 12:15] = -pre.J_dv_dbg
    Jj[3:6, 6:9] = Ri_t

    Ji[6:9, 0:3] = skew(Ri_t @ dp_world)
    Ji[6:9, 3:6] = -Ri_t
    Ji[6:9, 6:9] = -dt * Ri_t
    Ji[6:9, 9:12] = -pre.J_dp_dba
    Ji[6:9, 12:15] = -pre.J_dp_dbg
    Jj[6:9, 3:6] = Ri_t
    return Ji, Jj
