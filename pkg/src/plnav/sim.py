"""Synthetic GNSS/pseudolite/IMU scenarios with ground truth.

The vehicle drives a parametric path in the local tangent plane at the
scenario origin. The body frame is forward-left-up, level, with yaw along
the velocity. Satellites sit at frozen azimuth/elevation/range from the
origin; pseudolites and the base station are fixed ENU points.

IMU samples are interval outputs: the sample stamped ``t_k`` carries the
mean angular rate and specific force over ``(t_{k-1}, t_k]`` referred to
the body attitude at ``t_{k-1}`` (what a delta-angle / delta-velocity IMU
reports, divided by the interval). This keeps the zero-order-hold
preintegration consistent with the analytic truth to O(dt^2).

Random streams (independent children of one seed):
    (1,)                      IMU white noise
    (2,)                      IMU bias random walk
    (3, receiver)             receiver clock random walk (0 rover, 1 base)
    (4, crc32(tx_id), rx)     pseudorange noise per transmitter and receiver
so scenarios that differ only in their pseudolite set share all common noise.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .frames import (
    GeodeticCoord,
    enu_rotation,
    enu_to_ecef,
    geodetic_to_ecef,
    gravity_ecef_many,
)
from .navstate import ImuBias, NavState
from .preintegration import ImuNoiseParams, ImuSeries
from .pseudorange import PseudorangeObs, TransmitterKind, TransmitterState

log = logging.getLogger(__name__)

DEFAULT_LEVER_ARM = (0.0, 0.0, -0.1249)
DEFAULT_ORIGIN = GeodeticCoord(math.radians(48.0805), math.radians(11.6398), 560.0)
STREAM_IMU_NOISE, STREAM_BIAS_WALK, STREAM_CLOCK, STREAM_PR = 1, 2, 3, 4
ROVER, BASE = 0, 1


class ScenarioError(ValueError):
    """Invalid scenario configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class Circle:
    radius: float = 40.0
    speed: float = 4.0

    def kinematics(self, t):
        w = self.speed / self.radius
        th = w * t
        c, s = np.cos(th), np.sin(th)
        z = np.zeros_like(t)
        pos = np.column_stack([self.radius * c, self.radius * s, z])
        vel = np.column_stack([-self.speed * s, self.speed * c, z])
        acc = np.column_stack([-self.speed * w * c, -self.speed * w * s, z])
        yaw = th + math.pi / 2
        yaw_rate = np.full_like(t, w)
        return pos, vel, acc, yaw, yaw_rate


@dataclass(frozen=True)
class FigureEight:
    """Lemniscate of Gerono: e = s sin(W t), n = (s / 2) sin(2 W t)."""

    scale: float = 60.0
    period: float = 80.0

    def kinematics(self, t):
        W = 2 * math.pi / self.period
        s = self.scale
        z = np.zeros_like(t)
        pos = np.column_stack([s * np.sin(W * t), 0.5 * s * np.sin(2 * W * t), z])
        ve, vn = s * W * np.cos(W * t), s * W * np.cos(2 * W * t)
        ae, an = -s * W * W * np.sin(W * t), -2 * s * W * W * np.sin(2 * W * t)
        vel = np.column_stack([ve, vn, z])
        acc = np.column_stack([ae, an, z])
        yaw = np.arctan2(vn, ve)
        yaw_rate = (ve * an - vn * ae) / (ve * ve + vn * vn)
        return pos, vel, acc, yaw, yaw_rate


@dataclass(frozen=True)
class StraightLine:
    speed: float = 5.0
    heading: float = 0.0  # rad from East toward North

    def kinematics(self, t):
        d = np.array([math.cos(self.heading), math.sin(self.heading), 0.0])
        pos = np.outer(self.speed * t, d)
        vel = np.tile(self.speed * d, (len(t), 1))
        acc = np.zeros((len(t), 3))
        return pos, vel, acc, np.full_like(t, self.heading), np.zeros_like(t)


Trajectory = Union[Circle, FigureEight, StraightLine]


@dataclass(frozen=True)
class SatelliteSpec:
    id: str
    azimuth: float  # rad, from North toward East
    elevation: float  # rad
    range: float = 2.2e7
    clock_offset: float = 0.0


@dataclass(frozen=True)
class PseudoliteSpec:
    id: str
    enu: tuple
    clock_offset: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    duration: float = 80.0
    gnss_epoch_rate: float = 1.0
    imu_rate: float = 200.0
    origin: GeodeticCoord = DEFAULT_ORIGIN
    trajectory: Trajectory = field(default_factory=Circle)
    satellites: tuple = ()
    pseudolites: tuple = ()
    base_enu: tuple = (-35.0, 25.0, 0.0)
    lever: tuple = DEFAULT_LEVER_ARM
    pr_sigma: float = 1.0  # white part, per receiver, m
    pr_corr_sigma: float = 0.9  # first-order Gauss-Markov part, per receiver, m
    pr_corr_tau: float = 40.0  # s
    clock_walk: float = 0.1  # m/sqrt(s)
    noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    initial_bias: ImuBias = field(
        default_factory=lambda: ImuBias(accel=[0.03, -0.02, 0.015], gyro=[4e-4, -3e-4, 2e-4])
    )
    add_noise: bool = True
    elevation_mask: float = math.radians(5.0)

    def __post_init__(self):
        checks = [
            ("duration", self.duration > 0, "must be > 0"),
            ("gnss_epoch_rate", self.gnss_epoch_rate > 0, "must be > 0"),
            ("imu_rate", self.imu_rate > 0, "must be > 0"),
            ("pr_sigma", self.pr_sigma >= 0, "must be >= 0"),
            ("pr_corr_sigma", self.pr_corr_sigma >= 0, "must be >= 0"),
            ("pr_corr_tau", self.pr_corr_tau > 0, "must be > 0"),
            ("clock_walk", self.clock_walk >= 0, "must be >= 0"),
            ("pr_sigma", self.pr_sigma + self.pr_corr_sigma > 0, "total range noise sigma must be > 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ScenarioError(name, msg)
        if abs(self.noise.sample_rate - self.imu_rate) > 1e-9:
            raise ScenarioError("noise.sample_rate", "must equal imu_rate")
        ratio = self.imu_rate / self.gnss_epoch_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("imu_rate", "must be an integer multiple of gnss_epoch_rate")
        for k, sat in enumerate(self.satellites):
            if not 0 < sat.elevation <= math.pi / 2:
                raise ScenarioError(f"satellites[{k}].elevation", "must be in (0, pi/2]")
        ids = [s.id for s in self.satellites] + [p.id for p in self.pseudolites]
        if len(set(ids)) != len(ids):
            raise ScenarioError("satellites", "transmitter ids must be unique")
        if isinstance(self.trajectory, StraightLine) and self.trajectory.speed <= 0:
            raise ScenarioError("trajectory.speed", "must be > 0 (yaw follows heading)")
        if isinstance(self.trajectory, Circle) and (self.trajectory.speed <= 0 or self.trajectory.radius <= 0):
            raise ScenarioError("trajectory", "circle needs radius > 0 and speed > 0")
        if isinstance(self.trajectory, FigureEight) and (self.trajectory.scale <= 0 or self.trajectory.period <= 0):
            raise ScenarioError("trajectory", "figure eight needs scale > 0 and period > 0")

    @property
    def pr_sigma_total(self) -> float:
        return math.hypot(self.pr_sigma, self.pr_corr_sigma)

    def noise_free(self) -> "ScenarioConfig":
        """Same scenario with every stochastic error and the IMU turn-on bias removed."""
        return replace(self, add_noise=False, initial_bias=ImuBias())


@dataclass
class GroundTruth:
    """Analytic trajectory plus its samples at the IMU rate."""

    origin: GeodeticCoord
    trajectory: Trajectory
    t: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        self._C = enu_rotation(self.origin)
        self._o = geodetic_to_ecef(self.origin)

    def _kin(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.trajectory.kinematics(t)

    def position_at(self, t) -> np.ndarray:
        return self._o + self._kin(t)[0] @ self._C

    def velocity_at(self, t) -> np.ndarray:
        return self._kin(t)[1] @ self._C

    def acceleration_at(self, t) -> np.ndarray:
        return self._kin(t)[2] @ self._C

    def angular_rate_at(self, t) -> np.ndarray:
        """Body-frame angular rate (level vehicle: yaw rate about body z)."""
        rate = self._kin(t)[4]
        return np.column_stack([np.zeros_like(rate), np.zeros_like(rate), rate])

    def rotation_at(self, t) -> np.ndarray:
        yaw = self._kin(t)[3]
        c, s = np.cos(yaw), np.sin(yaw)
        Rz = np.zeros((len(yaw), 3, 3))
        Rz[:, 0, 0], Rz[:, 0, 1] = c, -s
        Rz[:, 1, 0], Rz[:, 1, 1] = s, c
        Rz[:, 2, 2] = 1.0
        return self._C.T @ Rz

    def state(self, k: int) -> NavState:
        return NavState(self.rotation[k], self.position[k], self.velocity[k], ImuBias(), float(self.t[k]))

    def states(self) -> list[NavState]:
        return [self.state(k) for k in range(len(self.t))]

    def interpolate_position(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < self.t[0] - 1e-9) or np.any(t > self.t[-1] + 1e-9):
            raise ValueError("epoch outside ground-truth span")
        return np.column_stack([np.interp(t, self.t, self.position[:, i]) for i in range(3)])

    def interpolate_rotation(self, t) -> np.ndarray:
        """Nearest-sample attitude (the vehicle turns < 0.01 rad between samples)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self.t, t - 0.5 * (self.t[1] - self.t[0])), 0, len(self.t) - 1)
        return self.rotation[idx]


@dataclass
class SimulatedDataset:
    config: ScenarioConfig
    truth: GroundTruth
    imu: ImuSeries
    true_accel_bias: np.ndarray
    true_gyro_bias: np.ndarray
    epochs: np.ndarray
    rover_obs: list
    base_obs: list
    transmitters: list  # per epoch, list of TransmitterState
    rover_clock: np.ndarray
    base_clock: np.ndarray

    @property
    def base_position(self) -> np.ndarray:
        return enu_to_ecef(self.config.base_enu, self.config.origin)

    def obs_at(self, k: int) -> tuple[list, list]:
        e = self.epochs[k]
        return ([o for o in self.rover_obs if abs(o.epoch - e) < 1e-9],
                [o for o in self.base_obs if abs(o.epoch - e) < 1e-9])


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _tx_key(tx_id: str) -> int:
    return zlib.crc32(tx_id.encode("utf-8"))


def generate_trajectory(cfg: ScenarioConfig) -> GroundTruth:
    n = int(round(cfg.duration * cfg.imu_rate))
    t = np.arange(n + 1) / cfg.imu_rate
    gt = GroundTruth(cfg.origin, cfg.trajectory, t, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3, 3)))
    gt.position = gt.position_at(t)
    gt.velocity = gt.velocity_at(t)
    if np.any(np.linalg.norm(gt.velocity, axis=1) <= 0):
        raise ScenarioError("trajectory", "zero speed leaves yaw undefined")
    gt.rotation = gt.rotation_at(t)
    return gt


def derive_imu_measurements(gt: GroundTruth, cfg: ScenarioConfig):
    """Noisy, biased IMU samples for ``(t_{k-1}, t_k]``, k = 1..N.

    Returns ``(ImuSeries, accel_bias (N, 3), gyro_bias (N, 3))``.
    """
    t = gt.t
    dt = 1.0 / cfg.imu_rate
    n = len(t) - 1
    C = enu_rotation(cfg.origin)

    # Heading change per interval from consecutive horizontal velocity directions.
    v_enu = gt.velocity @ C.T
    a0, a1 = v_enu[:-1, :2], v_enu[1:, :2]
    dyaw = np.arctan2(a0[:, 0] * a1[:, 1] - a0[:, 1] * a1[:, 0], np.sum(a0 * a1, axis=1))
    gyro = np.zeros((n, 3))
    gyro[:, 2] = dyaw / dt

    g_mid = gravity_ecef_many(gt.position_at(t[1:] - 0.5 * dt))
    f_world = (gt.velocity[1:] - gt.velocity[:-1]) / dt - g_mid
    accel = np.einsum("nji,nj->ni", gt.rotation[:-1], f_world)

    ba = np.tile(cfg.initial_bias.accel, (n, 1))
    bg = np.tile(cfg.initial_bias.gyro, (n, 1))
    if cfg.add_noise:
        nz = cfg.noise
        walk = _rng(cfg.seed, STREAM_BIAS_WALK).standard_normal((n, 6)) * math.sqrt(dt)
        ba = ba + np.cumsum(walk[:, :3] * nz.accel_bias_walk, axis=0)
        bg = bg + np.cumsum(walk[:, 3:] * nz.gyro_bias_walk, axis=0)
        white = _rng(cfg.seed, STREAM_IMU_NOISE).standard_normal((n, 6)) * math.sqrt(cfg.imu_rate)
        gyro = gyro + white[:, :3] * nz.gyro_noise_density
        accel = accel + white[:, 3:] * nz.accel_noise_density
    return ImuSeries(t[1:], gyro + bg, accel + ba), ba, bg


def transmitter_states(cfg: ScenarioConfig) -> list[TransmitterState]:
    """Transmitters above the elevation mask, fixed over the window."""
    o = geodetic_to_ecef(cfg.origin)
    C = enu_rotation(cfg.origin)
    txs = []
    for sat in cfg.satellites:
        if sat.elevation < cfg.elevation_mask:
            log.warning("satellite %s below %.1f deg mask, excluded", sat.id, math.degrees(cfg.elevation_mask))
            continue
        los = np.array(
            [
                math.cos(sat.elevation) * math.sin(sat.azimuth),
                math.cos(sat.elevation) * math.cos(sat.azimuth),
                math.sin(sat.elevation),
            ]
        )
        txs.append(TransmitterState(sat.id, TransmitterKind.GNSS, o + sat.range * (los @ C), sat.clock_offset))
    for pl in cfg.pseudolites:
        txs.append(TransmitterState(pl.id, TransmitterKind.PSEUDOLITE, enu_to_ecef(pl.enu, cfg.origin),
                                    pl.clock_offset))
    return txs


def generate_pseudoranges(gt: GroundTruth, cfg: ScenarioConfig, epoch: float, rover_clock: float = 0.0,
                          base_clock: float = 0.0, rover_noise: dict | None = None,
                          base_noise: dict | None = None):
    """Rover and base pseudoranges at one epoch.

    ``rover_noise``/``base_noise`` map transmitter id to the additive range
    error for this epoch (zero when omitted).
    """
    if epoch < gt.t[0] - 1e-9 or epoch > gt.t[-1] + 1e-9:
        raise ValueError(f"epoch {epoch} outside simulated span")
    txs = transmitter_states(cfg)
    R = gt.rotation_at(epoch)[0]
    antenna = gt.position_at(epoch)[0] + R @ np.asarray(cfg.lever, dtype=float)
    base = enu_to_ecef(cfg.base_enu, cfg.origin)
    sigma = cfg.pr_sigma_total
    rover_noise = rover_noise or {}
    base_noise = base_noise or {}
    rover, base_obs = [], []
    for tx in txs:
        rr = np.linalg.norm(tx.position - antenna) + rover_clock - tx.clock_offset + rover_noise.get(tx.id, 0.0)
        rb = np.linalg.norm(tx.position - base) + base_clock - tx.clock_offset + base_noise.get(tx.id, 0.0)
        rover.append(PseudorangeObs(epoch, tx.id, float(rr), sigma))
        base_obs.append(PseudorangeObs(epoch, tx.id, float(rb), sigma))
    return rover, base_obs, txs


def _range_errors(cfg: ScenarioConfig, tx_id: str, receiver: int, n: int) -> np.ndarray:
    if not cfg.add_noise:
        return np.zeros(n)
    z = _rng(cfg.seed, STREAM_PR, _tx_key(tx_id), receiver).standard_normal((n, 2))
    dt = 1.0 / cfg.gnss_epoch_rate
    phi = math.exp(-dt / cfg.pr_corr_tau)
    gm = np.empty(n)
    gm[0] = cfg.pr_corr_sigma * z[0, 1]
    q = cfg.pr_corr_sigma * math.sqrt(1.0 - phi * phi)
    for k in range(1, n):
        gm[k] = phi * gm[k - 1] + q * z[k, 1]
    return cfg.pr_sigma * z[:, 0] + gm


def _clock_walk(cfg: ScenarioConfig, receiver: int, n: int) -> np.ndarray:
    if not cfg.add_noise or cfg.clock_walk == 0:
        return np.zeros(n)
    steps = _rng(cfg.seed, STREAM_CLOCK, receiver).standard_normal(n)
    steps[0] = 0.0
    return np.cumsum(steps * cfg.clock_walk * math.sqrt(1.0 / cfg.gnss_epoch_rate))


def simulate(cfg: ScenarioConfig) -> SimulatedDataset:
    gt = generate_trajectory(cfg)
    imu, ba, bg = derive_imu_measurements(gt, cfg)
    n_ep = int(round(cfg.duration * cfg.gnss_epoch_rate))
    epochs = np.arange(n_ep) / cfg.gnss_epoch_rate
    txs = transmitter_states(cfg)
    rover_err = {tx.id: _range_errors(cfg, tx.id, ROVER, n_ep) for tx in txs}
    base_err = {tx.id: _range_errors(cfg, tx.id, BASE, n_ep) for tx in txs}
    rclk = _clock_walk(cfg, ROVER, n_ep)
    bclk = _clock_walk(cfg, BASE, n_ep)
    rover_obs, base_obs, table = [], [], []
    for k, e in enumerate(epochs):
        r, b, tk = generate_pseudoranges(
            gt, cfg, float(e), float(rclk[k]), float(bclk[k]),
            {i: v[k] for i, v in rover_err.items()}, {i: v[k] for i, v in base_err.items()},
        )
        rover_obs += r
        base_obs += b
        table.append(tk)
    return SimulatedDataset(cfg, gt, imu, ba, bg, epochs, rover_obs, base_obs, table, rclk, bclk)


# Four high-elevation GPS satellites and two pseudolites shared by the default scenarios.
DEFAULT_SATELLITES = (
    SatelliteSpec("G10", math.radians(241.2), math.radians(60.7), 2.25e7, 12.0),
    SatelliteSpec("G16", math.radians(271.4), math.radians(43.0), 2.20e7, -7.5),
    SatelliteSpec("G26", math.radians(153.1), math.radians(60.4), 2.30e7, 3.1),
    SatelliteSpec("G31", math.radians(171.2), math.radians(40.0), 2.05e7, -1.4),
)
DEFAULT_PSEUDOLITES = (
    PseudoliteSpec("PL01", (272.8, -29.0, 10.7), 4.0),
    PseudoliteSpec("PL02", (50.9, 86.6, 34.3), -9.0),
)


def default_paper_scenarios(seed: int = 0, **overrides) -> list[ScenarioConfig]:
    """GPS, GPS+2PL, GPS+PL01 and GPS+PL02 sharing seed, trajectory and satellites."""
    pl01, pl02 = DEFAULT_PSEUDOLITES
    sets = [("GPS", ()), ("GPS+2PL", (pl01, pl02)), ("GPS+PL01", (pl01,)), ("GPS+PL02", (pl02,))]
    return [
        ScenarioConfig(name=name, seed=seed, satellites=DEFAULT_SATELLITES, pseudolites=pls, **overrides)
        for name, pls in sets
    ]


def signal_variants(template: ScenarioConfig) -> list[ScenarioConfig]:
    """The four signal sets built from ``template``.

    Uses the template's two pseudolites when it has exactly two, otherwise
    the built-in pair. Everything else (trajectory, noise, seed) is shared.
    """
    pls = template.pseudolites if len(template.pseudolites) == 2 else DEFAULT_PSEUDOLITES
    a, b = pls
    sets = [("GPS", ()), ("GPS+2PL", (a, b)), (f"GPS+{a.id}", (a,)), (f"GPS+{b.id}", (b,))]
    return [replace(template, name=name, pseudolites=p) for name, p in sets]
