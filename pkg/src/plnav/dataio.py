"""CSV files for datasets and solver outputs.

Dataset directory layout::

    scenario.yaml       scenario echo (origin, base station, lever arm, noise)
    imu.csv             t,wx,wy,wz,ax,ay,az
    rover_obs.csv       epoch,tx_id,kind,range,sigma
    base_obs.csv        epoch,tx_id,kind,range,sigma
    transmitters.csv    epoch,tx_id,kind,x,y,z,clock
    truth.csv           t,x,y,z,vx,vy,vz,qw,qx,qy,qz

Positions are ECEF meters, attitude is the body-to-ECEF rotation as a unit
quaternion. Floats are written with 17 significant digits so every value
survives a write/read round trip exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .config import ConfigError, dump_scenario, parse_config
from .frames import ecef_to_geodetic, enu_rotation, enu_to_ecef
from .navstate import ImuBias, NavState
from .preintegration import ImuSeries
from .pseudorange import DopValues, LsSolution, PseudorangeObs, TransmitterKind, TransmitterState
from .sim import GroundTruth, ScenarioConfig

IMU_HEADER = ("t", "wx", "wy", "wz", "ax", "ay", "az")
OBS_HEADER = ("epoch", "tx_id", "kind", "range", "sigma")
TX_HEADER = ("epoch", "tx_id", "kind", "x", "y", "z", "clock")
TRUTH_HEADER = ("t", "x", "y", "z", "vx", "vy", "vz", "qw", "qx", "qy", "qz")
LS_HEADER = ("epoch", "x", "y", "z", "clock", "pdop", "hdop", "vdop", "gdop", "converged", "iterations", "n_obs",
             "cov_xx", "cov_xy", "cov_xz", "cov_yx", "cov_yy", "cov_yz", "cov_zx", "cov_zy", "cov_zz")
FGO_HEADER = ("epoch", "x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw",
              "bax", "bay", "baz", "bgx", "bgy", "bgz")
COST_HEADER = ("iteration", "cost")
ERRORS_HEADER = ("signals", "alg", "epoch", "e2d", "e3d")
TRAJECTORY_HEADER = ("signals", "epoch", "truth_e", "truth_n", "ls_e", "ls_n", "fgo_e", "fgo_n")

DATA_FILES = ("imu.csv", "rover_obs.csv", "base_obs.csv", "transmitters.csv", "truth.csv")


class DataFormatError(ValueError):
    """Malformed or inconsistent data file; ``path`` names it."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return "%.17g" % float(x)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path: Path, header: Sequence[str]) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(path, "file not found")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(header):
            raise DataFormatError(path, f"expected header {','.join(header)}, got {','.join(reader.fieldnames or [])}")
        return list(reader)


def _floats(path, rows, names) -> np.ndarray:
    try:
        return np.array([[float(r[n]) for n in names] for r in rows], dtype=float).reshape(len(rows), len(names))
    except (TypeError, ValueError) as e:
        raise DataFormatError(path, f"non-numeric value: {e}") from None


# ---------------------------------------------------------------- datasets


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """(N, 3, 3) rotations to (N, 4) quaternions ``w, x, y, z`` with w >= 0."""
    q = Rotation.from_matrix(R).as_quat()[:, [3, 0, 1, 2]]
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(q)
    return Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()


@dataclass
class FileDataset:
    """Dataset read back from a directory; same surface as a simulated one."""

    config: ScenarioConfig
    truth: GroundTruth | None
    imu: ImuSeries
    epochs: np.ndarray
    rover_obs: list
    base_obs: list
    transmitters: list

    @property
    def base_position(self) -> np.ndarray:
        return enu_to_ecef(self.config.base_enu, self.config.origin)


def _kinds(transmitters) -> dict:
    return {tx.id: tx.kind for txs in transmitters for tx in txs}


def write_dataset(ds, out_dir: Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.yaml").write_text(dump_scenario(ds.config))
    imu = ds.imu
    write_csv(out / "imu.csv", IMU_HEADER, (
        (imu.t[k], *imu.gyro[k], *imu.accel[k]) for k in range(len(imu))))
    kinds = _kinds(ds.transmitters)
    for name, obs in (("rover_obs.csv", ds.rover_obs), ("base_obs.csv", ds.base_obs)):
        write_csv(out / name, OBS_HEADER, (
            (o.epoch, o.transmitter_id, kinds[o.transmitter_id].value, o.range, o.sigma) for o in obs))
    write_csv(out / "transmitters.csv", TX_HEADER, (
        (e, tx.id, tx.kind.value, *tx.position, tx.clock_offset)
        for e, txs in zip(ds.epochs, ds.transmitters) for tx in txs))
    gt = ds.truth
    q = quat_from_matrix(gt.rotation)
    write_csv(out / "truth.csv", TRUTH_HEADER, (
        (gt.t[k], *gt.position[k], *gt.velocity[k], *q[k]) for k in range(len(gt.t))))
    return [out / "scenario.yaml"] + [out / f for f in DATA_FILES]


def _read_obs(path) -> list[PseudorangeObs]:
    rows = read_csv(path, OBS_HEADER)
    out = []
    for i, r in enumerate(rows):
        try:
            TransmitterKind(r["kind"])
            out.append(PseudorangeObs(float(r["epoch"]), r["tx_id"], float(r["range"]), float(r["sigma"])))
        except ValueError as e:
            raise DataFormatError(path, f"row {i + 2}: {e}") from None
    return out


def load_dataset(data_dir: Path, require_truth: bool = False) -> FileDataset:
    d = Path(data_dir)
    if not (d / "scenario.yaml").is_file():
        raise DataFormatError(d / "scenario.yaml", "file not found")
    try:
        cfg, _ = parse_config((d / "scenario.yaml").read_text())
    except ConfigError as e:
        raise DataFormatError(d / "scenario.yaml", str(e)) from None

    rows = read_csv(d / "imu.csv", IMU_HEADER)
    a = _floats(d / "imu.csv", rows, IMU_HEADER)
    try:
        imu = ImuSeries(a[:, 0], a[:, 1:4], a[:, 4:7])
    except ValueError as e:
        raise DataFormatError(d / "imu.csv", str(e)) from None

    rover = _read_obs(d / "rover_obs.csv")
    base = _read_obs(d / "base_obs.csv")

    rows = read_csv(d / "transmitters.csv", TX_HEADER)
    num = _floats(d / "transmitters.csv", rows, ("epoch", "x", "y", "z", "clock"))
    epochs = sorted({round(float(e), 9) for e in num[:, 0]} | {round(o.epoch, 9) for o in rover})
    index = {e: k for k, e in enumerate(epochs)}
    txs: list[list] = [[] for _ in epochs]
    for r, v in zip(rows, num):
        try:
            txs[index[round(v[0], 9)]].append(TransmitterState(r["tx_id"], r["kind"], v[1:4], v[4]))
        except ValueError as e:
            raise DataFormatError(d / "transmitters.csv", str(e)) from None
    # Exact epoch values come from the file, not the rounded keys.
    exact = {round(float(e), 9): float(e) for e in num[:, 0]}
    exact.update({round(o.epoch, 9): o.epoch for o in rover})
    ep = np.array([exact[e] for e in epochs])

    truth = None
    if (d / "truth.csv").is_file():
        rows = read_csv(d / "truth.csv", TRUTH_HEADER)
        a = _floats(d / "truth.csv", rows, TRUTH_HEADER)
        truth = GroundTruth(cfg.origin, cfg.trajectory, a[:, 0], a[:, 1:4], a[:, 4:7], matrix_from_quat(a[:, 7:11]))
    elif require_truth:
        raise DataFormatError(d / "truth.csv", "file not found")
    return FileDataset(cfg, truth, imu, ep, rover, base, txs)


# ---------------------------------------------------------------- solutions


def write_ls(path: Path, sols: Sequence[LsSolution]) -> None:
    write_csv(path, LS_HEADER, (
        (s.epoch, *s.position, s.clock, s.dop.pdop, s.dop.hdop, s.dop.vdop, s.dop.gdop, bool(s.converged),
         int(s.iterations), int(s.n_obs), *np.asarray(s.covariance).reshape(9))
        for s in sols))


def read_ls(path: Path) -> list[LsSolution]:
    rows = read_csv(path, LS_HEADER)
    names = [h for h in LS_HEADER if h not in ("converged", "iterations", "n_obs")]
    a = _floats(path, rows, names)
    out = []
    for r, v in zip(rows, a):
        out.append(LsSolution(
            epoch=v[0], position=v[1:4], clock=v[4], dop=DopValues(*v[5:9]),
            covariance=v[9:18].reshape(3, 3), iterations=int(r["iterations"]),
            converged=r["converged"] == "1", n_obs=int(r["n_obs"]),
        ))
    return out


def attitude_rpy(R_body_ecef: np.ndarray, position: np.ndarray) -> tuple[float, float, float]:
    """Roll, pitch, yaw of the body frame relative to local East-North-Up."""
    C = enu_rotation(ecef_to_geodetic(position))
    yaw, pitch, roll = Rotation.from_matrix(C @ R_body_ecef).as_euler("ZYX")
    return float(roll), float(pitch), float(yaw)


def write_fgo(path: Path, states: Sequence[NavState]) -> None:
    write_csv(path, FGO_HEADER, (
        (s.epoch, *s.position, *s.velocity, *attitude_rpy(s.rotation, s.position), *s.bias.accel, *s.bias.gyro)
        for s in states))


def read_fgo(path: Path) -> list[NavState]:
    rows = read_csv(path, FGO_HEADER)
    a = _floats(path, rows, FGO_HEADER)
    out = []
    for v in a:
        C = enu_rotation(ecef_to_geodetic(v[1:4]))
        R = C.T @ Rotation.from_euler("ZYX", [v[9], v[8], v[7]]).as_matrix()
        out.append(NavState(R, v[1:4], v[4:7], ImuBias(v[10:13], v[13:16]), float(v[0])))
    return out


def write_cost_log(path: Path, history: Sequence[float]) -> None:
    write_csv(path, COST_HEADER, enumerate(history))
