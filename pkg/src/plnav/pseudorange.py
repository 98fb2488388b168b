"""Pseudorange model, single differencing, epoch-wise least squares and DOP.

All clock terms are carried in meters. After single differencing against a
static base station the only clock unknown left is the rover-minus-base
receiver clock, shared by GNSS satellites and pseudolites.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .frames import ecef_to_geodetic, enu_rotation

EPOCH_MATCH_TOL = 1e-6
MAX_CONDITION = 1e12


class GeometryError(ValueError):
    """Observation geometry does not determine the unknowns."""


class UnderdeterminedError(GeometryError):
    """Fewer observations than unknowns."""


class TransmitterKind(str, enum.Enum):
    GNSS = "gnss"
    PSEUDOLITE = "pl"


@dataclass(frozen=True)
class TransmitterState:
    id: str
    kind: TransmitterKind
    position: np.ndarray
    clock_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "kind", TransmitterKind(self.kind))


@dataclass(frozen=True)
class PseudorangeObs:
    epoch: float
    transmitter_id: str
    range: float
    sigma: float

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError(f"pseudorange must be positive, got {self.range}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class SdObs:
    epoch: float
    transmitter_id: str
    sd_range: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class DopValues:
    pdop: float
    hdop: float
    vdop: float
    gdop: float


@dataclass(frozen=True)
class LsSolution:
    epoch: float
    position: np.ndarray
    clock: float
    covariance: np.ndarray
    dop: DopValues
    iterations: int
    converged: bool
    n_obs: int = 0
    costs: tuple = ()

    @classmethod
    def failed(cls, epoch: float, n_obs: int) -> "LsSolution":
        nan = float("nan")
        return cls(
            epoch=epoch,
            position=np.full(3, nan),
            clock=nan,
            covariance=np.full((3, 3), nan),
            dop=DopValues(nan, nan, nan, nan),
            iterations=0,
            converged=False,
            n_obs=n_obs,
        )


@dataclass
class LsConfig:
    base_position: np.ndarray
    initial_guess: np.ndarray | None = None
    max_iterations: int = 20
    step_tolerance: float = 1e-6  # m; ranges of ~2e7 m round off near 1e-8
    initial_clock: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.step_tolerance > 0:
            raise ValueError("step_tolerance must be > 0")
        self.base_position = np.asarray(self.base_position, dtype=float)
        if self.initial_guess is None:
            self.initial_guess = self.base_position.copy()
        self.initial_guess = np.asarray(self.initial_guess, dtype=float)


def predict_pseudorange(tx: TransmitterState, rx_position, rx_clock: float) -> float:
    d = float(np.linalg.norm(tx.position - np.asarray(rx_position, dtype=float)))
    if d == 0.0:
        raise GeometryError(f"receiver coincides with transmitter {tx.id}")
    return d + rx_clock - tx.clock_offset


def single_difference(rover: PseudorangeObs, base: PseudorangeObs) -> SdObs:
    if rover.transmitter_id != base.transmitter_id:
        raise ValueError(f"transmitter mismatch: {rover.transmitter_id} vs {base.transmitter_id}")
    if abs(rover.epoch - base.epoch) > EPOCH_MATCH_TOL:
        raise ValueError(f"epoch mismatch: {rover.epoch} vs {base.epoch}")
    return SdObs(
        epoch=rover.epoch,
        transmitter_id=rover.transmitter_id,
        sd_range=rover.range - base.range,
        sigma=math.hypot(rover.sigma, base.sigma),
    )


def difference_epoch(rover: Sequence[PseudorangeObs], base: Sequence[PseudorangeObs]) -> list[SdObs]:
    """Single differences for every transmitter seen by both receivers."""
    by_id = {b.transmitter_id: b for b in base}
    return [single_difference(r, by_id[r.transmitter_id]) for r in rover if r.transmitter_id in by_id]


def _line_of_sight(tx_positions: np.ndarray, p: np.ndarray) -> np.ndarray:
    d = tx_positions - p
    n = np.linalg.norm(d, axis=1)
    if np.any(n == 0.0):
        raise GeometryError("receiver coincides with a transmitter")
    return d / n[:, None]


def dop_from_los(los: np.ndarray, p) -> DopValues:
    """DOPs from unit line-of-sight vectors (rows) seen from ECEF point ``p``."""
    los = np.asarray(los, dtype=float)
    if los.shape[0] < 4:
        raise UnderdeterminedError(f"DOP needs >= 4 transmitters, got {los.shape[0]}")
    G = np.hstack([-los, np.ones((los.shape[0], 1))])
    N = G.T @ G
    if np.linalg.cond(N) > MAX_CONDITION:
        raise GeometryError("singular DOP geometry")
    Q = np.linalg.inv(N)
    C = enu_rotation(ecef_to_geodetic(p))
    Qenu = C @ Q[:3, :3] @ C.T
    return DopValues(
        pdop=math.sqrt(Q[0, 0] + Q[1, 1] + Q[2, 2]),
        hdop=math.sqrt(Qenu[0, 0] + Qenu[1, 1]),
        vdop=math.sqrt(Qenu[2, 2]),
        gdop=math.sqrt(np.trace(Q)),
    )


def compute_dop(txs: Sequence[TransmitterState], p) -> DopValues:
    p = np.asarray(p, dtype=float)
    pos = np.array([t.position for t in txs], dtype=float).reshape(-1, 3)
    return dop_from_los(_line_of_sight(pos, p), p)


def solve_ls(obs: Sequence[SdObs], txs: Sequence[TransmitterState], cfg: LsConfig) -> LsSolution:
    """Gauss-Newton fix of antenna position and differential clock from single differences.

    A step that increases the weighted cost is halved (up to 30 times) before
    being accepted, so the accepted cost sequence never increases.
    """
    tx_by_id = {t.id: t for t in txs}
    missing = [o.transmitter_id for o in obs if o.transmitter_id not in tx_by_id]
    if missing:
        raise KeyError(f"no transmitter state for {missing}")
    if len(obs) < 4:
        raise UnderdeterminedError(f"need >= 4 observations, got {len(obs)}")
    epoch = obs[0].epoch

    tx_pos = np.array([tx_by_id[o.transmitter_id].position for o in obs])
    y = np.array([o.sd_range for o in obs])
    w = 1.0 / np.array([o.sigma for o in obs]) ** 2
    base_range = np.linalg.norm(tx_pos - cfg.base_position, axis=1)

    def residual(x):
        return y - (np.linalg.norm(tx_pos - x[:3], axis=1) - base_range + x[3])

    def cost(r):
        return float(np.sum(w * r * r))

    # Residuals carry rounding of order ulp(range); the cost cannot resolve changes below this.
    delta = 4.0 * np.finfo(float).eps * float(np.max(np.linalg.norm(tx_pos, axis=1)))

    def noise_floor(r):
        return 2.0 * float(np.sum(w * np.abs(r))) * delta + float(np.sum(w)) * delta * delta

    x = np.append(cfg.initial_guess, cfg.initial_clock).astype(float)
    r = residual(x)
    c = cost(r)
    costs = [c]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        G = np.hstack([-_line_of_sight(tx_pos, x[:3]), np.ones((len(obs), 1))])
        N = G.T @ (w[:, None] * G)
        if np.linalg.cond(N) > MAX_CONDITION:
            raise GeometryError(f"ill-conditioned normal matrix at epoch {epoch}")
        dx = np.linalg.solve(N, G.T @ (w * r))
        step = 1.0
        for _ in range(30):
            x_new = x + step * dx
            r_new = residual(x_new)
            c_new = cost(r_new)
            if c_new <= c:
                break
            step *= 0.5
        else:
            # No decrease found: converged if the predicted gain is below rounding in the cost.
            converged = bool(np.linalg.norm(dx) < cfg.step_tolerance or dx @ N @ dx <= noise_floor(r))
            break
        x, r, c = x_new, r_new, c_new
        costs.append(c)
        if np.linalg.norm(step * dx) < cfg.step_tolerance:
            converged = True
            break

    G = np.hstack([-_line_of_sight(tx_pos, x[:3]), np.ones((len(obs), 1))])
    P = np.linalg.inv(G.T @ (w[:, None] * G))
    cov = P[:3, :3]
    return LsSolution(
        epoch=epoch,
        position=x[:3].copy(),
        clock=float(x[3]),
        covariance=0.5 * (cov + cov.T),
        dop=dop_from_los(G[:, :3] * -1.0, x[:3]),
        iterations=it,
        converged=bool(converged),
        n_obs=len(obs),
        costs=tuple(costs),
    )
