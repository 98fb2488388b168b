"""Navigation state on SO(3) x R^12 and its retraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frames import so3_exp

TANGENT_DIM = 15
# Tangent layout: rotation, position, velocity, accel bias, gyro bias.
ROT, POS, VEL, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


@dataclass(frozen=True, eq=False)
class ImuBias:
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImuBias):
            return NotImplemented
        return bool(np.array_equal(self.accel, other.accel) and np.array_equal(self.gyro, other.gyro))

    __hash__ = None

    def __sub__(self, other: "ImuBias") -> "ImuBias":
        return ImuBias(self.accel - other.accel, self.gyro - other.gyro)


@dataclass(frozen=True)
class NavState:
    rotation: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    bias: ImuBias = field(default_factory=ImuBias)
    epoch: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))


@dataclass(frozen=True)
class StateDelta:
    dtheta: np.ndarray
    dp: np.ndarray
    dv: np.ndarray
    dba: np.ndarray
    dbg: np.ndarray

    @classmethod
    def from_vector(cls, d) -> "StateDelta":
        d = np.asarray(d, dtype=float).reshape(TANGENT_DIM)
        return cls(d[ROT], d[POS], d[VEL], d[BA], d[BG])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dtheta, self.dp, self.dv, self.dba, self.dbg])


def retract(s: NavState, d) -> NavState:
    """Apply a tangent increment: rotation on the right, everything else additive."""
    if isinstance(d, StateDelta):
        d = d.as_vector()
    d = np.asarray(d, dtype=float)
    return NavState(
        rotation=s.rotation @ so3_exp(d[ROT]),
        position=s.position + d[POS],
        velocity=s.velocity + d[VEL],
        bias=ImuBias(s.bias.accel + d[BA], s.bias.gyro + d[BG]),
        epoch=s.epoch,
    )
