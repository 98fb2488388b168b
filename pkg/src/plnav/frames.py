"""Coordinate frames, SO(3) maps, WGS-84 geodesy and normal gravity.

Conventions used throughout the package:

* Rotations are 3x3 numpy arrays. ``R`` maps body-frame vectors into the
  frame named by the caller (usually ECEF).
* Perturbations are applied on the right: ``R @ so3_exp(dtheta)``.
* ``so3_log`` returns the principal rotation vector with norm in [0, pi].
  At exactly pi the axis is taken from the column of ``(R + I) / 2`` with the
  largest diagonal entry and oriented so that entry is positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# WGS-84
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

# Somigliana normal gravity on the ellipsoid
GAMMA_EQUATOR = 9.7803253359
GAMMA_POLE = 9.8321849378
FREE_AIR_GRADIENT = 3.086e-6  # (m/s^2) per m of height

_SOMIGLIANA_K = (WGS84_B * GAMMA_POLE) / (WGS84_A * GAMMA_EQUATOR) - 1.0
_GRAVITY_RADIUS_ENVELOPE = (6.2e6, 7.0e6)


class FrameError(ValueError):
    """Input outside the domain of a frame conversion."""


@dataclass(frozen=True)
class GeodeticCoord:
    """Latitude and longitude in radians, height above the WGS-84 ellipsoid in meters."""

    lat: float
    lon: float
    height: float = 0.0

    def __post_init__(self):
        if not (abs(self.lat) <= math.pi / 2 + 1e-15):
            raise FrameError(f"latitude {self.lat} outside [-pi/2, pi/2]")
        if not (-math.pi < self.lon <= math.pi):
            raise FrameError(f"longitude {self.lon} outside (-pi, pi]")
        if not math.isfinite(self.height):
            raise FrameError("height must be finite")


def skew(v) -> np.ndarray:
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_many(v: np.ndarray) -> np.ndarray:
    """Stack of skew matrices for an (N, 3) array."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(theta) -> np.ndarray:
    """Rotation matrix of the rotation vector ``theta`` (Rodrigues)."""
    x, y, z = float(theta[0]), float(theta[1]), float(theta[2])
    t2 = x * x + y * y + z * z
    if t2 < 1e-16:
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        t = math.sqrt(t2)
        a = math.sin(t) / t
        b = (1.0 - math.cos(t)) / t2
    return np.array(
        [
            [1.0 - b * (y * y + z * z), b * x * y - a * z, b * x * z + a * y],
            [b * x * y + a * z, 1.0 - b * (x * x + z * z), b * y * z - a * x],
            [b * x * z - a * y, b * y * z + a * x, 1.0 - b * (x * x + y * y)],
        ]
    )


def so3_exp_many(theta: np.ndarray) -> np.ndarray:
    """Row-wise :func:`so3_exp` for an (N, 3) array."""
    t2 = np.einsum("ni,ni->n", theta, theta)
    small = t2 < 1e-16
    t = np.sqrt(np.where(small, 1.0, t2))
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / np.where(small, 1.0, t2))
    K = skew_many(theta)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def right_jacobian_many(phi: np.ndarray) -> np.ndarray:
    """Row-wise :func:`right_jacobian` for an (N, 3) array."""
    t2 = np.einsum("ni,ni->n", phi, phi)
    small = t2 < 1e-10
    safe = np.where(small, 1.0, t2)
    t = np.sqrt(safe)
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / safe)
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (safe * t))
    K = skew_many(phi)
    return np.eye(3) - a[:, None, None] * K + b[:, None, None] * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal rotation vector of ``R``."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - R.T)  # sin(angle) * axis
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(R) - 1.0)
    angle = math.atan2(s, c)
    if c > -0.99:
        if s < 1e-8:
            # angle ~ s here; angle / sin(angle) = 1 + angle^2 / 6
            return w * (1.0 + angle * angle / 6.0)
        return w * (angle / s)
    # Near pi: recover the axis from the symmetric part.
    sym = 0.5 * (R + R.T) - c * np.eye(3)
    i = int(np.argmax(np.diag(sym)))
    axis = sym[:, i] / math.sqrt(max(sym[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    d = float(axis @ w)
    if d < 0.0 or (d == 0.0 and axis[i] < 0.0):
        axis = -axis
    return angle * axis


def right_jacobian(phi) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    k = skew(phi)
    t2 = float(phi @ phi)
    if t2 < 1e-10:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    t = math.sqrt(t2)
    return np.eye(3) - (1.0 - math.cos(t)) / t2 * k + (t - math.sin(t)) / (t2 * t) * (k @ k)


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    k = skew(phi)
    t2 = float(phi @ phi)
    if t2 < 1e-10:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    t = math.sqrt(t2)
    coef = 1.0 / t2 - (1.0 + math.cos(t)) / (2.0 * t * math.sin(t))
    return np.eye(3) + 0.5 * k + coef * (k @ k)


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix to ``R`` (re-orthogonalization via SVD)."""
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def geodetic_to_ecef(g: GeodeticCoord) -> np.ndarray:
    slat, clat = math.sin(g.lat), math.cos(g.lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * slat * slat)
    return np.array(
        [
            (n + g.height) * clat * math.cos(g.lon),
            (n + g.height) * clat * math.sin(g.lon),
            (n * (1.0 - WGS84_E2) + g.height) * slat,
        ]
    )


def ecef_to_geodetic(p) -> GeodeticCoord:
    """Iterative inverse of :func:`geodetic_to_ecef`.

    Raises FrameError for points within 1e5 m of the Earth's center.
    """
    x, y, z = (float(c) for c in p)
    r = math.sqrt(x * x + y * y + z * z)
    if not math.isfinite(r) or r <= 1e5:
        raise FrameError(f"ECEF point with radius {r} m is not a valid surface-region point")
    lon = math.atan2(y, x)
    if lon == -math.pi:
        lon = math.pi
    rho = math.hypot(x, y)
    lat = math.atan2(z, rho * (1.0 - WGS84_E2))
    h = 0.0
    for _ in range(30):
        slat, clat = math.sin(lat), math.cos(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * slat * slat)
        h_new = rho * clat + z * slat - WGS84_A * math.sqrt(1.0 - WGS84_E2 * slat * slat)
        lat_new = math.atan2(z, rho * (1.0 - WGS84_E2 * n / (n + h_new)))
        done = abs(h_new - h) < 1e-9 and abs(lat_new - lat) < 1e-15
        lat, h = lat_new, h_new
        if done:
            break
    slat = math.sin(lat)
    h = rho * math.cos(lat) + z * slat - WGS84_A * math.sqrt(1.0 - WGS84_E2 * slat * slat)
    return GeodeticCoord(lat, lon, h)


def enu_rotation(origin: GeodeticCoord) -> np.ndarray:
    """Matrix whose rows are the East, North and Up axes at ``origin`` in ECEF."""
    sl, cl = math.sin(origin.lat), math.cos(origin.lat)
    so, co = math.sin(origin.lon), math.cos(origin.lon)
    return np.array(
        [
            [-so, co, 0.0],
            [-sl * co, -sl * so, cl],
            [cl * co, cl * so, sl],
        ]
    )


def ecef_to_enu(p, origin: GeodeticCoord) -> np.ndarray:
    """ENU coordinates of ECEF point(s) ``p`` relative to ``origin``."""
    p = np.asarray(p, dtype=float)
    return (p - geodetic_to_ecef(origin)) @ enu_rotation(origin).T


def enu_to_ecef(enu, origin: GeodeticCoord) -> np.ndarray:
    enu = np.asarray(enu, dtype=float)
    return geodetic_to_ecef(origin) + enu @ enu_rotation(origin)


def normal_gravity(lat: float, height: float) -> float:
    """Somigliana normal gravity magnitude with a linear free-air correction."""
    s2 = math.sin(lat) ** 2
    g0 = GAMMA_EQUATOR * (1.0 + _SOMIGLIANA_K * s2) / math.sqrt(1.0 - WGS84_E2 * s2)
    return g0 - FREE_AIR_GRADIENT * height


def gravity_ecef(p) -> np.ndarray:
    """Normal gravity vector at ECEF point ``p``, pointing along the ellipsoidal down axis."""
    r = float(np.linalg.norm(p))
    lo, hi = _GRAVITY_RADIUS_ENVELOPE
    if not lo <= r <= hi:
        raise FrameError(f"gravity model valid for radius in [{lo}, {hi}] m, got {r}")
    g = ecef_to_geodetic(p)
    up = enu_rotation(g)[2]
    return -normal_gravity(g.lat, g.height) * up


def apply_lever_arm(R: np.ndarray, p_body, lever) -> np.ndarray:
    """Antenna point ``p_body + R @ lever``."""
    return np.asarray(p_body, dtype=float) + np.asarray(R, dtype=float) @ np.asarray(lever, dtype=float)


def ecef_to_geodetic_arrays(P) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`ecef_to_geodetic` for an (N, 3) array; returns (lat, lon, height)."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    if np.any(np.sqrt(x * x + y * y + z * z) <= 1e5):
        raise FrameError("ECEF point too close to the Earth's center")
    lon = np.arctan2(y, x)
    rho = np.hypot(x, y)
    lat = np.arctan2(z, rho * (1.0 - WGS84_E2))
    for _ in range(30):
        s = np.sin(lat)
        w = np.sqrt(1.0 - WGS84_E2 * s * s)
        n = WGS84_A / w
        h = rho * np.cos(lat) + z * s - WGS84_A * w
        lat_new = np.arctan2(z, rho * (1.0 - WGS84_E2 * n / (n + h)))
        done = np.max(np.abs(lat_new - lat)) < 1e-15
        lat = lat_new
        if done:
            break
    s = np.sin(lat)
    h = rho * np.cos(lat) + z * s - WGS84_A * np.sqrt(1.0 - WGS84_E2 * s * s)
    return lat, lon, h


def gravity_ecef_many(P) -> np.ndarray:
    """Row-wise :func:`gravity_ecef` for an (N, 3) array of ECEF points."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    r = np.linalg.norm(P, axis=1)
    lo, hi = _GRAVITY_RADIUS_ENVELOPE
    if np.any((r < lo) | (r > hi)):
        raise FrameError(f"gravity model valid for radius in [{lo}, {hi}] m")
    lat, lon, h = ecef_to_geodetic_arrays(P)
    s2 = np.sin(lat) ** 2
    mag = GAMMA_EQUATOR * (1.0 + _SOMIGLIANA_K * s2) / np.sqrt(1.0 - WGS84_E2 * s2) - FREE_AIR_GRADIENT * h
    up = np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
    return -mag[:, None] * up
