"""Positioning error statistics and Table-I style reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .frames import GeodeticCoord, enu_rotation

COLUMNS = ("Signals", "PDOP", "HDOP", "VDOP", "Alg", "2D-MAE", "2D-Max", "3D-MAE", "3D-Max")


@dataclass(frozen=True)
class ErrorReport:
    label: str
    algorithm: str
    e2d: np.ndarray
    e3d: np.ndarray
    mae_2d: float
    max_2d: float
    mae_3d: float
    max_3d: float
    mean_pdop: float
    mean_hdop: float
    mean_vdop: float


def position_errors(epochs, estimate, truth, origin: GeodeticCoord) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal (local ENU at ``origin``) and 3D errors per epoch.

    ``truth`` is either a callable/GroundTruth with ``interpolate_position``
    or an (N, 3) array already aligned with ``epochs``.
    """
    est = np.atleast_2d(np.asarray(estimate, dtype=float))
    if hasattr(truth, "interpolate_position"):
        ref = truth.interpolate_position(epochs)
    else:
        ref = np.atleast_2d(np.asarray(truth, dtype=float))
    if ref.shape != est.shape:
        raise ValueError(f"estimate {est.shape} and truth {ref.shape} are not aligned")
    d = (est - ref) @ enu_rotation(origin).T
    return np.hypot(d[:, 0], d[:, 1]), np.linalg.norm(d, axis=1)


def improvement(a: float, b: float) -> float:
    """Percent reduction of ``a`` relative to baseline ``b``."""
    return (1.0 - a / b) * 100.0


def summarize(errors: tuple, dops: Sequence, label: str, algorithm: str = "") -> ErrorReport:
    """Means and maxima of an (e2d, e3d) series; ``dops`` holds DopValues or (pdop, hdop, vdop) rows."""
    e2d, e3d = (np.asarray(e, dtype=float).reshape(-1) for e in errors)
    if len(e2d) == 0 or len(e3d) == 0:
        raise ValueError("empty error series")
    if len(dops):
        d = np.array([[x.pdop, x.hdop, x.vdop] if hasattr(x, "pdop") else list(x)[:3] for x in dops], dtype=float)
        pdop, hdop, vdop = np.nanmean(d, axis=0)
    else:
        pdop = hdop = vdop = float("nan")
    # Summation rounding can push the mean of equal values one ulp above the max.
    max_2d, max_3d = float(np.max(e2d)), float(np.max(e3d))
    return ErrorReport(
        label=label,
        algorithm=algorithm,
        e2d=e2d,
        e3d=e3d,
        mae_2d=min(float(np.mean(e2d)), max_2d),
        max_2d=max_2d,
        mae_3d=min(float(np.mean(e3d)), max_3d),
        max_3d=max_3d,
        mean_pdop=float(pdop),
        mean_hdop=float(hdop),
        mean_vdop=float(vdop),
    )


def _row(r: ErrorReport) -> list[str]:
    nums = (r.mean_pdop, r.mean_hdop, r.mean_vdop)
    errs = (r.mae_2d, r.max_2d, r.mae_3d, r.max_3d)
    return [r.label, *(f"{v:.2f}" for v in nums), r.algorithm, *(f"{v:.2f}" for v in errs)]


def render_table(reports: Sequence[ErrorReport]) -> str:
    """Fixed-width table, one row per report, two decimals."""
    if not reports:
        raise ValueError("need at least one report")
    rows = [list(COLUMNS)] + [_row(r) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def render_csv(reports: Sequence[ErrorReport]) -> str:
    if not reports:
        raise ValueError("need at least one report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in reports:
        w.writerow(_row(r))
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        for k in COLUMNS:
            if k not in ("Signals", "Alg"):
                row[k] = float(row[k])
    return rows


def fixture_report(label, alg, pdop, hdop, vdop, mae2, max2, mae3, max3) -> ErrorReport:
    """Report carrying only summary numbers (no per-epoch series)."""
    return ErrorReport(label, alg, np.array([mae2]), np.array([mae3]), mae2, max2, mae3, max3, pdop, hdop, vdop)


# Published reference rows (field campaign, 80 s window).
REFERENCE_TABLE = (
    ("GPS", "LS", 8.75, 6.07, 6.31, 5.20, 24.84, 15.21, 103.6),
    ("GPS", "FGO", 8.75, 6.07, 6.31, 4.58, 8.79, 8.93, 31.11),
    ("GPS + 2PL", "LS", 3.11, 1.54, 2.50, 4.63, 12.82, 5.99, 20.55),
    ("GPS + 2PL", "FGO", 3.11, 1.54, 2.50, 3.73, 6.94, 3.94, 6.94),
    ("GPS + PL01", "LS", 4.02, 2.60, 2.63, 4.75, 12.01, 6.54, 16.16),
    ("GPS + PL01", "FGO", 4.02, 2.60, 2.63, 3.99, 9.18, 4.68, 11.92),
    ("GPS + PL02", "LS", 4.35, 1.74, 3.96, 3.99, 15.63, 6.23, 18.18),
    ("GPS + PL02", "FGO", 4.35, 1.74, 3.96, 3.15, 7.89, 4.81, 8.83),
)


def reference_reports() -> list[ErrorReport]:
    return [fixture_report(label, alg, *vals) for label, alg, *vals in REFERENCE_TABLE]
