"""Positioning error statistics, CDF export and Allan variance."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ErrorSummary:
    mean: float
    p80: float
    p95: float
    count: int


@dataclass
class AllanCurve:
    taus: np.ndarray
    adev: np.ndarray

    def slope(self, lo: float | None = None, hi: float | None = None) -> float:
        """Least-squares log-log slope of adev over taus in [lo, hi]."""
        sel = np.ones(len(self.taus), bool)
        if lo is not None:
            sel &= self.taus >= lo
        if hi is not None:
            sel &= self.taus <= hi
        sel &= self.adev > 0
        if sel.sum() < 2:
            raise ValueError("need at least two positive points to fit a slope")
        return float(np.polyfit(np.log(self.taus[sel]), np.log(self.adev[sel]), 1)[0])


def align_nearest(t_pred, t_gt, tolerance: float) -> np.ndarray:
    """Index into ``t_gt`` of the nearest stamp for each ``t_pred``; -1 when none within ``tolerance``."""
    t_pred = np.asarray(t_pred, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    if len(t_gt) == 0:
        return np.full(len(t_pred), -1)
    j = np.clip(np.searchsorted(t_gt, t_pred), 1, max(len(t_gt) - 1, 1))
    left = np.clip(j - 1, 0, len(t_gt) - 1)
    right = np.clip(j, 0, len(t_gt) - 1)
    pick = np.where(np.abs(t_gt[left] - t_pred) <= np.abs(t_gt[right] - t_pred), left, right)
    return np.where(np.abs(t_gt[pick] - t_pred) <= tolerance, pick, -1)


def error_series(pred_t, pred_xy, gt_t, gt_xy, tolerance: float = 0.5) -> np.ndarray:
    """Euclidean error of each prediction against the nearest ground-truth sample.

    Predictions with no ground truth within ``tolerance`` seconds are dropped.
    """
    pred_xy = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    idx = align_nearest(pred_t, gt_t, tolerance)
    ok = idx >= 0
    if not np.any(ok):
        raise ValueError("no prediction aligns with the ground truth")
    d = pred_xy[ok] - gt_xy[idx[ok]]
    return np.hypot(d[:, 0], d[:, 1])


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    n = len(sorted_values)
    return float(sorted_values[max(math.ceil(q * n), 1) - 1])


def summarize(errors) -> ErrorSummary:
    """Mean and nearest-rank 80th/95th percentiles."""
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if len(e) == 0:
        raise ValueError("cannot summarise an empty error series")
    return ErrorSummary(float(e.mean()), nearest_rank(e, 0.8), nearest_rank(e, 0.95), len(e))


def cdf(errors) -> tuple[np.ndarray, np.ndarray]:
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    return e, np.arange(1, len(e) + 1) / max(len(e), 1)


# ---------------------------------------------------------------------- Allan
def default_taus(n: int, dt: float, per_decade: int = 10) -> np.ndarray:
    """Log-spaced averaging times from dt up to a quarter of the record."""
    m_max = max(n // 4, 1)
    m = np.unique(np.round(np.logspace(0, math.log10(m_max), max(int(per_decade * math.log10(m_max)) + 1, 1))).astype(int))
    return m * dt


def allan_variance(series, dt: float, taus=None) -> AllanCurve:
    """Overlapping Allan deviation of a rate-type series sampled every ``dt`` seconds."""
    y = np.asarray(series, dtype=np.float64).ravel()
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = len(y)
    taus = default_taus(n, dt) if taus is None else np.asarray(taus, dtype=np.float64)
    m = np.round(taus / dt).astype(int)
    if np.any(m < 1):
        raise ValueError("tau shorter than the sample interval")
    if np.any(2 * m > n):
        raise ValueError("tau exceeds half the record")
    if np.any(np.diff(m) <= 0):
        raise ValueError("taus must be strictly increasing after rounding to samples")
    # Allan variance ignores constant offsets; removing the mean keeps the cumulative sum well-conditioned
    theta = np.concatenate([[0.0], np.cumsum(y - y.mean()) * dt])
    avar = np.empty(len(m))
    for i, k in enumerate(m):
        tau = k * dt
        d = theta[2 * k :] - 2 * theta[k:-k] + theta[: -2 * k]
        avar[i] = np.sum(d**2) / (2 * tau**2 * len(d))
    return AllanCurve(m * dt, np.sqrt(avar))


# --------------------------------------------------------------------- export
def write_summary(path, summary: ErrorSummary) -> None:
    Path(path).write_text(json.dumps(asdict(summary), sort_keys=True, indent=1) + "\n")


def read_summary(path) -> ErrorSummary:
    return ErrorSummary(**json.loads(Path(path).read_text()))


def write_cdf(path, errors) -> None:
    e, f = cdf(errors)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["error", "cumulative_fraction"])
        w.writerows([repr(float(a)), repr(float(b))] for a, b in zip(e, f))


def read_cdf(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    a = np.array([[float(x) for x in r] for r in rows]).reshape(-1, 2)
    return a[:, 0], a[:, 1]


def write_allan(path, curve: AllanCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "adev"])
        w.writerows([repr(float(a)), repr(float(b))] for a, b in zip(curve.taus, curve.adev))


def read_allan(path) -> AllanCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    a = np.array([[float(x) for x in r] for r in rows]).reshape(-1, 2)
    return AllanCurve(a[:, 0], a[:, 1])


def export_errors(directory, errors) -> ErrorSummary | None:
    """Write summary.json (when non-empty) and cdf.csv for one method."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    errors = np.asarray(errors, dtype=np.float64).ravel()
    write_cdf(d / "cdf.csv", errors)
    if len(errors) == 0:
        return None
    s = summarize(errors)
    write_summary(d / "summary.json", s)
    return s


def write_pred(path, t, xy, heading) -> None:
    """pred.csv with columns t, x, y, rx, ry."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "rx", "ry"])
        for row in np.column_stack([t, xy, heading]):
            w.writerow([repr(float(v)) for v in row])


def read_pred(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    a = np.array([[float(x) for x in r] for r in rows]).reshape(-1, 5)
    return a[:, 0], a[:, 1:3], a[:, 3:5]


def comparison_table(rows: dict[str, ErrorSummary]) -> str:
    lines = ["method,mean,p80,p95,count"]
    for name, s in rows.items():
        lines.append(f"{name},{s.mean:.4f},{s.p80:.4f},{s.p95:.4f},{s.count}")
    return "\n".join(lines) + "\n"
