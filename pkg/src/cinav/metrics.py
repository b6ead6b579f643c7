"""Error metrics, per-phase tables and Monte Carlo aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import chi2

HORIZONTAL_DOF = 2
Z95 = 1.959963984540054


class UndefinedMetric(ValueError):
    """Metric requested over an interval with no samples."""


def interval_mask(t, interval, closed: bool = False) -> np.ndarray:
    """Samples in ``[a, b)``, or ``[a, b]`` when ``closed``."""
    a, b = interval
    t = np.asarray(t, dtype=float)
    eps = 1e-9
    return (t >= a - eps) & ((t <= b + eps) if closed else (t < b - eps))


def align(t_est, t_truth, truth, max_offset: float = 0.1) -> np.ndarray:
    """Nearest truth sample for every estimate time; raises if any is further
    than ``max_offset`` seconds away."""
    t_est = np.asarray(t_est, dtype=float)
    t_truth = np.asarray(t_truth, dtype=float)
    truth = np.asarray(truth, dtype=float)
    idx = np.clip(np.searchsorted(t_truth, t_est), 1, len(t_truth) - 1)
    left = t_truth[idx - 1]
    idx = np.where(np.abs(t_est - left) <= np.abs(t_truth[idx] - t_est), idx - 1, idx)
    if np.any(np.abs(t_truth[idx] - t_est) > max_offset + 1e-12):
        raise ValueError("trace and truth are not time-aligned")
    return truth[idx]


def compute_rmse(trace, truth=None, interval=None, closed: bool = False, max_offset: float = 0.1) -> float:
    """Horizontal RMSE of an estimate trace over ``interval``.

    ``trace`` is a :class:`~cinav.sim.runner.Trace` or a ``(t, est)`` pair.
    ``truth`` is a ``(t, pos)`` pair; when omitted the trace's own truth
    column is used.
    """
    if hasattr(trace, "est"):
        t, est = trace.t, trace.est
        ref = trace.truth if truth is None else align(t, *truth, max_offset=max_offset)
    else:
        t, est = (np.asarray(x, dtype=float) for x in trace)
        if truth is None:
            raise ValueError("truth is required for a bare (t, est) trace")
        ref = align(t, *truth, max_offset=max_offset)
    t = np.asarray(t, dtype=float)
    m = np.ones(len(t), dtype=bool) if interval is None else interval_mask(t, interval, closed)
    if not np.any(m):
        raise UndefinedMetric(f"no samples in interval {interval}")
    err = np.asarray(est, dtype=float)[m] - np.asarray(ref, dtype=float)[m]
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def nees(error: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Per-sample ``e^T P^-1 e`` for errors (n, d) and covariances (n, d, d)."""
    error = np.asarray(error, dtype=float)
    sol = np.linalg.solve(np.asarray(cov, dtype=float), error[..., None])[..., 0]
    return np.einsum("ni,ni->n", error, sol)


def nees_bounds(runs: int, dof: int = HORIZONTAL_DOF, level: float = 0.95) -> tuple[float, float]:
    """Two-sided acceptance interval for the average NEES over ``runs``
    independent runs."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    a = (1.0 - level) / 2.0
    n = dof * runs
    return float(chi2.ppf(a, n) / runs), float(chi2.ppf(1.0 - a, n) / runs)


# -- per-run metrics ----------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    vehicle: int
    method: str
    phase: int
    label: str
    start: float
    end: float
    rmse: float
    max_error: float
    nees_mean: float
    count: int


@dataclass
class RunMetrics:
    name: str
    seed: int
    rows: list[MetricRow]

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "rows": [_rounded(asdict(r)) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunMetrics":
        return cls(doc["name"], doc["seed"], [MetricRow(**r) for r in doc["rows"]])

    def get(self, vehicle: int, method: str, phase: int) -> MetricRow:
        for r in self.rows:
            if (r.vehicle, r.method, r.phase) == (vehicle, method, phase):
                return r
        raise KeyError((vehicle, method, phase))


def _rounded(d: dict, digits: int = 6) -> dict:
    return {k: (round(v, digits) if isinstance(v, float) else v) for k, v in d.items()}


def run_metrics(result) -> RunMetrics:
    """Per vehicle, method and phase metrics for a :class:`ScenarioResult`."""
    rows = []
    last = len(result.phases) - 1
    for (vid, method), tr in sorted(result.traces.items()):
        err = tr.err_norm
        q = nees(tr.error, tr.cov)
        for ph in result.phases:
            m = interval_mask(tr.t, (ph.start, ph.end), closed=ph.index == last)
            n = int(m.sum())
            if n == 0:
                rmse = mx = nm = math.nan
            else:
                rmse = float(np.sqrt(np.mean(err[m] ** 2)))
                mx = float(err[m].max())
                nm = float(q[m].mean())
            rows.append(MetricRow(vid, method, ph.index, ph.label, ph.start, ph.end, rmse, mx, nm, n))
    return RunMetrics(result.config.name, result.seed, rows)


# -- tables -------------------------------------------------------------------

def format_tables(doc: dict, names: dict[int, str] | None = None) -> str:
    """Methods x vehicles RMSE table for each phase. Input is the metrics JSON
    document, so the table is a pure function of the saved file."""
    rows = doc["rows"]
    vehicles = sorted({r["vehicle"] for r in rows})
    methods = [m for m in ("sp", "sl-sp", "cp", "sl-cp") if any(r["method"] == m for r in rows)]
    phases = sorted({(r["phase"], r["start"], r["end"], r["label"]) for r in rows})
    names = names or {}
    lut = {(r["vehicle"], r["method"], r["phase"]): r for r in rows}
    out = []
    for idx, start, end, label in phases:
        out.append(f"Phase {idx}: {start:.1f}-{end:.1f} s ({label}) RMSE [m]")
        head = f"{'':8s}" + "".join(f"{names.get(v, f'V{v}'):>10s}" for v in vehicles)
        out.append(head)
        for m in methods:
            cells = []
            for v in vehicles:
                r = lut.get((v, m, idx))
                val = None if r is None else r["rmse"]
                cells.append(f"{'-':>10s}" if val is None or (isinstance(val, float) and math.isnan(val))
                             else f"{val:10.2f}")
            out.append(f"{m.upper():8s}" + "".join(cells))
        out.append("")
    return "\n".join(out)


# -- Monte Carlo ----------------------------------------------------------------

@dataclass(frozen=True)
class AggregateRow:
    vehicle: int
    method: str
    phase: int
    label: str
    runs: int
    rmse_mean: float
    rmse_ci_low: float
    rmse_ci_high: float


def aggregate_rmse(metrics: list[RunMetrics]) -> list[AggregateRow]:
    """Mean RMSE over runs with a normal-approximation 95% interval."""
    groups: dict[tuple, list[float]] = {}
    labels: dict[tuple, str] = {}
    for rm in metrics:
        for r in rm.rows:
            key = (r.vehicle, r.method, r.phase)
            labels.setdefault(key, r.label)
            if not math.isnan(r.rmse):
                groups.setdefault(key, []).append(r.rmse)
    out = []
    for key in sorted(groups):
        vals = np.array(groups[key])
        mean = float(vals.mean())
        half = Z95 * float(vals.std(ddof=1)) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
        out.append(AggregateRow(*key, labels[key], len(vals), mean, mean - half, mean + half))
    return out


def average_nees(nees_runs: np.ndarray, dof: int = HORIZONTAL_DOF) -> dict:
    """Per-step average NEES over runs (rows = runs) with the chi-square
    interval and the fraction of steps inside it."""
    q = np.asarray(nees_runs, dtype=float)
    runs = q.shape[0]
    avg = q.mean(axis=0)
    lo, hi = nees_bounds(runs, dof)
    inside = (avg >= lo) & (avg <= hi)
    return {"average": avg, "low": lo, "high": hi, "fraction_inside": float(inside.mean()), "runs": runs}
