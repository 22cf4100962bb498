"""Learning-curve and significance statistics.

Ranks, Spearman correlation and the Welch statistic are computed here
directly; only the Student-t survival function comes from scipy.
Undefined statistics (zero rank variance, zero pooled variance) are
returned as NaN rather than raised, so report tables keep their shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .env import ACTION_NAMES, N_COMMON_ACTIONS

ALPHA = 0.05
Z95 = 1.96


def _curve_xy(curve) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(curve, "timesteps"):
        x, y = curve.timesteps, curve.successes
    else:
        pts = np.asarray(curve, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("a curve is a sequence of (timesteps, successes) points")
        x, y = pts[:, 0], pts[:, 1]
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def auc(curve) -> float:
    """Trapezoidal area under cumulative successes against timesteps."""
    x, y = _curve_xy(curve)
    if len(x) < 2:
        raise ValueError("auc needs at least two curve points")
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) * 0.5))


def rankdata(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    start = 0
    for stop in range(1, len(x) + 1):
        if stop == len(x) or xs[stop] != xs[start]:
            ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
            start = stop
    return ranks


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    den = np.sqrt(np.dot(dx, dx) * np.dot(dy, dy))
    if den == 0:
        return float("nan")
    return float(np.clip(np.dot(dx, dy) / den, -1.0, 1.0))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks; NaN when either side is constant."""
    if len(x) != len(y):
        raise ValueError("spearman needs equal-length inputs")
    if len(x) < 2:
        raise ValueError("spearman needs at least two observations")
    return pearson(rankdata(x), rankdata(y))


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float

    @property
    def defined(self) -> bool:
        return bool(np.isfinite(self.p))


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Two-sided unequal-variance t-test.

    The p-value is floored at the smallest positive double so it stays in
    (0, 1] even when the t survival function underflows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("welch_t_test needs at least two samples per group")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0:
        return WelchResult(float("nan"), float("nan"), float("nan"))
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = 2.0 * stats.t.sf(abs(t), df)
    return WelchResult(float(t), float(df), float(min(1.0, max(p, np.finfo(float).tiny))))


def compare(a: Sequence[float], b: Sequence[float], alpha: float = ALPHA) -> str:
    """'improvement' if a > b significantly, 'deterioration' if a < b, else 'none'."""
    res = welch_t_test(a, b)
    if not res.defined or res.p >= alpha:
        return "none"
    return "improvement" if res.t > 0 else "deterioration"


def step_resample(curve, grid: np.ndarray) -> np.ndarray:
    """Right-continuous step interpolation of a cumulative curve onto ``grid``."""
    x, y = _curve_xy(curve)
    idx = np.searchsorted(x, grid, side="right") - 1
    return np.where(idx >= 0, y[np.clip(idx, 0, None)], 0.0)


def confidence_band(curves: Sequence, grid: np.ndarray | None = None):
    """(grid, mean, half-width) with half-width = 1.96 * std / sqrt(n)."""
    if len(curves) < 2:
        raise ValueError("a confidence band needs at least two runs")
    if grid is None:
        grid = np.unique(np.concatenate([_curve_xy(c)[0] for c in curves]))
    grid = np.asarray(grid, dtype=np.float64)
    Y = np.stack([step_resample(c, grid) for c in curves])
    half = Z95 * Y.std(axis=0, ddof=1) / np.sqrt(len(curves))
    return grid, Y.mean(axis=0), half


def mean_ranks(table: Mapping[str, Mapping[str, float]], tasks: Sequence[str] | None = None) -> dict[str, float]:
    """Average rank of each setting (1 = highest AUC) over ``tasks``."""
    settings = sorted(table)
    if tasks is None:
        tasks = sorted(next(iter(table.values())))
    if not settings or not tasks:
        raise ValueError("rank aggregation needs at least one setting and one task")
    total = np.zeros(len(settings))
    for task in tasks:
        total += rankdata([-table[s][task] for s in settings])
    return {s: float(v) / len(tasks) for s, v in zip(settings, total)}


def rank_aggregate(table: Mapping[str, Mapping[str, float]], tasks: Sequence[str] | None = None) -> str:
    """Setting with the lowest mean rank; ties go to the smallest setting id."""
    ranks = mean_ranks(table, tasks)
    best = min(ranks.values())
    return min(s for s, r in ranks.items() if np.isclose(r, best, rtol=0, atol=1e-12))


def leave_one_out_selection(table: Mapping[str, Mapping[str, float]]) -> dict[str, str]:
    """For each task, the setting chosen by ranking on all the other tasks."""
    tasks = sorted(next(iter(table.values())))
    if len(tasks) < 2:
        return {t: rank_aggregate(table, tasks) for t in tasks}
    return {t: rank_aggregate(table, [u for u in tasks if u != t]) for t in tasks}


def action_correlations(F: np.ndarray, p_R: np.ndarray, n_actions: int = N_COMMON_ACTIONS) -> dict[str, float]:
    """Spearman rho of each common action's frequency against the prediction."""
    F = np.asarray(F)
    return {ACTION_NAMES[k]: spearman(F[:, k], p_R) for k in range(n_actions)}


def correlation_report(logs: Mapping[tuple, tuple[np.ndarray, np.ndarray]]) -> list[dict]:
    """One row per (task, description) key from logged (F, p_R) arrays."""
    rows = []
    for key in sorted(logs):
        F, p = logs[key]
        task, desc = key
        rows.append({"task": task, "description": desc, **action_correlations(F, p)})
    return rows
