"""Uncertainty-quality metrics and simulator proxies for the online ones.

Offline: Pearson and Spearman correlation between predicted uncertainty
and realized squared error, the risk-coverage curve with its area (mean
of prefix risks over the full coverage grid k/n), and the decile / age
trend tables.  Online proxies: trailing-7-day active-minutes retention,
valuable-to-total watch ratio, unique tags shown per user-day, the
fraction of users concentrated above 80% in one tag, and retention gain
per unit of sacrificed watch time for arm comparisons.

Correlations on constant input raise instead of returning 0: a silent
zero would corrupt ablation comparisons.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, UndefinedCorrelationError
from .simworld import ImpressionEvent, WorldState

__all__ = [
    "RiskCoveragePoint", "EvalReport", "pearson", "spearman", "average_ranks",
    "risk_coverage", "decile_trend", "age_trend", "engagement_report",
    "hlt_efficiency", "write_report_csv",
]


@dataclass
class RiskCoveragePoint:
    coverage: float
    risk: float


@dataclass
class EvalReport:
    pearson: float | None = None
    spearman: float | None = None
    aurc: float | None = None
    base_risk: float | None = None
    decile_table: list = field(default_factory=list)
    age_table: list = field(default_factory=list)
    hlt7_proxy: float | None = None
    vwr_proxy: float | None = None
    show_tag_per_user: float | None = None
    top1_tag_uv_ratio: float | None = None
    live_watch_time: float | None = None
    hlt_efficiency: float | None = None


def _as_arrays(u, e):
    u = np.asarray(u, dtype=float)
    e = np.asarray(e, dtype=float)
    if u.size != e.size or u.size == 0:
        raise DataError("inputs must be equal-length and nonempty")
    return u, e


def pearson(u, e) -> float:
    """Product-moment correlation; zero variance is an error."""
    u, e = _as_arrays(u, e)
    du, de = u - u.mean(), e - e.mean()
    su, se = np.sqrt(np.sum(du * du)), np.sqrt(np.sum(de * de))
    if su == 0.0 or se == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.sum(du * de) / (su * se))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; ties receive the mean of their rank span."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(u, e) -> float:
    """Pearson correlation of average ranks."""
    u, e = _as_arrays(u, e)
    return pearson(average_ranks(u), average_ranks(e))


def risk_coverage(u, e):
    """Risk-coverage curve retained in ascending-uncertainty order.

    Ties in u break by original index.  risk_k is the mean error over the
    k lowest-uncertainty items; the area is the plain mean of the prefix
    risks over the grid k/n and the base risk is the full-coverage mean.
    """
    u, e = _as_arrays(u, e)
    order = np.argsort(u, kind="stable")
    prefix = np.cumsum(e[order]) / np.arange(1, u.size + 1)
    curve = [RiskCoveragePoint(coverage=(k + 1) / u.size, risk=float(prefix[k]))
             for k in range(u.size)]
    return curve, float(prefix.mean()), float(e.mean())


def decile_trend(u, e):
    """Ten equal-count bins by uncertainty rank; per-bin mean u and mean e."""
    u, e = _as_arrays(u, e)
    if u.size < 10:
        raise DataError("decile trend needs at least 10 points")
    order = np.argsort(u, kind="stable")
    rows = []
    for b, chunk in enumerate(np.array_split(order, 10)):
        rows.append({"bin": b, "mean_u": float(u[chunk].mean()),
                     "mse": float(e[chunk].mean()), "count": int(chunk.size)})
    return rows


def age_trend(ages, u, e, bucket_edges):
    """Per-age-bucket mean uncertainty and realized RMSE.

    Empty buckets are omitted from the table and reported in the flags.
    """
    ages = np.asarray(ages, dtype=float)
    u, e = _as_arrays(u, e)
    if ages.size != u.size:
        raise DataError("ages and uncertainty arrays differ in length")
    edges = np.asarray(bucket_edges, dtype=float)
    rows, flags = [], []
    for b in range(edges.size - 1):
        mask = (ages >= edges[b]) & (ages < edges[b + 1])
        if not np.any(mask):
            flags.append(f"empty_age_bucket:{b}")
            continue
        rows.append({"age_bucket": b, "lo": float(edges[b]), "hi": float(edges[b + 1]),
                     "mean_u": float(u[mask].mean()),
                     "rmse": float(np.sqrt(e[mask].mean())),
                     "count": int(mask.sum())})
    return rows, flags


def engagement_report(events: Sequence[ImpressionEvent], world: WorldState,
                      first_day: int, last_day: int) -> EvalReport:
    """Simulator proxies for the online engagement metrics.

    Retention is the mean per-user watch minutes over the trailing seven
    days of the window, with churned users contributing zero.  Ratios with
    a zero denominator are reported as None, never as zero.
    """
    if last_day - first_day + 1 < 7:
        raise DataError("hlt7 proxy needs a rollout of at least 7 days")
    n_users = world.config.n_users
    tail_start = last_day - 6

    tail_watch = np.zeros(n_users)
    total_watch = 0.0
    valuable_watch = 0.0
    shown_tags: dict[tuple, set] = {}
    user_tag_watch: dict[int, dict] = {}
    active_user_days = set()

    for ev in events:
        total_watch += ev.watch_minutes
        if ev.valuable:
            valuable_watch += ev.watch_minutes
        if ev.day >= tail_start:
            tail_watch[ev.user_id] += ev.watch_minutes
        tag = int(world.stream_tag[ev.item_id])
        shown_tags.setdefault((ev.day, ev.user_id), set()).add(tag)
        active_user_days.add((ev.day, ev.user_id))
        if ev.watch_minutes > 0.0:
            user_tag_watch.setdefault(ev.user_id, {})
            user_tag_watch[ev.user_id][tag] = \
                user_tag_watch[ev.user_id].get(tag, 0.0) + ev.watch_minutes

    tail_watch[world.churned] = 0.0
    hlt7 = float(tail_watch.mean())

    vwr = (valuable_watch / total_watch) if total_watch > 0.0 else None
    show_tag = (float(np.mean([len(tags) for tags in shown_tags.values()]))
                if shown_tags else None)

    with_watch = [uid for uid, tw in user_tag_watch.items() if sum(tw.values()) > 0.0]
    if with_watch:
        top1 = sum(
            1 for uid in with_watch
            if max(user_tag_watch[uid].values()) > 0.8 * sum(user_tag_watch[uid].values())
        ) / len(with_watch)
    else:
        top1 = None

    return EvalReport(hlt7_proxy=hlt7, vwr_proxy=vwr, show_tag_per_user=show_tag,
                      top1_tag_uv_ratio=top1, live_watch_time=float(total_watch))


def hlt_efficiency(hlt7_arm: float, hlt7_base: float,
                   watch_arm: float, watch_base: float) -> float | None:
    """Retention gain per unit of sacrificed watch time between two arms.

    Positive when retention was gained while watch time was spent; None
    when the watch-time delta is zero.
    """
    d_watch = watch_arm - watch_base
    if d_watch == 0.0:
        return None
    return -(hlt7_arm - hlt7_base) / d_watch


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """One row per scalar metric; None becomes the explicit marker 'NA'."""
    scalar_fields = ["pearson", "spearman", "aurc", "base_risk", "hlt7_proxy",
                     "vwr_proxy", "show_tag_per_user", "top1_tag_uv_ratio",
                     "live_watch_time", "hlt_efficiency"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name in scalar_fields:
            value = getattr(report, name)
            writer.writerow([name, "NA" if value is None else repr(float(value))])
