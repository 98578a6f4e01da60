"""Quantile thresholds for the uncertainty channels.

Thresholds come from the reserved calibration split only, via the
nearest-rank-higher quantile: conservative, interpolation-free, and
deterministic.  At quantile level q the flag rate per channel on
exchangeable data is 1 - q; the downstream OR-rule over two channels
intentionally flags more than 1 - q.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import math

import numpy as np

from .errors import CalibrationError, ConfigurationError, DataError
from .unckit import UncertaintyScore

__all__ = ["CalibrationThresholds", "quantile", "calibrate",
           "write_thresholds", "read_thresholds"]


@dataclass
class CalibrationThresholds:
    tau_point: float
    tau_prob: float
    q: float
    n_cal: int
    day_range: tuple
    # Observed per-channel maxima; the random-score baseline draws its
    # pseudo-uncertainty uniformly on [0, scale] so its magnitude matches
    # the real channels.
    scale_point: float = 1.0
    scale_prob: float = 1.0 / 12.0


def quantile(values: Sequence[float], q: float) -> float:
    """Nearest-rank (higher) quantile: sorted values at index ceil(q*n)-1."""
    vals = np.asarray(list(values), dtype=float)
    if vals.size == 0:
        raise DataError("quantile of an empty list is undefined")
    if not 0.0 < q < 1.0:
        raise ConfigurationError(f"quantile level must lie in (0, 1), got {q}")
    rank = max(math.ceil(q * vals.size) - 1, 0)
    return float(np.sort(vals, kind="stable")[rank])


def calibrate(scores: Sequence[UncertaintyScore], q: float,
              n_min: int = 200, day_range: tuple = (0, 0)) -> CalibrationThresholds:
    """Per-channel thresholds from held-out uncertainty scores."""
    scores = list(scores)
    if len(scores) < n_min:
        raise CalibrationError(
            f"calibration needs at least {n_min} scores, got {len(scores)}")
    pts = np.array([s.u_point for s in scores], dtype=float)
    prs = np.array([s.u_prob for s in scores], dtype=float)
    return CalibrationThresholds(
        tau_point=quantile(pts, q),
        tau_prob=quantile(prs, q),
        q=q,
        n_cal=len(scores),
        day_range=(int(day_range[0]), int(day_range[1])),
        scale_point=float(pts.max()),
        scale_prob=float(prs.max()),
    )


_KEYS = ("q", "tau_point", "tau_prob", "n_cal", "first_day", "last_day",
         "scale_point", "scale_prob")


def write_thresholds(thr: CalibrationThresholds, path: str | Path) -> None:
    lines = [
        f"q = {thr.q!r}",
        f"tau_point = {thr.tau_point!r}",
        f"tau_prob = {thr.tau_prob!r}",
        f"n_cal = {thr.n_cal}",
        f"first_day = {thr.day_range[0]}",
        f"last_day = {thr.day_range[1]}",
        f"scale_point = {thr.scale_point!r}",
        f"scale_prob = {thr.scale_prob!r}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_thresholds(path: str | Path) -> CalibrationThresholds:
    mapping = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        mapping[key.strip()] = raw.strip()
    missing = [k for k in _KEYS if k not in mapping]
    if missing:
        raise DataError(f"thresholds file missing keys: {missing}")
    return CalibrationThresholds(
        tau_point=float(mapping["tau_point"]),
        tau_prob=float(mapping["tau_prob"]),
        q=float(mapping["q"]),
        n_cal=int(mapping["n_cal"]),
        day_range=(int(mapping["first_day"]), int(mapping["last_day"])),
        scale_point=float(mapping["scale_point"]),
        scale_prob=float(mapping["scale_prob"]),
    )
