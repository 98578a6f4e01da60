"""Segment-aware ranking policies.

Low-active traffic is protected by deboosting: an item is risky when
either uncertainty channel exceeds its calibrated threshold (strict
inequality, OR-rule) and risky items lose a fixed score penalty D before
the argsort.  High-active traffic gets the opposite treatment: the larger
of the two channels is added as an exploration bonus with weight omega.
The random-score baseline pushes seeded uniform pseudo-uncertainty
through exactly the same machinery.

Ties in the final ranking break by ascending item id, so identical
inputs always produce identical slates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibration import CalibrationThresholds
from .config import POLICY_MODES
from .errors import ConfigurationError, ProtocolError
from .simworld import HAU, LAU
from .unckit import UncertaintyScore

__all__ = ["PolicyConfig", "ScoredCandidate", "flag_risky", "score_lau",
           "score_hau", "rank", "final_scores_array"]

DEFAULT_CHANNELS = ("point", "prob")


@dataclass
class PolicyConfig:
    mode: str
    deboost: float = 0.6
    explore_weight: float = 2.5
    thresholds: CalibrationThresholds | None = None
    channels: tuple = DEFAULT_CHANNELS
    filter_risky: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ConfigurationError(f"unknown policy mode: {self.mode!r}")
        if self.mode in ("deboost_lau", "segment_aware", "random_score") and self.deboost <= 0:
            raise ConfigurationError("deboost magnitude D must be > 0")
        if self.mode in ("ucb_hau", "segment_aware", "random_score") and self.explore_weight <= 0:
            raise ConfigurationError("exploration weight omega must be > 0")
        for ch in self.channels:
            if ch not in DEFAULT_CHANNELS:
                raise ConfigurationError(f"unknown uncertainty channel: {ch!r}")


@dataclass
class ScoredCandidate:
    user_id: int
    item_id: int
    r: float
    unc: UncertaintyScore
    segment: int = LAU
    risky: bool | None = None
    r_final: float | None = None


def _channel_values(unc: UncertaintyScore, channels) -> list[float]:
    vals = []
    if "point" in channels:
        vals.append(unc.u_point)
    if "prob" in channels:
        vals.append(unc.u_prob)
    return vals


def flag_risky(unc: UncertaintyScore, thresholds: CalibrationThresholds,
               channels=DEFAULT_CHANNELS) -> bool:
    """OR-rule with strict inequalities over the active channels."""
    risky = False
    if "point" in channels:
        risky = risky or unc.u_point > thresholds.tau_point
    if "prob" in channels:
        risky = risky or unc.u_prob > thresholds.tau_prob
    return risky


def score_lau(r: float, risky: bool, deboost: float) -> float:
    """Risk-averse score: subtract D from risky items."""
    if deboost <= 0:
        raise ConfigurationError("deboost magnitude D must be > 0")
    return r - deboost * (1.0 if risky else 0.0)


def score_hau(r: float, unc: UncertaintyScore, explore_weight: float,
              channels=DEFAULT_CHANNELS) -> float:
    """Optimistic score: add omega times the largest active channel."""
    if explore_weight <= 0:
        raise ConfigurationError("exploration weight omega must be > 0")
    return r + explore_weight * max(_channel_values(unc, channels))


def _order(item_ids: np.ndarray, r_final: np.ndarray) -> np.ndarray:
    # Descending score, ties by ascending item id (lexsort: last key primary).
    return np.lexsort((item_ids, -r_final))


def final_scores_array(mode: str, r: np.ndarray, u_point: np.ndarray,
                       u_prob: np.ndarray, segment: int, cfg: PolicyConfig):
    """Vectorized r_final and risky flags for one user's candidate block."""
    thr = cfg.thresholds
    risky = np.zeros(r.shape, dtype=bool)
    if thr is not None:
        if "point" in cfg.channels:
            risky |= u_point > thr.tau_point
        if "prob" in cfg.channels:
            risky |= u_prob > thr.tau_prob

    if mode == "off":
        return r.copy(), risky

    cols = []
    if "point" in cfg.channels:
        cols.append(u_point)
    if "prob" in cfg.channels:
        cols.append(u_prob)
    u_max = np.maximum.reduce(cols)

    if mode == "deboost_lau" or (mode in ("segment_aware", "random_score") and segment == LAU):
        if thr is None:
            raise ProtocolError("deboosting requires calibrated thresholds")
        return r - cfg.deboost * risky.astype(float), risky
    if mode == "ucb_hau" or (mode in ("segment_aware", "random_score") and segment == HAU):
        return r + cfg.explore_weight * u_max, risky
    return r.copy(), risky


def rank(candidates: Sequence[ScoredCandidate], cfg: PolicyConfig,
         pseudo_rng: np.random.Generator | None = None) -> list[int]:
    """Rank one user's candidates under the configured mode.

    random_score replaces both uncertainty channels with seeded uniform
    pseudo-scores on [0, scale_channel] before applying the segment rules;
    pseudo_rng supplies those draws.  An empty candidate list yields an
    empty slate.  When filter_risky is on, deboosted risky items are
    dropped from the slate tail instead of merely down-weighted.
    """
    cands = list(candidates)
    if not cands:
        return []
    item_ids = np.array([c.item_id for c in cands], dtype=np.int64)
    r = np.array([c.r for c in cands], dtype=float)
    u_pt = np.array([c.unc.u_point for c in cands], dtype=float)
    u_pr = np.array([c.unc.u_prob for c in cands], dtype=float)
    segment = cands[0].segment

    if cfg.mode == "random_score":
        if pseudo_rng is None:
            raise ProtocolError("random_score ranking needs a seeded generator")
        thr = cfg.thresholds
        scale_pt = thr.scale_point if thr is not None else 1.0
        scale_pr = thr.scale_prob if thr is not None else 1.0 / 12.0
        u_pt = pseudo_rng.random(len(cands)) * scale_pt
        u_pr = pseudo_rng.random(len(cands)) * scale_pr

    r_final, risky = final_scores_array(cfg.mode, r, u_pt, u_pr, segment, cfg)
    for c, rf, rk in zip(cands, r_final, risky):
        c.r_final = float(rf)
        c.risky = bool(rk)

    order = _order(item_ids, r_final)
    ranked = [int(item_ids[i]) for i in order]
    if cfg.filter_risky and cfg.mode in ("deboost_lau", "segment_aware", "random_score") \
            and segment == LAU:
        kept = [int(item_ids[i]) for i in order if not risky[i]]
        if kept:
            ranked = kept
    return ranked
