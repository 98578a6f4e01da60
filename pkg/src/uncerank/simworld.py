"""Synthetic livestream platform with exactly computable ground truth.

Every click is Bernoulli(mu) where mu is a closed-form function of latent
user and stream vectors, so the aleatoric variance mu*(1-mu) and every
bias/variance quantity are available to tests.  All randomness flows
through named per-(day, user) substreams, so a day can be regenerated for
any subset of users in any order and paired policy arms consume identical
underlying draws.

Two deliberate sources of model blind spots are built into the default
world because a recommender trained on its own logs needs something it
cannot learn: item-feature hash collisions (several streams sharing one
feature bucket) and streams that are born mid-run with no interaction
history, skewed toward niche category tags.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import WorldConfig
from .errors import ConfigurationError, ProtocolError, UnknownIdError
from .rng import substream

__all__ = [
    "UserProfile", "LiveStream", "GroundTruth", "ImpressionEvent", "WorldState",
    "build_world", "true_ctr", "aleatoric_var", "generate_day", "update_churn",
    "write_events_csv", "read_events_csv", "day_stream_checksum",
]

LAU, HAU = 0, 1
SEGMENT_NAMES = {LAU: "LAU", HAU: "HAU"}


@dataclass
class UserProfile:
    user_id: int
    segment: int  # LAU or HAU
    latent_pref: np.ndarray
    activity_rate: float
    tenure_days: int


@dataclass
class LiveStream:
    item_id: int
    category_tag: int
    start_day_minute: int
    latent_quality: np.ndarray
    base_appeal: float
    first_live_day: int = 0


@dataclass
class ImpressionEvent:
    """One shown slate position and its outcome."""

    day: int
    user_id: int
    item_id: int
    stream_age_min: int
    clicked: int
    valuable: int
    watch_minutes: float
    event_id: int = -1
    features: np.ndarray | None = None  # filled by the feature pipeline


class WorldState:
    """All users, streams, ground truth, and per-user churn state."""

    def __init__(self, config: WorldConfig, seed: int):
        self.config = config
        self.rng_seed = int(seed)
        self.day_index = 0

        n, s, d = config.n_users, config.n_streams, config.d_u
        self.user_segment = np.zeros(n, dtype=np.int64)
        self.user_pref = np.zeros((n, d))
        self.user_activity = np.zeros(n)
        self.user_tenure = np.zeros(n, dtype=np.int64)
        self.churn_state = np.zeros(n)
        self.churned = np.zeros(n, dtype=bool)

        self.stream_tag = np.zeros(s, dtype=np.int64)
        self.stream_quality = np.zeros((s, d))
        self.stream_appeal = np.zeros(s)
        self.stream_start_minute = np.zeros(s, dtype=np.int64)
        self.stream_first_day = np.zeros(s, dtype=np.int64)

    # -- contract views ---------------------------------------------------

    @property
    def users(self) -> list[UserProfile]:
        return [
            UserProfile(i, int(self.user_segment[i]), self.user_pref[i],
                        float(self.user_activity[i]), int(self.user_tenure[i]))
            for i in range(self.config.n_users)
        ]

    @property
    def streams(self) -> list[LiveStream]:
        return [
            LiveStream(j, int(self.stream_tag[j]), int(self.stream_start_minute[j]),
                       self.stream_quality[j], float(self.stream_appeal[j]),
                       int(self.stream_first_day[j]))
            for j in range(self.config.n_streams)
        ]

    def copy(self) -> "WorldState":
        """Independent copy; used to branch paired policy rollouts."""
        other = WorldState.__new__(WorldState)
        other.config = self.config
        other.rng_seed = self.rng_seed
        other.day_index = self.day_index
        for name in ("user_segment", "user_pref", "user_activity", "user_tenure",
                     "churn_state", "churned", "stream_tag", "stream_quality",
                     "stream_appeal", "stream_start_minute", "stream_first_day"):
            setattr(other, name, getattr(self, name).copy())
        return other

    # -- ground truth -----------------------------------------------------

    def age_effect(self, age_min) -> np.ndarray:
        """Saturating evidence gain, monotone nondecreasing in stream age."""
        a = np.asarray(age_min, dtype=float)
        return self.config.age_gain * (1.0 - np.exp(-a / self.config.age_scale_min))

    def mu(self, user_ids, item_ids, ages) -> np.ndarray:
        """Vectorized true click probability, strictly inside (0, 1)."""
        u = np.asarray(user_ids, dtype=np.int64)
        i = np.asarray(item_ids, dtype=np.int64)
        match = np.einsum("nd,nd->n", self.user_pref[u], self.stream_quality[i])
        seg_off = np.where(self.user_segment[u] == HAU,
                           self.config.hau_offset, self.config.lau_offset)
        logit = match + self.stream_appeal[i] + self.age_effect(ages) + seg_off
        logit = np.clip(logit, -35.0, 35.0)
        return 1.0 / (1.0 + np.exp(-logit))


@dataclass
class GroundTruth:
    """Closed-form mu and its Bernoulli noise for one world."""

    world: WorldState

    def mu(self, user_id: int, item_id: int, stream_age_min: int) -> float:
        return true_ctr(self.world, user_id, item_id, stream_age_min)

    def aleatoric_var(self, user_id: int, item_id: int, stream_age_min: int) -> float:
        m = self.mu(user_id, item_id, stream_age_min)
        return m * (1.0 - m)


def build_world(config: WorldConfig, seed: int) -> WorldState:
    """Draw users, streams, and tag geometry from seeded substreams."""
    config.validate()
    world = WorldState(config, seed)
    n, s, d = config.n_users, config.n_streams, config.d_u

    g_users = substream(seed, "world", "users")
    g_streams = substream(seed, "world", "streams")
    g_tags = substream(seed, "world", "tags")

    # Tag centroids: common tags carry most streams, niche tags host births.
    centroids = g_tags.normal(0.0, 1.0, size=(config.n_tags, d))
    centroids /= np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
    centroids *= config.tag_centroid_scale

    n_lau = int(round(n * config.lau_fraction))
    world.user_segment[:n_lau] = LAU
    world.user_segment[n_lau:] = HAU

    lau_rates = g_users.uniform(config.lau_activity_lo, config.lau_activity_hi, size=n_lau)
    hau_rates = g_users.uniform(config.hau_activity_lo, config.hau_activity_hi, size=n - n_lau)
    world.user_activity[:n_lau] = lau_rates
    world.user_activity[n_lau:] = hau_rates
    world.user_tenure = g_users.integers(0, 1000, size=n)

    # Preferences: each user leans toward one favorite tag centroid, HAUs
    # much more sharply than LAUs.
    common = config.n_common_tags
    fav = np.where(g_users.random(n) < 0.85,
                   g_users.integers(0, common, size=n),
                   g_users.integers(common, config.n_tags, size=n))
    scale = np.where(world.user_segment == HAU, config.hau_pref_scale, config.lau_pref_scale)
    noise = g_users.normal(0.0, config.pref_noise, size=(n, d))
    pref = scale[:, None] * (centroids[fav] + noise)
    norms = np.linalg.norm(pref, axis=1, keepdims=True)
    over = norms > config.pref_cap
    pref = np.where(over, pref * (config.pref_cap / np.maximum(norms, 1e-12)), pref)
    world.user_pref = pref
    world.churn_state[:] = config.hazard_init

    # Streams: day-0 population sits mostly in common tags; later births
    # lean toward niche tags.
    n_born = int(round(s * config.birth_fraction))
    n_day0 = s - n_born
    tag0 = np.where(g_streams.random(n_day0) < 0.85,
                    g_streams.integers(0, common, size=n_day0),
                    g_streams.integers(common, config.n_tags, size=n_day0))
    tagb = np.where(g_streams.random(n_born) < config.niche_birth_bias,
                    g_streams.integers(common, config.n_tags, size=n_born),
                    g_streams.integers(0, common, size=n_born))
    world.stream_tag = np.concatenate([tag0, tagb])
    world.stream_first_day[:n_day0] = 0
    if n_born:
        world.stream_first_day[n_day0:] = g_streams.integers(1, max(config.total_days, 2),
                                                             size=n_born)
    world.stream_start_minute = g_streams.integers(0, config.start_minute_max + 1, size=s)
    world.stream_quality = (centroids[world.stream_tag]
                            + g_streams.normal(0.0, config.quality_noise, size=(s, d)))
    appeal = g_streams.normal(config.appeal_mean, config.appeal_std, size=s)
    appeal += np.where(world.stream_tag >= common, config.niche_appeal_shift, 0.0)
    world.stream_appeal = appeal
    return world


def true_ctr(world: WorldState, user_id: int, item_id: int, stream_age_min: int) -> float:
    """Ground-truth click probability for one (user, stream, age) triple."""
    if not 0 <= user_id < world.config.n_users:
        raise UnknownIdError(f"unknown user_id: {user_id}")
    if not 0 <= item_id < world.config.n_streams:
        raise UnknownIdError(f"unknown item_id: {item_id}")
    return float(world.mu([user_id], [item_id], [stream_age_min])[0])


def aleatoric_var(world: WorldState, user_id: int, item_id: int, stream_age_min: int) -> float:
    """Bernoulli outcome noise mu*(1-mu); exact by construction."""
    m = true_ctr(world, user_id, item_id, stream_age_min)
    return m * (1.0 - m)


# Ranked slates are requested through a callback so policies stay outside
# the world: slate_provider(day, user_id, minute, item_ids, ages) -> ranked ids.
SlateProvider = Callable[[int, int, int, np.ndarray, np.ndarray], Sequence[int]]


def update_churn(world: WorldState, user_id: int, shown_events: list[ImpressionEvent],
                 day: int) -> float:
    """Advance one user's churn hazard after a day's slate.

    Hazard rises per shown item whose true mu is below the quality floor
    (LAU multiplier above HAU), falls with valuable events, and is clamped
    to [0, 1].  The user churns permanently when a seeded uniform draw
    lands below the updated hazard.
    """
    cfg = world.config
    for ev in shown_events:
        if ev.user_id != user_id:
            raise ProtocolError("shown_events contain a foreign user_id")
    if shown_events:
        items = np.array([ev.item_id for ev in shown_events])
        ages = np.array([ev.stream_age_min for ev in shown_events])
        mus = world.mu(np.full(len(items), user_id), items, ages)
        n_below = int(np.sum(mus < cfg.low_quality_floor))
        n_valuable = sum(ev.valuable for ev in shown_events)
    else:
        n_below = n_valuable = 0

    mult = cfg.lau_churn_mult if world.user_segment[user_id] == LAU else cfg.hau_churn_mult
    hazard = world.churn_state[user_id]
    hazard = hazard + cfg.churn_penalty * mult * n_below - cfg.valuable_recovery * n_valuable
    hazard = float(np.clip(hazard, 0.0, 1.0))
    world.churn_state[user_id] = hazard
    draw = substream(world.rng_seed, "churn", day, user_id).random()
    if draw < hazard:
        world.churned[user_id] = True
    return hazard


def generate_day(world: WorldState, day: int, slate_provider: SlateProvider) -> list[ImpressionEvent]:
    """Simulate one day of traffic and advance the world by one day.

    Each alive user is active with probability activity_rate, requests one
    ranked slate, and the top slate_size items are shown.  Outcomes are
    drawn from per-(day, user, position) substreams so regeneration is
    order independent and paired policy arms see identical raw draws.
    """
    if day != world.day_index:
        raise ProtocolError(f"generate_day called for day {day}, world is at {world.day_index}")
    cfg = world.config
    alive_mask = (world.stream_first_day <= day)
    events: list[ImpressionEvent] = []
    seq = 0

    for uid in range(cfg.n_users):
        if world.churned[uid]:
            continue
        g_user = substream(world.rng_seed, "user", day, uid)
        if g_user.random() >= world.user_activity[uid]:
            continue
        minute = int(g_user.integers(cfg.session_minute_lo, 1440))
        live = alive_mask & (world.stream_start_minute <= minute)
        item_ids = np.nonzero(live)[0]
        if item_ids.size == 0:
            continue
        ages = minute - world.stream_start_minute[item_ids]

        ranked = list(slate_provider(day, uid, minute, item_ids, ages))
        live_set = set(int(i) for i in item_ids)
        for iid in ranked:
            if int(iid) not in live_set:
                raise ProtocolError(f"slate contains unknown or offline item id {iid}")
        shown = ranked[: cfg.slate_size]

        age_by_item = dict(zip(item_ids.tolist(), ages.tolist()))
        user_events = []
        for pos, iid in enumerate(shown):
            iid = int(iid)
            age = int(age_by_item[iid])
            m = float(world.mu([uid], [iid], [age])[0])
            g_out = substream(world.rng_seed, "outcome", day, uid, pos)
            u_click, u_val, u_watch = g_out.random(3)
            clicked = int(u_click < m)
            valuable = int(clicked and (u_val < min(1.0, max(0.0, cfg.valuable_scale * m))))
            watch = (0.5 + m) * (-np.log(max(u_watch, 1e-300))) * cfg.watch_scale if clicked else 0.0
            user_events.append(ImpressionEvent(
                day=day, user_id=uid, item_id=iid, stream_age_min=age,
                clicked=clicked, valuable=valuable, watch_minutes=float(watch),
                event_id=(day << 32) | seq))
            seq += 1
        events.extend(user_events)
        update_churn(world, uid, user_events, day)

    world.day_index += 1
    return events


def day_stream_checksum(seed: int, day: int, n_users: int) -> str:
    """Fingerprint of the day's underlying randomness.

    Derived purely from (seed, day, user set): two rollout arms share it
    exactly when they were paired on the same world seed, independent of
    which draws each policy ended up consuming.
    """
    import hashlib

    h = hashlib.blake2b(digest_size=16)
    for uid in range(n_users):
        probe = substream(seed, "user", day, uid).random(2)
        h.update(probe.tobytes())
    return h.hexdigest()


# -- persistence ----------------------------------------------------------

EVENT_HEADER = ["day", "user_id", "item_id", "stream_age_min", "clicked",
                "valuable", "watch_minutes"]


def write_events_csv(events: list[ImpressionEvent], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_HEADER)
        for ev in events:
            writer.writerow([ev.day, ev.user_id, ev.item_id, ev.stream_age_min,
                             ev.clicked, ev.valuable, repr(ev.watch_minutes)])


def read_events_csv(path: str | Path) -> list[ImpressionEvent]:
    events = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != EVENT_HEADER:
            raise ProtocolError(f"unexpected event log header: {header}")
        for i, row in enumerate(reader):
            events.append(ImpressionEvent(
                day=int(row[0]), user_id=int(row[1]), item_id=int(row[2]),
                stream_age_min=int(row[3]), clicked=int(row[4]),
                valuable=int(row[5]), watch_minutes=float(row[6]),
                event_id=(int(row[0]) << 32) | i))
    return events
