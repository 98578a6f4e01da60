"""Point-estimate CTR model: hashed features, one cross layer, small MLP.

The network is intentionally tiny and framework-free.  Features are five
active one-hot indices (user bucket, item bucket, tag, stream-age bucket,
segment); their embeddings are summed, passed through one multiplicative
cross layer and a two-layer ReLU MLP, and read out by a sigmoid head.
All gradients are derived by hand and checked against finite differences
in the test suite, and training is plain seeded minibatch SGD so two runs
with the same seed are bit-identical.

The checkpoint also carries the auxiliary heads that other modules train
on top of the frozen trunk: Beta-head logits, and H small ensemble heads
that branch off the shared hidden representation with two fully-connected
layers each.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ModelConfig, WorldConfig
from .errors import ConfigurationError, ProtocolError, ShapeError
from .rng import stable_bucket, substream
from .simworld import ImpressionEvent, WorldState, generate_day

__all__ = [
    "FeatureSpace", "FeatureVector", "ModelCheckpoint", "ForwardTrace", "ForwardBatch",
    "Main", "Ensemble", "McDropout", "init_checkpoint", "zeros_checkpoint",
    "forward", "forward_batch", "logloss", "logloss_and_grads", "sgd_step",
    "train_day", "train_run", "TrainRunResult", "save_checkpoint", "load_checkpoint",
    "sigmoid", "softplus",
]

_CLIP = 35.0  # keeps sigmoid strictly inside (0, 1) in float64


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -_CLIP, _CLIP)))


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


class FeatureSpace:
    """Maps (user, item, tag, age, segment) onto five one-hot blocks."""

    N_ACTIVE = 5

    def __init__(self, model_cfg: ModelConfig, world: WorldState):
        cfg = world.config
        self.model_cfg = model_cfg
        self.n_tags = cfg.n_tags
        self.age_edges = np.asarray(model_cfg.age_bucket_edges, dtype=float)
        self.n_age = len(self.age_edges) - 1

        self.user_table = np.array(
            [stable_bucket("user", u, model_cfg.user_buckets) for u in range(cfg.n_users)],
            dtype=np.int64)
        self.item_table = np.array(
            [stable_bucket("item", i, model_cfg.item_buckets) for i in range(cfg.n_streams)],
            dtype=np.int64)
        self.tag_table = world.stream_tag.copy()
        self.segment_table = world.user_segment.copy()

        self.off_user = 0
        self.off_item = model_cfg.user_buckets
        self.off_tag = self.off_item + model_cfg.item_buckets
        self.off_age = self.off_tag + self.n_tags
        self.off_seg = self.off_age + self.n_age
        self.d_x = self.off_seg + 2

    def age_bucket(self, ages) -> np.ndarray:
        a = np.asarray(ages, dtype=float)
        b = np.searchsorted(self.age_edges, a, side="right") - 1
        return np.clip(b, 0, self.n_age - 1)

    def indices(self, user_ids, item_ids, ages) -> np.ndarray:
        """(n, 5) active feature indices for user/item/age triples."""
        u = np.asarray(user_ids, dtype=np.int64)
        i = np.asarray(item_ids, dtype=np.int64)
        idx = np.empty((u.size, self.N_ACTIVE), dtype=np.int64)
        idx[:, 0] = self.off_user + self.user_table[u]
        idx[:, 1] = self.off_item + self.item_table[i]
        idx[:, 2] = self.off_tag + self.tag_table[i]
        idx[:, 3] = self.off_age + self.age_bucket(ages)
        idx[:, 4] = self.off_seg + self.segment_table[u]
        return idx

    def featurize_events(self, events: Sequence[ImpressionEvent]) -> np.ndarray:
        u = np.array([ev.user_id for ev in events], dtype=np.int64)
        i = np.array([ev.item_id for ev in events], dtype=np.int64)
        a = np.array([ev.stream_age_min for ev in events], dtype=np.int64)
        idx = self.indices(u, i, a)
        for ev, row in zip(events, idx):
            ev.features = row
        return idx

    def vector(self, idx_row: np.ndarray) -> "FeatureVector":
        return FeatureVector(indices=np.asarray(idx_row, dtype=np.int64), d_x=self.d_x)


@dataclass
class FeatureVector:
    """One input x: five active indices over the hashed one-hot layout."""

    indices: np.ndarray
    d_x: int

    def dense(self) -> np.ndarray:
        x = np.zeros(self.d_x)
        x[self.indices] = 1.0
        return x


@dataclass
class Main:
    pass


@dataclass
class Ensemble:
    pass


@dataclass
class McDropout:
    passes: int = 10
    seed: int = 0


TRUNK_FIELDS = ("E", "w_c", "b_c", "W1", "b1", "W2", "b2", "w_o", "b_o")
HEAD_FIELDS = ("w_u", "b_u", "w_v", "b_v", "We", "be", "ve", "ce")


@dataclass
class ModelCheckpoint:
    """All parameters of one daily checkpoint (trunk plus auxiliary heads)."""

    day: int
    E: np.ndarray          # (d_x, d_e) embedding table
    w_c: np.ndarray        # (d_e,) cross-layer weight
    b_c: np.ndarray        # (d_e,) cross-layer bias
    W1: np.ndarray         # (d_e, d_h)
    b1: np.ndarray
    W2: np.ndarray         # (d_h, d_h)
    b2: np.ndarray
    w_o: np.ndarray        # (d_h,) main head
    b_o: float
    w_u: np.ndarray        # Beta-head logits
    b_u: float
    w_v: np.ndarray
    b_v: float
    We: np.ndarray         # (H, d_h, d_g) ensemble hidden layers
    be: np.ndarray         # (H, d_g)
    ve: np.ndarray         # (H, d_g) ensemble output layers
    ce: np.ndarray         # (H,)
    dropout_rate: float = 0.0
    flags: tuple = ()

    @property
    def d_x(self) -> int:
        return self.E.shape[0]

    @property
    def d_h(self) -> int:
        return self.W1.shape[1]

    def copy(self) -> "ModelCheckpoint":
        kw = {}
        for f in TRUNK_FIELDS + HEAD_FIELDS:
            v = getattr(self, f)
            kw[f] = v.copy() if isinstance(v, np.ndarray) else v
        return ModelCheckpoint(day=self.day, dropout_rate=self.dropout_rate,
                               flags=self.flags, **kw)

    def trunk_hash(self) -> str:
        """Hash of the recommender parameters proper (heads excluded)."""
        import hashlib

        h = hashlib.sha256()
        for f in TRUNK_FIELDS:
            v = getattr(self, f)
            h.update(np.asarray(v, dtype=float).tobytes())
        return h.hexdigest()

    def validate_finite(self) -> None:
        for f in TRUNK_FIELDS + HEAD_FIELDS:
            if not np.all(np.isfinite(np.asarray(getattr(self, f), dtype=float))):
                raise ProtocolError(f"non-finite parameters in {f}")


@dataclass
class ForwardTrace:
    """Hidden representation and sigmoid score(s) for one input."""

    hidden: np.ndarray
    score: float
    head_scores: np.ndarray | None = None
    pass_scores: np.ndarray | None = None


@dataclass
class ForwardBatch:
    hidden: np.ndarray            # (n, d_h)
    score: np.ndarray             # (n,)
    head_scores: np.ndarray | None = None   # (n, H)
    pass_scores: np.ndarray | None = None   # (n, T)


def init_checkpoint(cfg: ModelConfig, d_x: int, seed: int) -> ModelCheckpoint:
    g = substream(seed, "init", "trunk")
    d_e, d_h, H, d_g = cfg.d_e, cfg.d_h, cfg.ensemble_heads, cfg.ensemble_hidden
    ck = ModelCheckpoint(
        day=-1,
        E=g.normal(0.0, 0.05, size=(d_x, d_e)),
        w_c=g.normal(0.0, 0.1, size=d_e),
        b_c=np.zeros(d_e),
        W1=g.normal(0.0, 1.0 / np.sqrt(d_e), size=(d_e, d_h)),
        b1=np.full(d_h, 0.1),
        W2=g.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, d_h)),
        b2=np.full(d_h, 0.1),
        w_o=g.normal(0.0, 0.1, size=d_h),
        b_o=0.0,
        w_u=np.zeros(d_h), b_u=0.0,
        w_v=np.zeros(d_h), b_v=0.0,
        We=np.stack([substream(seed, "init", "ens", k).normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, d_g))
                     for k in range(H)]),
        be=np.full((H, d_g), 0.1),
        ve=np.stack([substream(seed, "init", "ens", k).normal(0.0, 0.1, size=d_g)
                     for k in range(H)]),
        ce=np.zeros(H),
        dropout_rate=cfg.dropout_rate,
    )
    return ck


def zeros_checkpoint(cfg: ModelConfig, d_x: int) -> ModelCheckpoint:
    """All-zero parameters; every score is exactly sigmoid(0) = 0.5."""
    d_e, d_h, H, d_g = cfg.d_e, cfg.d_h, cfg.ensemble_heads, cfg.ensemble_hidden
    return ModelCheckpoint(
        day=-1,
        E=np.zeros((d_x, d_e)), w_c=np.zeros(d_e), b_c=np.zeros(d_e),
        W1=np.zeros((d_e, d_h)), b1=np.zeros(d_h),
        W2=np.zeros((d_h, d_h)), b2=np.zeros(d_h),
        w_o=np.zeros(d_h), b_o=0.0,
        w_u=np.zeros(d_h), b_u=0.0, w_v=np.zeros(d_h), b_v=0.0,
        We=np.zeros((H, d_h, d_g)), be=np.zeros((H, d_g)),
        ve=np.zeros((H, d_g)), ce=np.zeros(H),
        dropout_rate=cfg.dropout_rate,
    )


def _trunk_forward(ck: ModelCheckpoint, idx: np.ndarray):
    """Shared forward pass; returns intermediates needed for backprop."""
    if idx.ndim != 2 or idx.shape[1] != FeatureSpace.N_ACTIVE:
        raise ShapeError(f"feature index array must be (n, 5), got {idx.shape}")
    if idx.max(initial=0) >= ck.d_x:
        raise ShapeError("feature index exceeds checkpoint d_x")
    e = ck.E[idx].sum(axis=1)                       # (n, d_e)
    s_c = e @ ck.w_c                                # (n,)
    c = e * s_c[:, None] + ck.b_c + e               # cross layer
    a1 = c @ ck.W1 + ck.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ ck.W2 + ck.b2
    h = np.maximum(a2, 0.0)
    s = h @ ck.w_o + ck.b_o
    f = sigmoid(s)
    return e, s_c, c, a1, h1, a2, h, f


def ensemble_scores(ck: ModelCheckpoint, h: np.ndarray) -> np.ndarray:
    """(n, H) sigmoid outputs of the per-head two-layer stacks."""
    g1 = np.maximum(np.einsum("nd,hdg->nhg", h, ck.We) + ck.be[None], 0.0)
    s = np.einsum("nhg,hg->nh", g1, ck.ve) + ck.ce[None]
    return sigmoid(s)


def mcdropout_scores(ck: ModelCheckpoint, h: np.ndarray, passes: int, seed: int) -> np.ndarray:
    """(n, T) main-head scores under seeded Bernoulli masks on h.

    Inverted dropout: kept units are scaled by 1/(1-p) so the masked
    hidden vector is unbiased.  passes and seed pin the masks exactly.
    """
    p = ck.dropout_rate
    g = substream(seed, "dropout")
    n, d = h.shape
    if p <= 0.0:
        s = h @ ck.w_o + ck.b_o
        return np.repeat(sigmoid(s)[:, None], passes, axis=1)
    masks = (g.random((n, passes, d)) >= p) / (1.0 - p)
    s = np.einsum("ntd,d->nt", h[:, None, :] * masks, ck.w_o) + ck.b_o
    return sigmoid(s)


def forward_batch(ck: ModelCheckpoint, idx: np.ndarray, mode=Main()) -> ForwardBatch:
    *_, h, f = _trunk_forward(ck, idx)
    out = ForwardBatch(hidden=h, score=f)
    if isinstance(mode, Ensemble):
        out.head_scores = ensemble_scores(ck, h)
    elif isinstance(mode, McDropout):
        out.pass_scores = mcdropout_scores(ck, h, mode.passes, mode.seed)
    return out


def forward(ck: ModelCheckpoint, x: FeatureVector, mode=Main()) -> ForwardTrace:
    """Single-input view of forward_batch."""
    if x.d_x != ck.d_x:
        raise ShapeError(f"feature vector d_x={x.d_x} does not match checkpoint d_x={ck.d_x}")
    batch = forward_batch(ck, x.indices[None, :], mode)
    return ForwardTrace(
        hidden=batch.hidden[0],
        score=float(batch.score[0]),
        head_scores=None if batch.head_scores is None else batch.head_scores[0],
        pass_scores=None if batch.pass_scores is None else batch.pass_scores[0],
    )


def logloss(ck: ModelCheckpoint, idx: np.ndarray, y: np.ndarray) -> float:
    *_, f = _trunk_forward(ck, idx)
    f = np.clip(f, 1e-15, 1.0 - 1e-15)
    return float(-np.mean(y * np.log(f) + (1.0 - y) * np.log(1.0 - f)))


def logloss_and_grads(ck: ModelCheckpoint, idx: np.ndarray, y: np.ndarray):
    """Mean log loss and hand-derived gradients for every trunk group."""
    e, s_c, c, a1, h1, a2, h, f = _trunk_forward(ck, idx)
    n = idx.shape[0]
    fc = np.clip(f, 1e-15, 1.0 - 1e-15)
    loss = float(-np.mean(y * np.log(fc) + (1.0 - y) * np.log(1.0 - fc)))

    ds = (f - y) / n                                  # dL/d(pre-sigmoid)
    g_w_o = h.T @ ds
    g_b_o = float(ds.sum())
    dh = ds[:, None] * ck.w_o
    da2 = dh * (a2 > 0.0)
    g_W2 = h1.T @ da2
    g_b2 = da2.sum(axis=0)
    dh1 = da2 @ ck.W2.T
    da1 = dh1 * (a1 > 0.0)
    g_W1 = c.T @ da1
    g_b1 = da1.sum(axis=0)
    dc = da1 @ ck.W1.T

    rowdot = np.einsum("nd,nd->n", dc, e)             # (dc . e) per row
    g_b_c = dc.sum(axis=0)
    g_w_c = e.T @ rowdot
    de = dc * (s_c[:, None] + 1.0) + rowdot[:, None] * ck.w_c

    g_E = np.zeros_like(ck.E)
    np.add.at(g_E, idx.reshape(-1), np.repeat(de, FeatureSpace.N_ACTIVE, axis=0))

    grads = {"E": g_E, "w_c": g_w_c, "b_c": g_b_c, "W1": g_W1, "b1": g_b1,
             "W2": g_W2, "b2": g_b2, "w_o": g_w_o, "b_o": g_b_o}
    return loss, grads


def _global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(np.asarray(g, dtype=float) ** 2) for g in grads.values())))


def sgd_step(ck: ModelCheckpoint, grads: dict, lr: float, clip: float = 0.0) -> None:
    """In-place SGD update with optional global-norm clipping."""
    scale = lr
    if clip and clip > 0.0:
        norm = _global_norm(grads)
        if norm > clip:
            scale = lr * clip / norm
    for name, g in grads.items():
        cur = getattr(ck, name)
        if isinstance(cur, np.ndarray):
            cur -= scale * g
        else:
            setattr(ck, name, cur - scale * float(g))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_day(ck_prev: ModelCheckpoint, events: Sequence[ImpressionEvent],
              cfg: ModelConfig, seed: int) -> ModelCheckpoint:
    """One day of seeded minibatch SGD on log loss; input is untouched.

    Empty event lists return an unchanged copy tagged with the next day and
    an ``empty_day`` flag.
    """
    day = ck_prev.day + 1
    ck = ck_prev.copy()
    ck.day = day
    if not events:
        ck.flags = ck.flags + (f"empty_day:{day}",)
        return ck
    for ev in events:
        if ev.day != day:
            raise ProtocolError(f"train_day got event from day {ev.day}, expected {day}")
        if ev.features is None:
            raise ProtocolError("events must be featurized before training")
    idx = np.stack([ev.features for ev in events])
    y = np.array([ev.clicked for ev in events], dtype=float)
    for epoch in range(cfg.epochs):
        g = substream(seed, "train", day, epoch)
        for rows in _minibatches(len(events), cfg.batch_size, g):
            _, grads = logloss_and_grads(ck, idx[rows], y[rows])
            sgd_step(ck, grads, cfg.lr, cfg.grad_clip)
    ck.validate_finite()
    return ck


def train_ensemble_heads_day(ck: ModelCheckpoint, events: Sequence[ImpressionEvent],
                             cfg: ModelConfig, seed: int) -> ModelCheckpoint:
    """Per-head log-loss SGD on the frozen hidden representation.

    Heads differ through their seeded initialization and their own
    minibatch shuffles; gradients stop at h so the trunk is untouched.
    """
    if not events:
        return ck
    out = ck.copy()
    idx = np.stack([ev.features for ev in events])
    y = np.array([ev.clicked for ev in events], dtype=float)
    *_, h, _f = _trunk_forward(ck, idx)
    H = ck.We.shape[0]
    for k in range(H):
        We, be, ve, ce = out.We[k], out.be[k], out.ve[k], float(out.ce[k])
        for epoch in range(cfg.ensemble_epochs):
            g = substream(seed, "ens", k, ck.day, epoch)
            for rows in _minibatches(len(events), cfg.batch_size, g):
                hb, yb = h[rows], y[rows]
                a = hb @ We + be
                g1 = np.maximum(a, 0.0)
                f = sigmoid(g1 @ ve + ce)
                ds = (f - yb) / len(rows)
                g_ve = g1.T @ ds
                g_ce = float(ds.sum())
                dg1 = ds[:, None] * ve * (a > 0.0)
                g_We = hb.T @ dg1
                g_be = dg1.sum(axis=0)
                We -= cfg.ensemble_lr * g_We
                be -= cfg.ensemble_lr * g_be
                ve -= cfg.ensemble_lr * g_ve
                ce -= cfg.ensemble_lr * g_ce
        out.We[k], out.be[k], out.ve[k], out.ce[k] = We, be, ve, ce
    return out


HeadTrainer = Callable[[ModelCheckpoint, list, int], ModelCheckpoint]


@dataclass
class TrainRunResult:
    checkpoints: list                 # day -1 .. days-1, heads included
    train_events: dict                # day -> featurized training events
    cal_events: dict                  # day -> reserved calibration events
    feature_space: FeatureSpace
    flags: tuple = ()

    def checkpoint_for_day(self, day: int) -> ModelCheckpoint:
        ck = self.checkpoints[day + 1]
        if ck.day != day:
            raise ProtocolError(f"checkpoint list out of order at day {day}")
        return ck


def split_events(events: list[ImpressionEvent], fraction: float, seed: int):
    """Deterministic exact-count split keyed by hashed event id.

    Events are ranked by a hash of (seed, event_id); the top round(f*n)
    form the calibration reserve.  The reserve never overlaps training.
    """
    import hashlib

    n = len(events)
    n_cal = int(round(fraction * n))
    keys = [
        int.from_bytes(hashlib.blake2b(f"{seed}:cal:{ev.event_id}".encode(),
                                       digest_size=8).digest(), "little")
        for ev in events
    ]
    order = np.argsort(np.array(keys), kind="stable")
    cal_rows = set(order[:n_cal].tolist())
    cal = [ev for r, ev in enumerate(events) if r in cal_rows]
    train = [ev for r, ev in enumerate(events) if r not in cal_rows]
    return train, cal


def train_run(world: WorldState, days: int, cfg: ModelConfig, seed: int,
              provider_factory, cal_fraction: float,
              head_trainers: Sequence[HeadTrainer] = ()) -> TrainRunResult:
    """Run the prequential daily loop: simulate, split, train, snapshot.

    provider_factory(ck_prev, feature_space, day) must return the slate
    callback used to generate that day's traffic.  A fraction of each
    day's events is reserved for calibration and excluded from all
    training, including the auxiliary head trainers.
    """
    if days < 2:
        raise ConfigurationError("train_run needs days >= 2 so one prequential day exists")
    fs = FeatureSpace(cfg, world)
    ck = init_checkpoint(cfg, fs.d_x, seed)
    checkpoints = [ck]
    train_events: dict[int, list] = {}
    cal_events: dict[int, list] = {}
    flags: tuple = ()

    for day in range(days):
        provider = provider_factory(ck, fs, day)
        events = generate_day(world, day, provider)
        fs.featurize_events(events)
        train, cal = split_events(events, cal_fraction, seed)
        train_events[day] = train
        cal_events[day] = cal

        ck = train_day(ck, train, cfg, seed)
        for trainer in head_trainers:
            ck = trainer(ck, train, day)
        flags = flags + ck.flags
        checkpoints.append(ck)

    return TrainRunResult(checkpoints=checkpoints, train_events=train_events,
                          cal_events=cal_events, feature_space=fs, flags=flags)


# -- checkpoint persistence (bit-exact round trip) -------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(ck: ModelCheckpoint, path: str | Path) -> None:
    manifest = {
        "version": CHECKPOINT_VERSION,
        "day": ck.day,
        "dropout_rate": ck.dropout_rate,
        "flags": list(ck.flags),
        "dims": {"d_x": ck.d_x, "d_e": ck.E.shape[1], "d_h": ck.d_h,
                 "heads": int(ck.We.shape[0])},
    }
    arrays = {f: np.asarray(getattr(ck, f), dtype=float) for f in TRUNK_FIELDS + HEAD_FIELDS}
    buf = io.BytesIO()
    np.savez(buf, manifest=np.frombuffer(json.dumps(manifest, sort_keys=True).encode(),
                                         dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    with np.load(Path(path)) as data:
        manifest = json.loads(bytes(data["manifest"].tobytes()).decode())
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ProtocolError(f"unsupported checkpoint version {manifest['version']}")
        kw = {}
        for f in TRUNK_FIELDS + HEAD_FIELDS:
            arr = data[f]
            kw[f] = float(arr) if arr.ndim == 0 else arr.astype(float)
    return ModelCheckpoint(day=int(manifest["day"]), dropout_rate=float(manifest["dropout_rate"]),
                           flags=tuple(manifest["flags"]), **kw)
