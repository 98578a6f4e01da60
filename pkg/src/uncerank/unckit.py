"""Uncertainty estimators and the oracle error decomposition.

Four scores for one input x:

* ``u_point``: a small regression critic reads [x || h || f] and predicts
  the realized squared error of the recommender; softplus output keeps it
  nonnegative.
* ``u_prob``: the prior variance of a Beta(alpha, beta) head whose logits
  are linear in the shared hidden representation, trained by maximizing
  the closed-form Bernoulli marginal likelihood.
* ``u_ensemble`` / ``u_mcdropout``: population variance across ensemble
  heads or seeded dropout passes.

``decompose_epe_oracle`` recomputes bias^2 + model variance + data noise
against the world's exact ground truth over independent retrainings; the
test suite uses it as the reference the learned estimators are judged by.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import BayesConfig, CriticConfig
from .errors import ConfigurationError, ProtocolError, ShapeError
from .recmodel import (FeatureSpace, ForwardTrace, ModelCheckpoint, _trunk_forward,
                       sigmoid, softplus)
from .rng import substream
from .simworld import ImpressionEvent, WorldState

__all__ = [
    "CriticInput", "ErrorSamples", "CriticModel", "BetaParams", "UncertaintyScore",
    "collect_error_samples", "train_critic", "u_point", "u_point_batch",
    "bayes_params", "bayes_marginal_loglik", "bayes_nll_and_grads", "train_bayes_head",
    "u_prob", "variance_decomposition", "u_ensemble", "u_mcdropout",
    "decompose_epe_oracle",
]

MAX_BETA_PRIOR_VAR = 1.0 / 12.0


@dataclass
class CriticInput:
    """One critic input z = [x || h || f] in index/dense split form."""

    x_indices: np.ndarray
    hidden: np.ndarray
    score: float
    d_x: int

    def dense(self) -> np.ndarray:
        z = np.zeros(self.d_x + self.hidden.size + 1)
        z[self.x_indices] = 1.0
        z[self.d_x:self.d_x + self.hidden.size] = self.hidden
        z[-1] = self.score
        return z


class ErrorSamples:
    """Column store of realized prequential error samples."""

    def __init__(self, feat_idx: np.ndarray, hidden: np.ndarray, score: np.ndarray,
                 y: np.ndarray, day: np.ndarray, d_x: int):
        self.feat_idx = feat_idx
        self.hidden = hidden
        self.score = score
        self.y = y
        self.day = day
        self.d_x = d_x
        self.e = (y - score) ** 2
        if np.any(self.e < 0.0) or np.any(self.e > 1.0):
            raise ProtocolError("realized errors left [0, 1]; outcomes must be binary")

    def __len__(self) -> int:
        return int(self.score.size)

    def subset(self, rows) -> "ErrorSamples":
        rows = np.asarray(rows)
        return ErrorSamples(self.feat_idx[rows], self.hidden[rows], self.score[rows],
                            self.y[rows], self.day[rows], self.d_x)

    def critic_input(self, row: int) -> CriticInput:
        return CriticInput(self.feat_idx[row], self.hidden[row],
                           float(self.score[row]), self.d_x)


def collect_error_samples(checkpoints: Sequence[ModelCheckpoint],
                          events_by_day: dict[int, list[ImpressionEvent]],
                          d_x: int) -> ErrorSamples:
    """Prequential samples: day-k events scored by the day-(k-1) checkpoint.

    One sample per event.  Pairing is validated: the checkpoint used for
    day k must be tagged k-1, which guarantees it never trained on the
    events it is being scored against.
    """
    by_day = {ck.day: ck for ck in checkpoints}
    feat, hid, sco, ys, ds = [], [], [], [], []
    for day in sorted(events_by_day):
        events = events_by_day[day]
        if not events:
            continue
        ck = by_day.get(day - 1)
        if ck is None:
            raise ProtocolError(f"no checkpoint tagged day {day - 1} for day-{day} events")
        idx = np.stack([ev.features for ev in events])
        *_, h, f = _trunk_forward(ck, idx)
        feat.append(idx)
        hid.append(h)
        sco.append(f)
        ys.append(np.array([ev.clicked for ev in events], dtype=float))
        ds.append(np.full(len(events), day, dtype=np.int64))
    if not feat:
        raise ProtocolError("no prequential (checkpoint, events) pairs available")
    return ErrorSamples(np.concatenate(feat), np.concatenate(hid), np.concatenate(sco),
                        np.concatenate(ys), np.concatenate(ds), d_x)


@dataclass
class CriticModel:
    """Two-layer MLP over z with softplus output, so g(z) >= 0 always."""

    W1x: np.ndarray   # (d_x, m), addressed by active feature indices
    W1h: np.ndarray   # (d_h, m)
    w1f: np.ndarray   # (m,)
    b1: np.ndarray    # (m,)
    w2: np.ndarray    # (m,)
    b2: float

    @property
    def d_x(self) -> int:
        return self.W1x.shape[0]

    def copy(self) -> "CriticModel":
        return CriticModel(self.W1x.copy(), self.W1h.copy(), self.w1f.copy(),
                           self.b1.copy(), self.w2.copy(), float(self.b2))


def init_critic(d_x: int, d_h: int, hidden: int, seed: int) -> CriticModel:
    g = substream(seed, "init", "critic")
    return CriticModel(
        W1x=g.normal(0.0, 0.05, size=(d_x, hidden)),
        W1h=g.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, hidden)),
        w1f=g.normal(0.0, 0.5, size=hidden),
        b1=np.full(hidden, 0.1),
        w2=g.normal(0.0, 0.3, size=hidden),
        b2=-1.0,
    )


def _critic_forward(cr: CriticModel, feat_idx: np.ndarray, hidden: np.ndarray,
                    score: np.ndarray):
    if hidden.shape[1] != cr.W1h.shape[0]:
        raise ShapeError("hidden width does not match critic")
    a = cr.W1x[feat_idx].sum(axis=1) + hidden @ cr.W1h + score[:, None] * cr.w1f + cr.b1
    r = np.maximum(a, 0.0)
    s = r @ cr.w2 + cr.b2
    return a, r, s, softplus(s)


def u_point_batch(cr: CriticModel, feat_idx: np.ndarray, hidden: np.ndarray,
                  score: np.ndarray) -> np.ndarray:
    """Critic prediction g(z) for a batch; pure and nonnegative."""
    return _critic_forward(cr, feat_idx, hidden, score)[3]


def u_point(cr: CriticModel, z: CriticInput) -> float:
    if z.d_x != cr.d_x:
        raise ShapeError(f"critic d_x={cr.d_x} does not match input d_x={z.d_x}")
    return float(u_point_batch(cr, z.x_indices[None], z.hidden[None],
                               np.array([z.score]))[0])


def critic_mse(cr: CriticModel, samples: ErrorSamples, rows=None) -> float:
    sub = samples if rows is None else samples.subset(rows)
    g = u_point_batch(cr, sub.feat_idx, sub.hidden, sub.score)
    return float(np.mean((g - sub.e) ** 2))


def critic_mse_and_grads(cr: CriticModel, samples: ErrorSamples, rows):
    sub = samples.subset(rows)
    a, r, s, g = _critic_forward(cr, sub.feat_idx, sub.hidden, sub.score)
    n = len(sub)
    resid = g - sub.e
    loss = float(np.mean(resid ** 2))
    ds = 2.0 * resid * sigmoid(s) / n          # softplus' = sigmoid
    g_w2 = r.T @ ds
    g_b2 = float(ds.sum())
    da = ds[:, None] * cr.w2 * (a > 0.0)
    g_W1h = sub.hidden.T @ da
    g_w1f = da.T @ sub.score
    g_b1 = da.sum(axis=0)
    g_W1x = np.zeros_like(cr.W1x)
    np.add.at(g_W1x, sub.feat_idx.reshape(-1),
              np.repeat(da, sub.feat_idx.shape[1], axis=0))
    grads = {"W1x": g_W1x, "W1h": g_W1h, "w1f": g_w1f, "b1": g_b1,
             "w2": g_w2, "b2": g_b2}
    return loss, grads


def train_critic(samples: ErrorSamples, cfg: CriticConfig, seed: int,
                 d_h: int | None = None) -> CriticModel:
    """Seeded SGD on the MSE between g(z) and realized errors.

    The recommender is never touched: the critic owns all its parameters
    and reads only frozen (z, e) pairs.
    """
    if len(samples) == 0:
        raise ConfigurationError("train_critic needs a nonempty sample set")
    cr = init_critic(samples.d_x, samples.hidden.shape[1], cfg.hidden, seed)
    n = len(samples)
    for epoch in range(cfg.epochs):
        g = substream(seed, "critic", epoch)
        order = g.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            _, grads = critic_mse_and_grads(cr, samples, rows)
            for name, grad in grads.items():
                cur = getattr(cr, name)
                if isinstance(cur, np.ndarray):
                    cur -= cfg.lr * grad
                else:
                    setattr(cr, name, cur - cfg.lr * float(grad))
    return cr


# -- Beta-Bernoulli head ----------------------------------------------------


@dataclass
class BetaParams:
    """Beta prior parameters; both stay above 1 through 1 + softplus."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if np.any(self.alpha <= 1.0) or np.any(self.beta <= 1.0):
            raise ProtocolError("Beta parameters must satisfy alpha > 1 and beta > 1")

    @classmethod
    def from_logits(cls, u, v) -> "BetaParams":
        return cls(1.0 + softplus(u), 1.0 + softplus(v))

    @property
    def mean(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    @property
    def concentration(self) -> np.ndarray:
        return self.alpha + self.beta


def bayes_logits(ck: ModelCheckpoint, hidden: np.ndarray):
    u = hidden @ ck.w_u + ck.b_u
    v = hidden @ ck.w_v + ck.b_v
    return u, v


def bayes_params(ck: ModelCheckpoint, hidden: np.ndarray) -> BetaParams:
    u, v = bayes_logits(ck, hidden)
    return BetaParams.from_logits(u, v)


def bayes_marginal_loglik(bp: BetaParams, y) -> np.ndarray:
    """Closed-form log integral of Bernoulli(y | theta) under Beta(theta)."""
    y = np.asarray(y, dtype=float)
    m = bp.mean
    return y * np.log(m) + (1.0 - y) * np.log(1.0 - m)


def bayes_nll_and_grads(ck: ModelCheckpoint, hidden: np.ndarray, y: np.ndarray):
    """Mean negative marginal log-likelihood and head-parameter gradients.

    d/d alpha of the per-sample loglik is y/alpha - 1/(alpha+beta) (and
    symmetrically for beta); the chain runs through softplus and the
    linear logit maps.  The trunk receives no gradient.
    """
    n = hidden.shape[0]
    u, v = bayes_logits(ck, hidden)
    bp = BetaParams.from_logits(u, v)
    a, b = bp.alpha, bp.beta
    loss = float(-np.mean(bayes_marginal_loglik(bp, y)))
    dl_da = y / a - 1.0 / (a + b)          # of the log-likelihood
    dl_db = (1.0 - y) / b - 1.0 / (a + b)
    du = -dl_da * sigmoid(u) / n           # descent direction on NLL
    dv = -dl_db * sigmoid(v) / n
    grads = {
        "w_u": hidden.T @ du, "b_u": float(du.sum()),
        "w_v": hidden.T @ dv, "b_v": float(dv.sum()),
    }
    return loss, grads


def train_bayes_head(ck: ModelCheckpoint, events: Sequence[ImpressionEvent],
                     cfg: BayesConfig, seed: int) -> ModelCheckpoint:
    """Type-II maximum likelihood for the Beta head on a frozen trunk.

    Returns a new checkpoint whose only changed fields are the Beta-head
    logit parameters; the trunk hash is preserved.
    """
    if not events:
        raise ConfigurationError("train_bayes_head needs a nonempty event list")
    out = ck.copy()
    idx = np.stack([ev.features for ev in events])
    y = np.array([ev.clicked for ev in events], dtype=float)
    *_, h, _f = _trunk_forward(ck, idx)
    n = len(events)
    for epoch in range(cfg.epochs):
        g = substream(seed, "bayes", ck.day, epoch)
        order = g.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            _, grads = bayes_nll_and_grads(out, h[rows], y[rows])
            out.w_u -= cfg.lr * grads["w_u"]
            out.b_u -= cfg.lr * grads["b_u"]
            out.w_v -= cfg.lr * grads["w_v"]
            out.b_v -= cfg.lr * grads["b_v"]
    return out


def u_prob(bp: BetaParams) -> np.ndarray:
    """Prior variance alpha*beta / ((alpha+beta)^2 (alpha+beta+1))."""
    a, b = bp.alpha, bp.beta
    return a * b / ((a + b) ** 2 * (a + b + 1.0))


def variance_decomposition(bp: BetaParams):
    """Law-of-total-variance split; aleatoric + epistemic == total exactly.

    aleatoric = E[theta(1-theta)], epistemic = Var(theta),
    total = p(1-p) with p the prior mean.
    """
    a, b = bp.alpha, bp.beta
    aleatoric = a * b / ((a + b) * (a + b + 1.0))
    epistemic = u_prob(bp)
    p = a / (a + b)
    total = p * (1.0 - p)
    return aleatoric, epistemic, total


# -- structural baselines ----------------------------------------------------


def u_ensemble(trace: ForwardTrace) -> float:
    """Population variance across the ensemble head outputs."""
    if trace.head_scores is None:
        raise ProtocolError("trace carries no ensemble head scores")
    return float(np.var(np.asarray(trace.head_scores, dtype=float)))


def u_mcdropout(trace: ForwardTrace) -> float:
    """Population variance across the stochastic dropout passes."""
    if trace.pass_scores is None:
        raise ProtocolError("trace carries no dropout pass scores")
    return float(np.var(np.asarray(trace.pass_scores, dtype=float)))


@dataclass
class UncertaintyScore:
    """Per-input uncertainty channels; every component is nonnegative."""

    u_point: float
    u_prob: float
    u_total: float | None = None
    u_ensemble: float | None = None
    u_mcdropout: float | None = None

    def __post_init__(self):
        for name in ("u_point", "u_prob", "u_total", "u_ensemble", "u_mcdropout"):
            v = getattr(self, name)
            if v is not None and v < 0.0:
                raise ProtocolError(f"{name} must be nonnegative, got {v}")
        if self.u_prob >= MAX_BETA_PRIOR_VAR + 1e-9:
            raise ProtocolError(f"u_prob {self.u_prob} exceeds the Beta prior bound 1/12")


# -- oracle decomposition -----------------------------------------------------


def decompose_epe_oracle(world: WorldState, contexts: Sequence[tuple],
                         retrain_fn: Callable[[int], tuple], R: int) -> dict:
    """Ground-truth error decomposition over R independent retrainings.

    contexts is a list of (user_id, item_id, stream_age_min).  retrain_fn(r)
    must return (checkpoint, feature_space) for replicate r, trained from a
    fresh seed.  Per context the mean prediction over the fleet gives the
    bias term against true mu, the fleet's population variance gives the
    model-variance term, and mu(1-mu) is the exact data noise; their sum
    is the expected squared prediction error.
    """
    if R < 2:
        raise ConfigurationError("decompose_epe_oracle needs R >= 2 retrainings")
    ctx = list(contexts)
    users = np.array([c[0] for c in ctx], dtype=np.int64)
    items = np.array([c[1] for c in ctx], dtype=np.int64)
    ages = np.array([c[2] for c in ctx], dtype=np.int64)

    preds = np.empty((R, len(ctx)))
    for r in range(R):
        ck, fs = retrain_fn(r)
        idx = fs.indices(users, items, ages)
        *_, _h, f = _trunk_forward(ck, idx)
        preds[r] = f

    mu = world.mu(users, items, ages)
    fbar = preds.mean(axis=0)
    model_var = preds.var(axis=0)          # population variance over the fleet
    bias2 = (fbar - mu) ** 2
    data_noise = mu * (1.0 - mu)
    return {
        "mu": mu, "fbar": fbar, "preds": preds,
        "bias2": bias2, "model_var": model_var, "data_noise": data_noise,
        "epe_sum": bias2 + model_var + data_noise,
    }
