"""End-to-end experiment engine used by the CLI.

One replication runs four phases on a single root seed:

1. training: simulate daily traffic under an epsilon-greedy exploit
   policy, train the recommender prequentially, train the Beta and
   ensemble heads on the frozen trunk each day, then fit the critic on
   the pooled realized-error samples;
2. calibration: score the reserved trailing-window events with the final
   model and take per-segment quantile thresholds for every estimator;
3. rollout: branch an independent world copy per policy variant and run
   the frozen system for the configured horizon (paired arms share the
   same world seed, hence identical underlying randomness);
4. evaluation: correlation / risk-coverage tables on held-out prequential
   samples and engagement proxies per segment on the rollout logs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .calibration import CalibrationThresholds, calibrate, quantile
from .config import ExperimentConfig
from .errors import ConfigurationError, DataError, ProtocolError
from .metrics import EvalReport, engagement_report, hlt_efficiency
from .policy import PolicyConfig, final_scores_array
from .recmodel import (FeatureSpace, ModelCheckpoint, TrainRunResult, _trunk_forward,
                       ensemble_scores, mcdropout_scores, train_run,
                       train_ensemble_heads_day)
from .rng import derive_seed, substream
from .simworld import (HAU, LAU, WorldState, build_world, day_stream_checksum,
                       generate_day)
from .unckit import (CriticModel, ErrorSamples, UncertaintyScore, bayes_params,
                     collect_error_samples, train_bayes_head, train_critic,
                     u_point_batch, u_prob)

VARIANT_SETUP = {
    # variant -> (point source, prob source, active channels, policy mode)
    "unified": ("critic", "bayes", ("point", "prob"), "segment_aware"),
    "epe_only": ("critic", None, ("point",), "segment_aware"),
    "bayes_only": (None, "bayes", ("prob",), "segment_aware"),
    "ensemble": ("ensemble", None, ("point",), "segment_aware"),
    "mcdropout": ("mcdropout", None, ("point",), "segment_aware"),
    "random": ("critic", "bayes", ("point", "prob"), "random_score"),
    "off": (None, None, ("point", "prob"), "off"),
}

LAU_ARM_METRICS = ("hlt7_proxy", "vwr_proxy", "live_watch_time")
HAU_ARM_METRICS = ("show_tag_per_user", "top1_tag_uv_ratio", "live_watch_time")


# -- phase 1: training -------------------------------------------------------


def exploit_provider(ck: ModelCheckpoint, fs: FeatureSpace, slate_size: int,
                     epsilon: float, seed: int):
    """Rank by model score with per-position epsilon exploration."""

    def provider(day, uid, minute, item_ids, ages):
        idx = fs.indices(np.full(item_ids.size, uid), item_ids, ages)
        *_, _h, f = _trunk_forward(ck, idx)
        order = np.lexsort((item_ids, -f))
        ranked = [int(item_ids[i]) for i in order]
        if epsilon <= 0.0 or len(ranked) <= slate_size:
            return ranked
        g = substream(seed, "explore", day, uid)
        slate, pool = ranked[:slate_size], ranked[slate_size:]
        for pos in range(len(slate)):
            if g.random() < epsilon:
                j = int(g.integers(len(pool)))
                slate[pos], pool[j] = pool[j], slate[pos]
        return slate + pool

    return provider


@dataclass
class TrainedSystem:
    world: WorldState
    run: TrainRunResult
    samples: ErrorSamples
    critic: CriticModel
    final: ModelCheckpoint
    # thresholds[segment][source] for source in critic/bayes/ensemble/mcdropout
    thresholds: dict
    pseudo_thresholds: dict
    seed: int
    config: ExperimentConfig
    train_day_checksums: dict = field(default_factory=dict)


def _estimator_arrays(ck: ModelCheckpoint, critic: CriticModel, idx, h, f,
                      need=("critic", "bayes"), mcd_seed: int = 0,
                      mcd_passes: int = 10):
    out = {}
    if "critic" in need:
        out["critic"] = u_point_batch(critic, idx, h, f)
    if "bayes" in need:
        out["bayes"] = u_prob(bayes_params(ck, h))
    if "ensemble" in need:
        out["ensemble"] = ensemble_scores(ck, h).var(axis=1)
    if "mcdropout" in need:
        out["mcdropout"] = mcdropout_scores(ck, h, mcd_passes, mcd_seed).var(axis=1)
    return out


def run_training_phase(cfg: ExperimentConfig, seed: int) -> TrainedSystem:
    """Phases 1 and 2: train everything, then calibrate all channels."""
    world = build_world(cfg.world, seed)

    def provider_factory(ck, fs, day):
        return exploit_provider(ck, fs, cfg.world.slate_size, cfg.explore_epsilon, seed)

    def bayes_trainer(ck, events, day):
        if not events:
            return ck
        return train_bayes_head(ck, events, cfg.bayes, derive_seed(seed, "bayes", day))

    def ensemble_trainer(ck, events, day):
        return train_ensemble_heads_day(ck, events, cfg.model,
                                        derive_seed(seed, "ens", day))

    run = train_run(world, cfg.days, cfg.model, seed, provider_factory,
                    cfg.cal_fraction, head_trainers=(bayes_trainer, ensemble_trainer))

    samples = collect_error_samples(run.checkpoints, run.train_events,
                                    run.feature_space.d_x)
    critic = train_critic(samples, cfg.critic, seed)
    final = run.checkpoints[-1]

    thresholds = _calibrate_all(cfg, run, critic, final, seed)
    pseudo = _pseudo_thresholds(cfg, thresholds, seed)
    checksums = {day: day_stream_checksum(seed, day, cfg.world.n_users)
                 for day in range(cfg.days)}
    return TrainedSystem(world=world, run=run, samples=samples, critic=critic,
                         final=final, thresholds=thresholds, pseudo_thresholds=pseudo,
                         seed=seed, config=cfg, train_day_checksums=checksums)


def _trailing_cal_events(cfg: ExperimentConfig, run: TrainRunResult):
    window = cfg.calibration.window_days
    days = sorted(run.cal_events)
    chosen = days[-window:]
    events = [ev for d in chosen for ev in run.cal_events[d]]
    return events, (chosen[0], chosen[-1])


def _calibrate_all(cfg: ExperimentConfig, run: TrainRunResult, critic: CriticModel,
                   final: ModelCheckpoint, seed: int) -> dict:
    """Per-segment thresholds for every estimator on final-model scores."""
    events, day_range = _trailing_cal_events(cfg, run)
    if not events:
        raise DataError("no calibration events were reserved")
    idx = np.stack([ev.features for ev in events])
    *_, h, f = _trunk_forward(final, idx)
    arrays = _estimator_arrays(final, critic, idx, h, f,
                               need=("critic", "bayes", "ensemble", "mcdropout"),
                               mcd_seed=derive_seed(seed, "mcd-cal"),
                               mcd_passes=cfg.model.dropout_passes)
    segs = np.array([run.feature_space.segment_table[ev.user_id] for ev in events])

    q, n_min = cfg.calibration.q, cfg.calibration.n_min
    out: dict = {}
    for seg, name in ((LAU, "LAU"), (HAU, "HAU")):
        mask = segs == seg
        if mask.sum() < n_min:
            raise DataError(
                f"calibration split holds {int(mask.sum())} {name} events, "
                f"needs {n_min}")
        per_source = {}
        for source in ("critic", "bayes", "ensemble", "mcdropout"):
            pts = arrays[source][mask]
            prs = arrays["bayes"][mask]
            per_source[source] = CalibrationThresholds(
                tau_point=quantile(pts, q), tau_prob=quantile(prs, q), q=q,
                n_cal=int(mask.sum()), day_range=day_range,
                scale_point=float(pts.max()), scale_prob=float(prs.max()))
        out[name] = per_source
    return out


def _pseudo_thresholds(cfg: ExperimentConfig, thresholds: dict, seed: int) -> dict:
    """Thresholds for the random baseline, calibrated on pseudo-scores.

    Pseudo-uncertainty is uniform on [0, scale] per channel, where scale
    matches the real channel's observed calibration range; the quantile
    machinery is then applied unchanged so flag rates line up.
    """
    out = {}
    q = cfg.calibration.q
    for seg_name, per_source in thresholds.items():
        real = per_source["critic"]
        g = substream(seed, "pseudo-cal", seg_name)
        pts = g.random(real.n_cal) * real.scale_point
        prs = g.random(real.n_cal) * per_source["bayes"].scale_prob
        out[seg_name] = CalibrationThresholds(
            tau_point=quantile(pts, q), tau_prob=quantile(prs, q), q=q,
            n_cal=real.n_cal, day_range=real.day_range,
            scale_point=real.scale_point,
            scale_prob=per_source["bayes"].scale_prob)
    return out


# -- phase 3: rollout --------------------------------------------------------


@dataclass
class RolloutResult:
    variant: str
    events: list
    slate_rows: list
    checksums: dict
    first_day: int
    last_day: int
    world: WorldState


def variant_policy(variant: str, trained: TrainedSystem) -> tuple:
    """(PolicyConfig per segment dict, point source, prob source)."""
    if variant not in VARIANT_SETUP:
        raise ConfigurationError(f"unknown ablation variant: {variant!r}")
    point_src, prob_src, channels, mode = VARIANT_SETUP[variant]
    cfg = trained.config
    thr_source = point_src or "critic"
    if variant == "random":
        thr = {"LAU": trained.pseudo_thresholds["LAU"],
               "HAU": trained.pseudo_thresholds["HAU"]}
    else:
        thr = {"LAU": trained.thresholds["LAU"][thr_source],
               "HAU": trained.thresholds["HAU"][thr_source]}
    policies = {
        seg: PolicyConfig(mode=mode, deboost=cfg.policy.deboost,
                          explore_weight=cfg.policy.explore_weight,
                          thresholds=thr[seg_name], channels=channels,
                          filter_risky=cfg.policy.filter_risky, seed=trained.seed)
        for seg, seg_name in ((LAU, "LAU"), (HAU, "HAU"))
    }
    return policies, point_src, prob_src


def rollout(trained: TrainedSystem, variant: str, days: int,
            log_slates: bool = False) -> RolloutResult:
    """Run one frozen-policy arm on an independent copy of the world."""
    cfg = trained.config
    world = trained.world.copy()
    fs = trained.run.feature_space
    ck, critic = trained.final, trained.critic
    policies, point_src, prob_src = variant_policy(variant, trained)
    seed = trained.seed
    slate_size = cfg.world.slate_size
    need = tuple(s for s in (point_src, prob_src) if s)

    slate_rows: list = []
    events: list = []
    checksums: dict = {}
    first_day = world.day_index
    mode = policies[LAU].mode

    for day in range(first_day, first_day + days):
        def provider(d, uid, minute, item_ids, ages):
            idx = fs.indices(np.full(item_ids.size, uid), item_ids, ages)
            *_, h, f = _trunk_forward(ck, idx)
            arrays = _estimator_arrays(
                ck, critic, idx, h, f, need=need,
                mcd_seed=derive_seed(seed, "mcd-roll", d, uid),
                mcd_passes=cfg.model.dropout_passes)
            zeros = np.zeros(item_ids.size)
            u_pt = arrays.get(point_src, zeros) if point_src else zeros
            u_pr = arrays.get(prob_src, zeros) if prob_src else zeros
            seg = int(fs.segment_table[uid])
            pcfg = policies[seg]
            if mode == "random_score":
                g = substream(seed, "policy-random", d, uid)
                thr = pcfg.thresholds
                u_pt = g.random(item_ids.size) * thr.scale_point
                u_pr = g.random(item_ids.size) * thr.scale_prob
            r_final, risky = final_scores_array(mode, f, u_pt, u_pr, seg, pcfg)
            order = np.lexsort((item_ids, -r_final))
            if pcfg.filter_risky and seg == LAU and np.any(~risky):
                order = np.concatenate([order[~risky[order]], order[risky[order]]])
            if log_slates:
                for pos, i in enumerate(order[:slate_size]):
                    slate_rows.append((d, uid, pos, int(item_ids[i]), float(f[i]),
                                       float(u_pt[i]), float(u_pr[i]), bool(risky[i]),
                                       float(r_final[i]), mode))
            return [int(item_ids[i]) for i in order]

        events.extend(generate_day(world, day, provider))
        checksums[day] = day_stream_checksum(seed, day, cfg.world.n_users)

    return RolloutResult(variant=variant, events=events, slate_rows=slate_rows,
                         checksums=checksums, first_day=first_day,
                         last_day=first_day + days - 1, world=world)


def rollout_report(res: RolloutResult, segment: int | None = None) -> EvalReport:
    world = res.world
    if segment is None:
        events = res.events
    else:
        seg_table = world.user_segment
        events = [ev for ev in res.events if seg_table[ev.user_id] == segment]
    return engagement_report_segment(events, world, res.first_day, res.last_day, segment)


def engagement_report_segment(events, world, first_day, last_day, segment):
    """Engagement proxies over one user segment (or all users)."""
    report = engagement_report(events, world, first_day, last_day)
    if segment is None:
        return report
    # Retention must be averaged over the segment's population, not all users.
    n_users = world.config.n_users
    tail_start = last_day - 6
    tail_watch = np.zeros(n_users)
    for ev in events:
        if ev.day >= tail_start:
            tail_watch[ev.user_id] += ev.watch_minutes
    tail_watch[world.churned] = 0.0
    mask = world.user_segment == segment
    report.hlt7_proxy = float(tail_watch[mask].mean())
    return report


# -- phase 4: uncertainty evaluation (table and trend analogs) ----------------


@dataclass
class UncertaintyEval:
    table: dict                   # estimator -> {pearson, spearman, aurc, base_risk}
    decile: dict                  # channel -> rows
    age: dict                     # channel -> rows
    holdout: dict                 # raw per-sample arrays for dumps/tests
    flags: tuple = ()


def holdout_uncertainty(trained: TrainedSystem) -> dict:
    """Prequential estimator scores on the reserved calibration events.

    Day-k holdout events are scored by the day-(k-1) checkpoint, heads
    included, so no estimator has trained on the rows it is judged by.
    """
    cfg = trained.config
    run = trained.run
    by_day = {ck.day: ck for ck in run.checkpoints}
    cols = {name: [] for name in ("day", "user_id", "item_id", "age", "f", "y",
                                  "u_point", "u_prob", "u_ensemble", "u_mcdropout",
                                  "mu")}
    for day in sorted(run.cal_events):
        if day - 1 not in by_day or not run.cal_events[day]:
            continue
        if day == 0:
            continue
        events = run.cal_events[day]
        ck = by_day[day - 1]
        idx = np.stack([ev.features for ev in events])
        *_, h, f = _trunk_forward(ck, idx)
        arrays = _estimator_arrays(ck, trained.critic, idx, h, f,
                                   need=("critic", "bayes", "ensemble", "mcdropout"),
                                   mcd_seed=derive_seed(trained.seed, "mcd-eval", day),
                                   mcd_passes=cfg.model.dropout_passes)
        uids = np.array([ev.user_id for ev in events])
        iids = np.array([ev.item_id for ev in events])
        ages = np.array([ev.stream_age_min for ev in events])
        cols["day"].append(np.full(len(events), day))
        cols["user_id"].append(uids)
        cols["item_id"].append(iids)
        cols["age"].append(ages)
        cols["f"].append(f)
        cols["y"].append(np.array([ev.clicked for ev in events], dtype=float))
        cols["u_point"].append(arrays["critic"])
        cols["u_prob"].append(arrays["bayes"])
        cols["u_ensemble"].append(arrays["ensemble"])
        cols["u_mcdropout"].append(arrays["mcdropout"])
        cols["mu"].append(trained.world.mu(uids, iids, ages))
    if not cols["day"]:
        raise DataError("no held-out prequential events available")
    out = {k: np.concatenate(v) for k, v in cols.items()}
    out["e"] = (out["y"] - out["f"]) ** 2
    return out


def evaluate_uncertainty(trained: TrainedSystem,
                         holdout: dict | None = None) -> UncertaintyEval:
    hold = holdout if holdout is not None else holdout_uncertainty(trained)
    e = hold["e"]
    table = {}
    for name, key in (("critic", "u_point"), ("bayes", "u_prob"),
                      ("ensemble", "u_ensemble"), ("mcdropout", "u_mcdropout")):
        u = hold[key]
        _, aurc, base = metrics_mod.risk_coverage(u, e)
        table[name] = {
            "pearson": metrics_mod.pearson(u, e),
            "spearman": metrics_mod.spearman(u, e),
            "aurc": aurc,
            "base_risk": base,
        }
    decile = {ch: metrics_mod.decile_trend(hold[key], e)
              for ch, key in (("u_point", "u_point"), ("u_prob", "u_prob"))}
    age_edges = trained.config.model.age_bucket_edges
    age, flags = {}, ()
    for ch, key in (("u_point", "u_point"), ("u_prob", "u_prob")):
        rows, fl = metrics_mod.age_trend(hold["age"], hold[key], e, age_edges)
        age[ch] = rows
        flags = flags + tuple(fl)
    return UncertaintyEval(table=table, decile=decile, age=age, holdout=hold,
                           flags=flags)


# -- ablation -----------------------------------------------------------------


@dataclass
class AblationResult:
    lifts: dict          # (variant, arm, metric) -> per-replication deltas
    baseline: dict       # (arm, metric) -> per-replication baseline values
    table: list          # rendered rows
    checksum_ok: bool = True


def _bootstrap_ci(values: np.ndarray, seed: int, n_boot: int = 4000,
                  level: float = 0.95):
    """Percentile bootstrap CI of the mean over replications."""
    g = substream(seed, "bootstrap")
    n = values.size
    means = g.choice(values, size=(n_boot, n), replace=True).mean(axis=1)
    lo = float(np.quantile(means, (1.0 - level) / 2.0))
    hi = float(np.quantile(means, 1.0 - (1.0 - level) / 2.0))
    return lo, hi


def run_ablation(cfg: ExperimentConfig, progress=None) -> AblationResult:
    """Matched-seed paired rollouts per variant with bootstrap CIs."""
    variants = list(cfg.variants)
    if "off" not in variants:
        variants.append("off")
    reps = cfg.replications

    per_rep: dict = {}
    base_rows: dict = {}
    checksum_ok = True
    for rep in range(reps):
        rep_seed = derive_seed(cfg.seed, "rep", rep)
        trained = run_training_phase(cfg, rep_seed)
        arm_metrics: dict = {}
        checks: dict = {}
        for variant in variants:
            res = rollout(trained, variant, cfg.rollout_days)
            checks[variant] = res.checksums
            lau = rollout_report(res, LAU)
            hau = rollout_report(res, HAU)
            arm_metrics[variant] = {"LAU": lau, "HAU": hau}
        ref = checks[variants[0]]
        for variant in variants[1:]:
            if checks[variant] != ref:
                checksum_ok = False
                raise ProtocolError(
                    f"paired-seed discipline broken: world checksums differ for "
                    f"variant {variant} in replication {rep}")

        off = arm_metrics["off"]
        for arm, metric_names in (("LAU", LAU_ARM_METRICS), ("HAU", HAU_ARM_METRICS)):
            for metric in metric_names:
                base = getattr(off[arm], metric)
                if base is not None:
                    base_rows.setdefault((arm, metric), []).append(base)
        for variant in variants:
            for arm, metric_names in (("LAU", LAU_ARM_METRICS), ("HAU", HAU_ARM_METRICS)):
                for metric in metric_names:
                    val = getattr(arm_metrics[variant][arm], metric)
                    base = getattr(off[arm], metric)
                    if val is None or base is None:
                        continue
                    per_rep.setdefault((variant, arm, metric), []).append(val - base)
            eff = hlt_efficiency(arm_metrics[variant]["LAU"].hlt7_proxy,
                                 off["LAU"].hlt7_proxy,
                                 arm_metrics[variant]["LAU"].live_watch_time,
                                 off["LAU"].live_watch_time)
            if eff is not None:
                per_rep.setdefault((variant, "LAU", "hlt_efficiency"), []).append(eff)
        if progress is not None:
            progress(rep + 1, reps)

    table = []
    for (variant, arm, metric), deltas in sorted(per_rep.items()):
        arr = np.array(deltas, dtype=float)
        if metric == "hlt_efficiency":
            mean, lo, hi = float(arr.mean()), float("nan"), float("nan")
            pct = None
            significant = False
        else:
            mean = float(arr.mean())
            lo, hi = _bootstrap_ci(arr, derive_seed(cfg.seed, "ci", variant, arm, metric))
            base_arr = np.array(base_rows.get((arm, metric), [np.nan]), dtype=float)
            base_mean = float(np.nanmean(base_arr))
            pct = 100.0 * mean / base_mean if base_mean != 0.0 else None
            significant = (lo > 0.0) or (hi < 0.0)
        table.append({
            "variant": variant, "arm": arm, "metric": metric,
            "mean_lift": mean, "lift_pct": pct, "ci_lo": lo, "ci_hi": hi,
            "significant": significant, "replications": int(arr.size),
        })
    lifts = {key: np.array(vals, dtype=float) for key, vals in per_rep.items()}
    baseline = {key: np.array(vals, dtype=float) for key, vals in base_rows.items()}
    return AblationResult(lifts=lifts, baseline=baseline, table=table,
                          checksum_ok=checksum_ok)
