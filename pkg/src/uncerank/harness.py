"""Command-line experiment runner.

Subcommands: simulate, train, calibrate, eval, ablate, report.  One
config file governs a run; ``--seed``, ``--out`` and ``--variants``
override config keys.  Exit codes: 0 success, 2 configuration error,
3 data or protocol error, 4 I/O error.

Every output file is written atomically (temp file + rename) and listed
with its checksum in ``manifest.json``, so a rerun with the same config
and seed can be verified byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import write_thresholds
from .config import (ExperimentConfig, config_from_mapping, dump_config, load_config,
                     parse_config_text)
from .errors import (ConfigurationError, DataError, OutputIOError, ProtocolError,
                     UncerankError)
from .metrics import write_report_csv
from .pipeline import (LAU, HAU, holdout_uncertainty, evaluate_uncertainty, rollout,
                       rollout_report, run_ablation, run_training_phase)
from .recmodel import save_checkpoint
from .simworld import build_world, generate_day, write_events_csv
from .rng import substream


def _atomic_write(path: Path, writer) -> None:
    """Write via a temp file and rename so readers never see partial files."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise OutputIOError(f"cannot write {path}: {exc}") from exc
    finally:
        if tmp.exists():
            tmp.unlink()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def run_id_for(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


class Manifest:
    """Collects artifact paths, checksums, and per-phase wall-clock."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.out_dir = out_dir
        self.data = {
            "run_id": run_id_for(cfg),
            "seed": cfg.seed,
            "config_hash": hashlib.sha256(dump_config(cfg).encode()).hexdigest(),
            "version": __version__,
            "files": {},
            "phase_seconds": {},
        }
        self._t0 = time.perf_counter()
        self._phase_start = self._t0

    def phase(self, name: str) -> None:
        now = time.perf_counter()
        self.data["phase_seconds"][name] = round(now - self._phase_start, 4)
        self._phase_start = now

    def add_file(self, path: Path) -> None:
        self.data["files"][str(path.relative_to(self.out_dir))] = _sha256(path)

    def write(self) -> None:
        self.data["phase_seconds"]["total"] = round(time.perf_counter() - self._t0, 4)
        path = self.out_dir / "manifest.json"
        _atomic_write(path, lambda p: p.write_text(
            json.dumps(self.data, indent=2, sort_keys=True) + "\n"))


def _write_csv(path: Path, header: list, rows, run_id: str | None = None) -> None:
    def writer(p: Path):
        with p.open("w", newline="") as fh:
            if run_id is not None:
                fh.write(f"# run_id={run_id}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow(row)

    _atomic_write(path, writer)


def _read_csv(path: Path):
    """Rows plus the run_id comment header, if present."""
    run_id = None
    with path.open(newline="") as fh:
        first = fh.readline()
        if first.startswith("# run_id="):
            run_id = first.strip().split("=", 1)[1]
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows, run_id


def _fmt(x) -> str:
    return "NA" if x is None else repr(float(x))


# -- subcommand bodies --------------------------------------------------------


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "variants", None):
        cfg.variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    cfg.validate()
    return cfg


def _start(cfg: ExperimentConfig):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(cfg, out)
    resolved = out / "config.resolved.txt"
    _atomic_write(resolved, lambda p: p.write_text(dump_config(cfg)))
    manifest.add_file(resolved)
    return out, manifest


def cmd_simulate(cfg: ExperimentConfig) -> int:
    """World + K days under the data-collection policy; persists logs."""
    out, manifest = _start(cfg)
    from .pipeline import exploit_provider
    from .recmodel import FeatureSpace, init_checkpoint

    world = build_world(cfg.world, cfg.seed)
    fs = FeatureSpace(cfg.model, world)
    ck = init_checkpoint(cfg.model, fs.d_x, cfg.seed)
    events = []
    for day in range(cfg.days):
        provider = exploit_provider(ck, fs, cfg.world.slate_size,
                                    cfg.explore_epsilon, cfg.seed)
        events.extend(generate_day(world, day, provider))
    manifest.phase("simulate")

    ev_path = out / "events.csv"
    _atomic_write(ev_path, lambda p: write_events_csv(events, p))
    manifest.add_file(ev_path)

    fs.featurize_events(events)
    feat_path = out / "events_features.csv"
    _write_csv(feat_path, ["event_index", "idx0", "idx1", "idx2", "idx3", "idx4"],
               ([i, *ev.features.tolist()] for i, ev in enumerate(events)),
               run_id=manifest.data["run_id"])
    manifest.add_file(feat_path)
    manifest.phase("persist")
    manifest.write()
    print(f"simulated {len(events)} impressions over {cfg.days} days -> {out}")
    return 0


def _persist_trained(cfg, trained, out: Path, manifest: Manifest) -> None:
    run_id = manifest.data["run_id"]
    all_events = [ev for day in sorted(trained.run.train_events)
                  for ev in trained.run.train_events[day]]
    cal_events = [ev for day in sorted(trained.run.cal_events)
                  for ev in trained.run.cal_events[day]]
    ev_path = out / "events_train.csv"
    _atomic_write(ev_path, lambda p: write_events_csv(all_events, p))
    manifest.add_file(ev_path)
    cal_path = out / "events_cal.csv"
    _atomic_write(cal_path, lambda p: write_events_csv(cal_events, p))
    manifest.add_file(cal_path)

    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    final_path = ck_dir / f"day_{trained.final.day:03d}.npz"
    _atomic_write(final_path, lambda p: save_checkpoint(trained.final, p))
    manifest.add_file(final_path)

    samples = trained.samples
    err_path = out / "error_samples.csv"
    _write_csv(err_path, ["day", "e", "f", "y"],
               ((int(d), repr(float(e)), repr(float(f)), int(y))
                for d, e, f, y in zip(samples.day, samples.e, samples.score, samples.y)),
               run_id=run_id)
    manifest.add_file(err_path)

    hold = holdout_uncertainty(trained)
    sc_path = out / "scores_holdout.csv"
    _write_csv(sc_path,
               ["day", "user_id", "item_id", "u_point", "u_prob", "u_ensemble",
                "u_mcdropout", "f", "mu_true"],
               ((int(hold["day"][i]), int(hold["user_id"][i]), int(hold["item_id"][i]),
                 repr(float(hold["u_point"][i])), repr(float(hold["u_prob"][i])),
                 repr(float(hold["u_ensemble"][i])), repr(float(hold["u_mcdropout"][i])),
                 repr(float(hold["f"][i])), repr(float(hold["mu"][i])))
                for i in range(hold["day"].size)),
               run_id=run_id)
    manifest.add_file(sc_path)

    for seg_name in ("LAU", "HAU"):
        thr_path = out / f"thresholds_{seg_name.lower()}.txt"
        _atomic_write(thr_path,
                      lambda p, s=seg_name: write_thresholds(
                          trained.thresholds[s]["critic"], p))
        manifest.add_file(thr_path)


def cmd_train(cfg: ExperimentConfig) -> int:
    """Full training phase: world, daily training, heads, critic, thresholds."""
    out, manifest = _start(cfg)
    trained = run_training_phase(cfg, cfg.seed)
    manifest.phase("train")
    _persist_trained(cfg, trained, out, manifest)
    manifest.phase("persist")
    manifest.write()
    n = len(trained.samples)
    print(f"trained {cfg.days} days, {n} realized-error samples -> {out}")
    return 0


def cmd_calibrate(cfg: ExperimentConfig) -> int:
    """Training phase + thresholds files only."""
    out, manifest = _start(cfg)
    trained = run_training_phase(cfg, cfg.seed)
    manifest.phase("train")
    for seg_name in ("LAU", "HAU"):
        for source in ("critic", "bayes", "ensemble", "mcdropout"):
            thr_path = out / f"thresholds_{seg_name.lower()}_{source}.txt"
            _atomic_write(thr_path,
                          lambda p, s=seg_name, src=source: write_thresholds(
                              trained.thresholds[s][src], p))
            manifest.add_file(thr_path)
    manifest.phase("persist")
    manifest.write()
    thr = trained.thresholds["LAU"]["critic"]
    print(f"calibrated q={thr.q}: tau_point={thr.tau_point:.6f} "
          f"tau_prob={thr.tau_prob:.6f} (n_cal={thr.n_cal}) -> {out}")
    return 0


def cmd_eval(cfg: ExperimentConfig, logs_path: str | None = None,
             scores_path: str | None = None) -> int:
    """Correlation/AURC table plus trend CSVs.

    With --logs/--scores, validates that both dumps carry the same run id
    and computes the table analog straight from the files (columns align
    row by row).  Otherwise runs the training phase in-process.
    """
    out, manifest = _start(cfg)
    run_id = manifest.data["run_id"]

    if logs_path or scores_path:
        if not (logs_path and scores_path):
            raise ProtocolError("eval needs both --logs and --scores, or neither")
        lhdr, lrows, lid = _read_csv(Path(logs_path))
        shdr, srows, sid = _read_csv(Path(scores_path))
        if not lrows or not srows:
            raise DataError("empty logs or scores file")
        if lid != sid:
            raise ProtocolError(f"mismatched run ids: logs={lid} scores={sid}")
        if len(lrows) != len(srows):
            raise ProtocolError("logs and scores dumps differ in length")
        e = np.array([float(r[lhdr.index("e")]) for r in lrows])
        table = {}
        from . import metrics as mx
        for name, col in (("critic", "u_point"), ("bayes", "u_prob"),
                          ("ensemble", "u_ensemble"), ("mcdropout", "u_mcdropout")):
            u = np.array([float(r[shdr.index(col)]) for r in srows])
            _, aurc, base = mx.risk_coverage(u, e)
            table[name] = {"pearson": mx.pearson(u, e), "spearman": mx.spearman(u, e),
                           "aurc": aurc, "base_risk": base}
        ev = None
    else:
        trained = run_training_phase(cfg, cfg.seed)
        manifest.phase("train")
        ev = evaluate_uncertainty(trained)
        table = ev.table

    t_path = out / "table1_analog.csv"
    _write_csv(t_path, ["estimator", "pearson", "spearman", "aurc", "base_risk"],
               ((name, _fmt(row["pearson"]), _fmt(row["spearman"]),
                 _fmt(row["aurc"]), _fmt(row["base_risk"]))
                for name, row in table.items()),
               run_id=run_id)
    manifest.add_file(t_path)

    if ev is not None:
        for ch, rows in ev.decile.items():
            path = out / f"decile_trend_{ch}.csv"
            _write_csv(path, ["bin", "mean_u", "mse"],
                       ((r["bin"], repr(r["mean_u"]), repr(r["mse"])) for r in rows),
                       run_id=run_id)
            manifest.add_file(path)
        for ch, rows in ev.age.items():
            path = out / f"age_trend_{ch}.csv"
            _write_csv(path, ["age_bucket", "mean_u", "rmse"],
                       ((r["age_bucket"], repr(r["mean_u"]), repr(r["rmse"]))
                        for r in rows),
                       run_id=run_id)
            manifest.add_file(path)
    manifest.phase("eval")
    manifest.write()
    for name, row in table.items():
        print(f"{name:10s} pearson={row['pearson']:+.4f} spearman={row['spearman']:+.4f} "
              f"aurc={row['aurc']:.4f} base={row['base_risk']:.4f}")
    return 0


def cmd_ablate(cfg: ExperimentConfig) -> int:
    """Paired-seed ablation matrix with bootstrap CIs over replications."""
    out, manifest = _start(cfg)

    def progress(done, total):
        print(f"  replication {done}/{total}", file=sys.stderr)

    result = run_ablation(cfg, progress=progress)
    manifest.phase("ablate")
    path = out / "ablation.csv"
    _write_csv(path,
               ["variant", "arm", "metric", "mean_lift", "lift_pct", "ci_lo",
                "ci_hi", "significant", "replications"],
               ((r["variant"], r["arm"], r["metric"], _fmt(r["mean_lift"]),
                 _fmt(r["lift_pct"]), _fmt(r["ci_lo"]), _fmt(r["ci_hi"]),
                 int(r["significant"]), r["replications"])
                for r in result.table),
               run_id=manifest.data["run_id"])
    manifest.add_file(path)
    manifest.phase("persist")
    manifest.write()
    for r in result.table:
        star = "*" if r["significant"] else " "
        print(f"{r['variant']:10s} {r['arm']:3s} {r['metric']:20s} "
              f"lift={r['mean_lift']:+.5f}{star} ci=[{r['ci_lo']:+.5f}, {r['ci_hi']:+.5f}]")
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    """Summarize the manifest and key CSVs of an existing output directory."""
    out = Path(cfg.out_dir)
    man_path = out / "manifest.json"
    if not man_path.exists():
        raise DataError(f"no manifest.json under {out}")
    data = json.loads(man_path.read_text())
    print(f"run_id:  {data['run_id']}")
    print(f"seed:    {data['seed']}")
    print(f"version: {data['version']}")
    print("phases:")
    for name, secs in data.get("phase_seconds", {}).items():
        print(f"  {name:12s} {secs:9.3f} s")
    print(f"files:   {len(data.get('files', {}))}")
    for rel, digest in sorted(data.get("files", {}).items()):
        print(f"  {digest[:12]}  {rel}")
    for extra in ("table1_analog.csv", "ablation.csv"):
        path = out / extra
        if path.exists():
            print(f"\n{extra}:")
            print(path.read_text().rstrip())
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uncerank",
        description="Uncertainty-aware ranking experiments on a synthetic "
                    "livestream world.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("simulate", cmd_simulate), ("train", cmd_train),
                     ("calibrate", cmd_calibrate), ("eval", cmd_eval),
                     ("ablate", cmd_ablate), ("report", cmd_report)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key-value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        if name == "ablate":
            p.add_argument("--variants", type=str, default=None,
                           help="comma-separated ablation variants")
        if name == "eval":
            p.add_argument("--logs", type=str, default=None,
                           help="error-sample dump CSV")
            p.add_argument("--scores", type=str, default=None,
                           help="uncertainty-score dump CSV")
        p.set_defaults(fn=fn, cmd_name=name)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.cmd_name == "eval":
            return args.fn(cfg, logs_path=args.logs, scores_path=args.scores)
        return args.fn(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OutputIOError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except UncerankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
