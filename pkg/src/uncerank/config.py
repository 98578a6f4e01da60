"""Run configuration: dataclasses plus the plain-text key-value file format.

Config files are lines of ``section.key = value`` with ``#`` comments.
Values are parsed as bool / int / float / comma-separated list / string,
in that order of preference.  Unknown keys and missing required keys are
configuration errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError

REQUIRED_KEYS = ("world.n_users", "world.n_streams", "days")


@dataclass
class WorldConfig:
    """Constants of the synthetic livestream platform."""

    n_users: int = 1200
    n_streams: int = 130
    n_tags: int = 12
    n_common_tags: int = 7
    lau_fraction: float = 0.35
    d_u: int = 8
    slate_size: int = 8

    # Activity bands.  LAU band * 30 stays strictly below 7 expected
    # monthly active days; the HAU band stays at or above it.
    lau_activity_lo: float = 0.08
    lau_activity_hi: float = 0.20
    hau_activity_lo: float = 0.35
    hau_activity_hi: float = 0.80

    # Latent preference / quality geometry.
    lau_pref_scale: float = 0.35
    hau_pref_scale: float = 1.45
    pref_noise: float = 0.45
    pref_cap: float = 3.0
    tag_centroid_scale: float = 1.0
    quality_noise: float = 0.55
    appeal_mean: float = 0.0
    appeal_std: float = 1.0
    niche_appeal_shift: float = -0.2

    # Click-probability logit components.
    lau_offset: float = -1.1
    hau_offset: float = 0.3
    age_gain: float = 1.6
    age_scale_min: float = 150.0

    # Stream lifecycle: a fraction of streams is born after day 0, skewed
    # toward niche tags.
    birth_fraction: float = 0.45
    niche_birth_bias: float = 0.7
    total_days: int = 28
    start_minute_max: int = 720
    session_minute_lo: int = 720

    # Churn and engagement.
    low_quality_floor: float = 0.18
    hazard_init: float = 0.015
    churn_penalty: float = 0.010
    lau_churn_mult: float = 3.5
    hau_churn_mult: float = 0.6
    valuable_recovery: float = 0.02
    watch_scale: float = 5.0
    valuable_scale: float = 1.25

    def validate(self) -> None:
        if self.n_users <= 0 or self.n_streams <= 0 or self.n_tags <= 0:
            raise ConfigurationError("world sizes must be positive")
        if not 0.0 <= self.lau_fraction <= 1.0:
            raise ConfigurationError("lau_fraction must lie in [0, 1]")
        if self.d_u <= 0 or self.slate_size <= 0:
            raise ConfigurationError("d_u and slate_size must be positive")
        if not 0 < self.n_common_tags <= self.n_tags:
            raise ConfigurationError("n_common_tags must lie in (0, n_tags]")
        for lo, hi in ((self.lau_activity_lo, self.lau_activity_hi),
                       (self.hau_activity_lo, self.hau_activity_hi)):
            if not 0.0 < lo <= hi <= 1.0:
                raise ConfigurationError("activity bands must satisfy 0 < lo <= hi <= 1")
        # Segment boundary: LAU = expected active days per 30-day window < 7.
        if self.lau_activity_hi * 30.0 >= 7.0:
            raise ConfigurationError("LAU activity band must keep 30*rate < 7")
        if self.hau_activity_lo * 30.0 < 7.0:
            raise ConfigurationError("HAU activity band must keep 30*rate >= 7")
        if not 0.0 <= self.birth_fraction < 1.0:
            raise ConfigurationError("birth_fraction must lie in [0, 1)")
        if self.total_days < 1:
            raise ConfigurationError("total_days must be >= 1")
        if not 0.0 < self.low_quality_floor < 1.0:
            raise ConfigurationError("low_quality_floor must lie in (0, 1)")


@dataclass
class ModelConfig:
    """Recommender architecture and daily-training hyperparameters."""

    d_e: int = 16
    d_h: int = 32
    user_buckets: int = 1024
    item_buckets: int = 96
    age_bucket_edges: tuple = (0, 20, 45, 90, 180, 360, 720, 1441)
    epochs: int = 3
    batch_size: int = 256
    lr: float = 0.25
    grad_clip: float = 25.0
    ensemble_heads: int = 10
    ensemble_hidden: int = 16
    ensemble_lr: float = 0.25
    ensemble_epochs: int = 1
    dropout_rate: float = 0.1
    dropout_passes: int = 10

    def validate(self) -> None:
        if min(self.d_e, self.d_h, self.user_buckets, self.item_buckets) <= 0:
            raise ConfigurationError("model dimensions must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if len(self.age_bucket_edges) < 2:
            raise ConfigurationError("age_bucket_edges needs at least two edges")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.ensemble_heads < 1 or self.dropout_passes < 1:
            raise ConfigurationError("ensemble_heads and dropout_passes must be >= 1")


@dataclass
class CriticConfig:
    """Error-regression critic hyperparameters."""

    hidden: int = 48
    lr: float = 0.2
    epochs: int = 6
    batch_size: int = 512

    def validate(self) -> None:
        if self.hidden < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("critic hidden/epochs/batch_size must be >= 1")


@dataclass
class BayesConfig:
    """Beta-head marginal-likelihood training hyperparameters."""

    lr: float = 0.15
    epochs: int = 2
    batch_size: int = 256

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("bayes epochs/batch_size must be >= 1")


@dataclass
class CalibrationConfig:
    q: float = 0.95
    n_min: int = 200
    window_days: int = 3

    def validate(self) -> None:
        if not 0.0 < self.q < 1.0:
            raise ConfigurationError("calibration q must lie in (0, 1)")
        if self.n_min < 1 or self.window_days < 1:
            raise ConfigurationError("n_min and window_days must be >= 1")


POLICY_MODES = ("off", "deboost_lau", "ucb_hau", "segment_aware", "random_score")
ABLATION_VARIANTS = ("unified", "epe_only", "bayes_only", "ensemble",
                     "mcdropout", "random", "off")


@dataclass
class PolicyParams:
    mode: str = "segment_aware"
    deboost: float = 0.6
    explore_weight: float = 2.5
    filter_risky: bool = False

    def validate(self) -> None:
        if self.mode not in POLICY_MODES:
            raise ConfigurationError(f"unknown policy mode: {self.mode!r}")
        if self.mode in ("deboost_lau", "segment_aware", "random_score") and self.deboost <= 0:
            raise ConfigurationError("deboost must be > 0 for deboosting modes")
        if self.mode in ("ucb_hau", "segment_aware", "random_score") and self.explore_weight <= 0:
            raise ConfigurationError("explore_weight must be > 0 for UCB modes")


@dataclass
class ExperimentConfig:
    """One experiment: world, training, calibration, policy, replication."""

    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    bayes: BayesConfig = field(default_factory=BayesConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    policy: PolicyParams = field(default_factory=PolicyParams)

    days: int = 14
    rollout_days: int = 14
    replications: int = 30
    seed: int = 20260810
    cal_fraction: float = 0.2
    explore_epsilon: float = 0.25
    out_dir: str = "runs/default"
    variants: tuple = ("off", "unified", "random")

    def validate(self) -> None:
        self.world.validate()
        self.model.validate()
        self.critic.validate()
        self.bayes.validate()
        self.calibration.validate()
        self.policy.validate()
        if self.days < 2:
            raise ConfigurationError("days must be >= 2 (one pre-training checkpoint is needed)")
        if self.rollout_days < 1:
            raise ConfigurationError("rollout_days must be >= 1")
        if self.replications < 1:
            raise ConfigurationError("replications must be >= 1")
        if not 0.0 < self.cal_fraction < 1.0:
            raise ConfigurationError("cal_fraction must lie in (0, 1)")
        if not 0.0 <= self.explore_epsilon <= 1.0:
            raise ConfigurationError("explore_epsilon must lie in [0, 1]")
        for v in self.variants:
            if v not in ABLATION_VARIANTS:
                raise ConfigurationError(f"unknown ablation variant: {v!r}")
        # Worlds must know the full horizon so stream births cover it.
        horizon = self.days + self.rollout_days
        if self.world.total_days < horizon:
            self.world.total_days = horizon


_SECTIONS = {
    "world": WorldConfig,
    "model": ModelConfig,
    "critic": CriticConfig,
    "bayes": BayesConfig,
    "calibration": CalibrationConfig,
    "policy": PolicyParams,
}


def _parse_scalar(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if "," in text:
        return tuple(_parse_scalar(part) for part in text.split(",") if part.strip())
    return text


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a flat dict of dotted keys."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        out[key.strip()] = _parse_scalar(raw)
    return out


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a flat dotted-key mapping."""
    for key in REQUIRED_KEYS:
        if key not in mapping:
            raise ConfigurationError(f"missing required config key: {key}")

    cfg = ExperimentConfig()
    top_fields = {f.name: f for f in fields(ExperimentConfig)}
    for key, value in mapping.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigurationError(f"unknown config section: {section!r}")
            sub = getattr(cfg, section)
            sub_fields = {f.name for f in fields(sub)}
            if name not in sub_fields:
                raise ConfigurationError(f"unknown config key: {key}")
            if name == "age_bucket_edges" and not isinstance(value, tuple):
                value = (value,)
            setattr(sub, name, value)
        else:
            if key not in top_fields:
                raise ConfigurationError(f"unknown config key: {key}")
            if key == "variants":
                if isinstance(value, str):
                    value = (value,)
                value = tuple(str(v) for v in value)
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return config_from_mapping(parse_config_text(path.read_text()))


def dump_config(cfg: ExperimentConfig) -> str:
    """Render the resolved configuration back into key-value text."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in fields(value):
                v = getattr(value, sub.name)
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{f.name}.{sub.name} = {v}")
        else:
            if isinstance(value, tuple):
                value = ",".join(str(x) for x in value)
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
