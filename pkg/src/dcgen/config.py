"""Flat key=value run configuration.

Files hold one dotted key per line ("stage.finetune.lr = 0.0005"), blank lines
and #-comments allowed. Values are typed by shape: int, then float, then
true/false, else string (optionally quoted). Every key must match the known-key
registry below; a typo'd key is a hard error naming the key rather than a
silently ignored setting. Command-line --set overrides are merged after the
file, last one wins.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fnmatch import fnmatchcase

from .errors import ConfigError

GLOBAL_KEYS = (
    "seed",
    "out_dir",
    "metrics.record_time",
    "data.classes",
    "data.per_class",
    "data.image_size",
    "data.seed",
    "data.kind",
    "space.low.f", "space.low.p", "space.low.c", "space.low.ae_hidden",
    "space.high.f", "space.high.p", "space.high.c", "space.high.ae_hidden",
    "model.hidden", "model.depth", "model.heads", "model.mlp_ratio",
    "sample.steps", "sample.guidance", "sample.count", "sample.use_ema",
    "bench.image_size", "bench.batch", "bench.repeats", "bench.warmup",
)

STAGE_NAMES = (
    "train_ae_low", "train_ae_high", "train_base", "distill",
    "align_embed", "align_head", "finetune",
)

STAGE_FIELDS = (
    "steps", "batch_size", "lr", "warmup_steps", "weight_decay",
    "ema_decay", "seed", "eval_interval", "log_interval",
    "checkpoint_interval", "freeze_check_interval", "cfg_dropout",
    "w_min", "w_max", "lora_rank", "lora_alpha", "lora_targets",
    "alignment_input", "mode", "objective", "mse_target", "val_batch",
)


def _known_key(key: str) -> bool:
    if key in GLOBAL_KEYS:
        return True
    parts = key.split(".")
    if len(parts) == 3 and parts[0] == "stage":
        return parts[1] in STAGE_NAMES and parts[2] in STAGE_FIELDS
    return False


def parse_value(raw: str):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        return raw[1:-1]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    if raw.lower() == "true":
        return True
    if raw.lower() == "false":
        return False
    return raw


class Config:
    """Validated key/value store with dotted keys."""

    def __init__(self, values: dict | None = None):
        self.values = {}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value):
        if not _known_key(key):
            raise ConfigError(f"unknown config key '{key}'")
        self.values[key] = value

    @classmethod
    def from_text(cls, text: str, source: str = "<text>"):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {body!r}")
            key, raw = body.split("=", 1)
            key = key.strip()
            if not _known_key(key):
                raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
            cfg.values[key] = parse_value(raw)
        return cfg

    @classmethod
    def from_file(cls, path: str):
        with open(path) as f:
            return cls.from_text(f.read(), source=path)

    def apply_overrides(self, pairs):
        """Merge "key=value" strings from the command line; they beat the file."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override '{pair}' is not of the form key=value")
            key, raw = pair.split("=", 1)
            self.set(key.strip(), parse_value(raw))
        return self

    def get(self, key: str, default=None):
        if not _known_key(key):
            raise ConfigError(f"unknown config key '{key}'")
        return self.values.get(key, default)

    def require(self, key: str):
        value = self.get(key)
        if value is None:
            raise ConfigError(f"config key '{key}' is required but unset")
        return value

    def matching(self, pattern: str) -> dict:
        return {k: v for k, v in self.values.items() if fnmatchcase(k, pattern)}

    def hash(self) -> str:
        """Stable digest of the full configuration, for resume-drift checks."""
        canon = "\n".join(f"{k}={self.values[k]!r}" for k in sorted(self.values))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def stage(self, name: str) -> "StageConfig":
        return StageConfig.from_config(self, name)


_STAGE_DEFAULTS = dict(
    steps=400,
    batch_size=16,
    lr=1e-3,
    warmup_steps=20,
    weight_decay=0.0,
    ema_decay=0.0,
    eval_interval=50,
    log_interval=10,
    checkpoint_interval=0,
    freeze_check_interval=100,
    cfg_dropout=0.1,
    w_min=1.0,
    w_max=5.0,
    lora_rank=8,
    lora_alpha=8.0,
    lora_targets="trunk.b*.attn.*.weight;trunk.b*.mlp.*.weight",
    alignment_input="clean",
    mode="lora",
    objective="auto",
    mse_target=0.05,
    val_batch=64,
)


@dataclass
class StageConfig:
    name: str
    steps: int = 400
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 20
    weight_decay: float = 0.0
    ema_decay: float = 0.0
    seed: int = 0
    eval_interval: int = 50
    log_interval: int = 10
    checkpoint_interval: int = 0
    freeze_check_interval: int = 100
    cfg_dropout: float = 0.1
    w_min: float = 1.0
    w_max: float = 5.0
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_targets: str = _STAGE_DEFAULTS["lora_targets"]
    alignment_input: str = "clean"
    mode: str = "lora"
    objective: str = "auto"
    mse_target: float = 0.05
    val_batch: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"stage '{self.name}': steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"stage '{self.name}': batch_size must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"stage '{self.name}': ema_decay must lie in [0, 1)")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ConfigError(f"stage '{self.name}': cfg_dropout must lie in [0, 1]")
        if self.w_min > self.w_max:
            raise ConfigError(f"stage '{self.name}': w_min exceeds w_max")
        if self.alignment_input not in ("clean", "mixed"):
            raise ConfigError(f"stage '{self.name}': alignment_input must be clean or mixed")
        if self.mode not in ("lora", "full"):
            raise ConfigError(f"stage '{self.name}': mode must be lora or full")
        if self.objective not in ("auto", "guided", "naive"):
            raise ConfigError(f"stage '{self.name}': objective must be auto, guided, or naive")

    @classmethod
    def from_config(cls, cfg: Config, name: str) -> "StageConfig":
        if name not in STAGE_NAMES:
            raise ConfigError(f"unknown stage '{name}'")
        kwargs = {"name": name}
        for field_name in STAGE_FIELDS:
            if field_name == "seed":
                continue
            value = cfg.get(f"stage.{name}.{field_name}")
            if value is not None:
                kwargs[field_name] = value
        base_seed = cfg.get("seed", 0)
        kwargs["seed"] = cfg.get(f"stage.{name}.seed", base_seed)
        return cls(**kwargs)

    def lora_target_patterns(self) -> tuple:
        return tuple(p for p in self.lora_targets.split(";") if p)
