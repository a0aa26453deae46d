"""Run configuration: one flat record, JSON on disk, ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

STAGES = ("make-data", "kmeans", "pretrain", "finetune", "decode", "bench")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    stage: str = "pretrain"
    seed: int = 0
    workdir: str = "run"

    # synthetic corpus
    num_utts: int = 100
    min_duration: float = 2.0
    max_duration: float = 4.0
    lexicon_size: int = 12
    finetune_utts: int = 10

    # model
    profile: str = "desk"
    frontend_channels: int = 32
    frontend_layout: str = "optimized"

    # targets
    num_units: int = 16
    kmeans_iters: int = 30
    kmeans_max_frames: int = 20000
    label_iteration: int = 1
    feature_layer: int = 3

    # objective
    loss: str = "ce"
    mask_prob: float = 0.08
    mask_span: int = 10
    mask_min: int = 2
    hubert_tau: float = 0.1
    hubert_dim: int = 32

    # optimisation
    steps: int = 200
    grad_accum: int = 1
    base_lr: float = 0.045
    lr_step_warmup: float = 7500.0
    lr_epoch_warmup: float = 3.5
    checkpoint_every: int = 50
    resume: bool = True
    init_checkpoint: str = ""
    freeze_frontend_steps: int = 0
    freeze_backbone_steps: int = 0
    backbone_lr_scale: float = 1.0

    # batching
    max_batch_seconds: float = 12.0
    num_buckets: int = 30
    num_boundary_samples: int = 10000
    buffer_cap: int = 20000

    # decoding
    decode_method: str = "greedy"
    beam: int = 16
    lm_weight: float = 0.5
    length_weight: float = 0.1
    lm_order: int = 3
    decode_manifest: str = ""

    # bench
    bench_frames: list = field(default_factory=lambda: [32, 128, 512])
    bench_repeats: int = 3

    def __post_init__(self):
        validate(self)

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def validate(cfg: RunConfig) -> None:
    if cfg.stage not in STAGES:
        raise ConfigError(f"unknown stage {cfg.stage!r}; expected one of {', '.join(STAGES)}")
    if cfg.loss not in ("ce", "hubert"):
        raise ConfigError(f"loss must be 'ce' or 'hubert', got {cfg.loss!r}")
    if cfg.decode_method not in ("greedy", "beam"):
        raise ConfigError(f"decode_method must be 'greedy' or 'beam', got {cfg.decode_method!r}")
    if cfg.num_units < 2 or cfg.lexicon_size < 2:
        raise ConfigError("num_units and lexicon_size must be >= 2")
    if cfg.min_duration <= 0 or cfg.max_duration < cfg.min_duration:
        raise ConfigError("need 0 < min_duration <= max_duration")
    if cfg.steps < 0 or cfg.grad_accum < 1:
        raise ConfigError("steps must be >= 0 and grad_accum >= 1")
    if cfg.freeze_frontend_steps < 0 or cfg.freeze_backbone_steps < 0:
        raise ConfigError("freeze_*_steps must be >= 0")
    if not cfg.backbone_lr_scale >= 0:
        raise ConfigError("backbone_lr_scale must be >= 0")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    default = _FIELDS[name].default
    if default is dataclasses.MISSING:
        default = _FIELDS[name].default_factory()
    kind = type(default)
    if isinstance(value, str) and kind is not str:
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            raise ConfigError(f"{name}: cannot parse {value!r}") from None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{name}: expected true/false, got {value!r}")
    if not isinstance(value, kind):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {value!r}")
    return value


def from_dict(data: Mapping, env: Mapping[str, str] | None = None) -> RunConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v) for k, v in data.items()}
    env = os.environ if env is None else env
    if "seed" not in values and env.get("ZSSL_SEED"):
        try:
            values["seed"] = int(env["ZSSL_SEED"])
        except ValueError:
            raise ConfigError(f"ZSSL_SEED must be an integer, got {env['ZSSL_SEED']!r}") from None
    return RunConfig(**values)


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not key=value")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        kind = type(_FIELDS[key].default) if _FIELDS[key].default is not dataclasses.MISSING else list
        out[key] = value if kind is str else _coerce(key, value)
    return out


def load(path: str | os.PathLike | None = None, overrides=(), env: Mapping[str, str] | None = None) -> RunConfig:
    data = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data.update(parse_overrides(overrides))
    return from_dict(data, env)


def save(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(cfg.to_json() + "\n", encoding="utf-8")
