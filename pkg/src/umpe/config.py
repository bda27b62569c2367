"""Flat, typed run configuration.

A config file is a single JSON object whose keys are the fields of
:class:`TrainConfig`; omitted keys take their defaults and unknown keys are
rejected. ``umpe <cmd> --print-config`` shows the effective values.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    data_dir: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    # curriculum
    stage1_epochs: int = 20
    stage2_epochs: int = 10
    lr_prior: float = 4e-4
    lr_bev_decoder: float = 1e-4
    stage2_lr_factor: float = 0.25
    weight_decay: float = 1e-4
    batch_size: int = 16
    grad_clip: float = 5.0
    max_steps_per_epoch: int = 0  # 0 = full epoch
    # priors
    source_dropout: float = 0.3
    dropout_in_stage2: bool = True
    use_vector: bool = True
    use_raster: bool = True
    fusion_order: str = "vr"
    alpha_stage1: float = 0.2
    alpha_stage2: float = 0.6
    alpha_stage2_mode: str = "step"
    learnable_alpha: bool = False
    # loss
    lambda_t: float = 0.1
    lambda_r: float = 1.0
    pos_weight: float = 2.0
    vector_head: bool = False
    vector_weight: float = 1.0
    matching: str = "greedy"
    # model
    width: int = 32
    num_layers: int = 6
    num_heads: int = 4
    vector_residual: bool = True
    query_pos: str = "sinusoid"
    share_kv: bool = False
    per_source_film: bool = False
    gate_mode: str = "feature"
    raster_align: bool = True
    resnet18: bool = False
    double: bool = False

    def __post_init__(self):
        if self.fusion_order not in ("vr", "rv"):
            raise ConfigError(f"fusion_order must be vr or rv, not {self.fusion_order!r}")
        if self.gate_mode not in ("feature", "condition"):
            raise ConfigError(f"gate_mode must be feature or condition, not {self.gate_mode!r}")
        if self.alpha_stage2_mode not in ("step", "linear"):
            raise ConfigError("alpha_stage2_mode must be step or linear")
        if self.query_pos not in ("sinusoid", "learned"):
            raise ConfigError("query_pos must be sinusoid or learned")
        if self.matching not in ("greedy", "hungarian"):
            raise ConfigError("matching must be greedy or hungarian")
        if not 0.0 <= self.source_dropout <= 1.0:
            raise ConfigError("source_dropout must lie in [0, 1]")
        if self.lr_prior <= self.lr_bev_decoder:
            raise ConfigError("lr_prior must exceed lr_bev_decoder in stage 1")
        if not 0.0 < self.stage2_lr_factor < 1.0:
            raise ConfigError("stage2_lr_factor must lie in (0, 1)")
        if self.stage1_epochs < 1 or self.stage2_epochs < 0:
            raise ConfigError("stage lengths must be positive")

    @property
    def epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        # where a run writes is not part of what it is
        d = self.to_dict()
        d.pop("out_dir")
        return config_hash(d)


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def from_dict(d: dict, base: TrainConfig | None = None) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    unknown = sorted(set(d) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = (base or TrainConfig()).to_dict()
    for k, v in d.items():
        want = type(merged[k])
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, want) or (want is int and isinstance(v, bool)):
            raise ConfigError(f"{k}: expected {want.__name__}, got {type(v).__name__}")
        merged[k] = v
    return TrainConfig(**merged)


def load_config(path: str | Path | None, overrides: dict | None = None) -> TrainConfig:
    d = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: expected a JSON object")
    d.update(overrides or {})
    return from_dict(d)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
