"""Run configuration: JSON document with strict schema validation.

Sections mirror the package layout (backbones, cp_adapter, pcmrd, training,
data, eval). Every key has a default; unknown keys are rejected before any
work starts so config typos fail fast.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class BackboneConfig:
    """Frozen encoder stack: text encoder, latent downsampler, pyramid extractor."""

    vocab_size: int = 64
    text_dim: int = 64          # width of the token feature rows
    max_tokens: int = 20        # padded token sequence length
    text_depth: int = 2
    text_heads: int = 4
    latent_channels: int = 32
    downsample_factor: int = 8  # image -> latent spatial reduction
    base_channels: int = 32     # width of the pyramid extractor trunk
    pyramid_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    attn_dim: int = 32          # text cross-attention width inside the extractor
    frozen: bool = True
    seed: int = 0               # parameter init seed for the whole model


@dataclass
class AdapterConfig:
    """Context perception adapter over the token features."""

    depth: int = 2
    heads: int = 4
    rank: int = 8               # rank of the low-rank domain adjustment
    hidden_dim: int = 64        # width of the enhancement projection block
    enable_context: bool = True
    enable_object_reasoning: bool = True
    enable_domain_adjust: bool = True


@dataclass
class DecoderConfig:
    """Progressive query decoder over the feature pyramid."""

    num_queries: int = 8
    query_dim: int = 64
    fused_channels: int = 64
    oaqil_per_stage: int = 1
    tau_init: float = 1.0
    mlp_hidden: int = 64
    use_hard_assignment: bool = True       # straight-through one-hot vs soft matching
    use_refined_text_in_decoder: bool = True


@dataclass
class TrainingConfig:
    lr: float = 3e-5
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 40
    seed: int = 0
    loss_weights: dict[str, float] = field(default_factory=lambda: {"bce": 1.0, "dice": 1.0})
    freeze_backbones: bool = True
    grad_clip: float | None = None        # off by default
    lr_schedule: str | None = None        # off by default; "cosine" supported
    eval_train_split: bool = False        # also report metrics on the train split

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"training.lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"training.batch_size must be >= 1, got {self.batch_size}")


@dataclass
class DataConfig:
    canvas: int = 64            # square canvas edge; must be divisible by 32
    num_samples: int = 128
    train_fraction: float = 0.8
    max_objects: int = 4
    hard_negative_prob: float = 0.5
    seed: int = 0


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    overlay: bool = False


_SECTIONS = {
    "backbones": BackboneConfig,
    "cp_adapter": AdapterConfig,
    "pcmrd": DecoderConfig,
    "training": TrainingConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    backbones: BackboneConfig = field(default_factory=BackboneConfig)
    cp_adapter: AdapterConfig = field(default_factory=AdapterConfig)
    pcmrd: DecoderConfig = field(default_factory=DecoderConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        def _plain(obj):
            if isinstance(obj, tuple):
                return list(obj)
            raise TypeError(type(obj))

        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_plain)


def _coerce(section: str, key: str, value: Any, target_type) -> Any:
    """Validate `value` against the dataclass field type, with gentle coercion."""
    if target_type in (float, "float | None", float | None):
        if value is None and target_type is not float:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected a boolean, got {value!r}")
        return value
    if target_type in (str | None,):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{section}.{key}: expected a string or null, got {value!r}")
        return value
    if target_type in (tuple[int, int, int, int], tuple[float, ...]):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key}: expected a list, got {value!r}")
        return tuple(value)
    if target_type == dict[str, float]:
        if not isinstance(value, dict):
            raise ConfigError(f"{section}.{key}: expected an object, got {value!r}")
        return {str(k): float(v) for k, v in value.items()}
    return value


def from_dict(doc: dict) -> RunConfig:
    """Build a validated RunConfig; unknown sections or keys raise ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        block = doc.get(name, {})
        if not isinstance(block, dict):
            raise ConfigError(f"section {name!r} must be an object")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        bad = set(block) - set(fields)
        if bad:
            raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(bad)}")
        kwargs = {
            key: _coerce(name, key, value, fields[key].type)
            for key, value in block.items()
        }
        try:
            sections[name] = cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid section {name!r}: {exc}") from exc
    return RunConfig(**sections)


def load(path) -> RunConfig:
    """Load and validate a JSON run config from disk."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return from_dict(doc)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` strings (CLI flags) on top of a config."""
    doc = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = parts
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings allowed, e.g. lr_schedule=cosine
        doc.setdefault(section, {})[key] = value
    return from_dict(doc)
