"""Run configuration: one JSON document with a section per module.

Unknown keys and ill-typed values raise :class:`ConfigError` carrying the
dotted key path. Module seeds are derived from the global seed with
:func:`geomask.seeding.derive_seed` so one number reproduces a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .errors import ConfigError
from .masking import MaskingConfig
from .pretrain import PretrainConfig
from .seeding import derive_seed

FORMAT_VERSION = 1


@dataclass
class DataSection:
    n_samples: int = 64
    size: int = 64
    val_fraction: float = 0.15
    cloud_probability: float = 0.3
    caption_max_len: int = 24


@dataclass
class TokenizerSection:
    levels: List[int] = field(default_factory=lambda: [8, 8, 8, 6, 5])
    categorical_levels: List[int] = field(default_factory=lambda: [8, 8, 8, 8])
    quantizer: str = "fsq"
    unit_sphere_normalize: bool = False
    ema_decay: float = 0.99
    enc_dim: int = 64
    enc_depth: int = 1
    dec_dim: int = 64
    dec_blocks: int = 2
    epochs: int = 4
    batch_size: int = 16
    lr: float = 1e-3
    grad_clip: float = 1.0
    hflip: bool = True
    val_steps: int = 4


@dataclass
class BackboneSection:
    dim: int = 256
    depth_encoder: int = 4
    depth_decoder: int = 4
    heads: int = 8
    mlp_ratio: float = 4.0


@dataclass
class MaskingSection:
    input_budget: int = 24
    target_budget: int = 24
    alpha_input: float = 0.25
    alpha_target: float = 0.25


@dataclass
class PretrainSection:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 5e-4
    min_lr_ratio: float = 0.1
    warmup_steps: int = 50
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    val_every: int = 100
    val_samples: int = 64
    checkpoint_every: int = 0


@dataclass
class GenerationSection:
    inputs: List[str] = field(default_factory=lambda: ["optical", "radar"])
    targets: List[str] = field(default_factory=lambda: ["lulc", "ndvi", "dem", "geolocation", "caption"])
    chain: bool = True
    temperature: float = 0.0
    decode_steps: Optional[int] = None
    diffusion_steps: int = 10
    n_samples: int = 8


@dataclass
class TimSection:
    task: str = "water"
    inputs: List[str] = field(default_factory=lambda: ["optical", "radar"])
    tim_modalities: List[str] = field(default_factory=lambda: ["lulc"])
    k: Optional[int] = None
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-3
    freeze_backbone: bool = True
    merge: str = "mean"


@dataclass
class EvalSection:
    n_way: int = 3
    k_shot: int = 1
    episodes: int = 200
    geoloc_draws: int = 500
    geoloc_temperature: float = 1.0
    recon_samples: int = 32
    diffusion_steps: int = 10


SECTIONS = {
    "data": DataSection,
    "tokenizers": TokenizerSection,
    "masking": MaskingSection,
    "backbone": BackboneSection,
    "pretrain": PretrainSection,
    "generation": GenerationSection,
    "tim": TimSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    tokenizers: TokenizerSection = field(default_factory=TokenizerSection)
    masking: MaskingSection = field(default_factory=MaskingSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    tim: TimSection = field(default_factory=TimSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    output_dir: Optional[str] = None
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def module_seed(self, *names) -> int:
        """Per-module seed (fits in 31 bits for torch/numpy seeding)."""
        return derive_seed(self.seed, *names) % (2**31)

    def masking_config(self) -> MaskingConfig:
        m = self.masking
        return MaskingConfig(m.input_budget, m.target_budget, m.alpha_input, m.alpha_target)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(seed=self.module_seed("pretrain"), **dataclasses.asdict(self.pretrain))


def _check_value(path: str, value: Any, annotation, default: Any):
    hint = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if hint is typing.Union and type(None) in args:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _check_value(path, value, inner, default)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if hint in (list, List):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        (item,) = args or (Any,)
        return [_check_value(f"{path}[{i}]", v, item, None) for i, v in enumerate(value)]
    return value


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        path = f"{prefix}.{f.name}" if prefix else f.name
        if f.name in SECTIONS and cls is RunConfig:
            kwargs[f.name] = _build(SECTIONS[f.name], raw[f.name], path)
        else:
            kwargs[f.name] = _check_value(path, raw[f.name], hints[f.name], None)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    if cfg.format_version != FORMAT_VERSION:
        raise ConfigError("format_version", f"unsupported version {cfg.format_version}")
    if cfg.tim.merge not in ("mean", "concat"):
        raise ConfigError("tim.merge", f"expected 'mean' or 'concat', got {cfg.tim.merge!r}")
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return config_from_dict(raw)


def write_resolved(cfg: RunConfig, directory, extra: Optional[dict] = None) -> Path:
    """Write ``resolved_config.json`` (config + seed + hash) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    doc["config_hash"] = cfg.hash()
    if extra:
        doc["invocation"] = extra
    path = directory / "resolved_config.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_resolved(path) -> RunConfig:
    raw = json.loads(Path(path).read_text())
    raw.pop("config_hash", None)
    raw.pop("invocation", None)
    return config_from_dict(raw)
