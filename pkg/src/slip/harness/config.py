"""Experiment configuration: a YAML tree mapped onto frozen dataclasses.

Unknown keys are rejected with the dotted path of the offending field, so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from ..encoders import MODEL_PRESETS, ModelConfig, TextConfig, VitConfig
from ..errors import ConfigError
from ..objectives import SlipLossConfig
from ..train.schedule import OptimConfig

MODES = ("slip", "clip", "simclr", "decoupled", "ssl_then_clip")
EVAL_SETTINGS = ("zeroshot", "probe", "finetune")


@dataclass(frozen=True)
class ModelSection:
    preset: str = "nano"
    vision: dict = field(default_factory=dict)  # field overrides on the preset
    text: dict = field(default_factory=dict)
    clip_dim: Optional[int] = None
    ssl_hidden: Optional[int] = None
    ssl_dim: Optional[int] = None

    def resolve(self, vocab_size: Optional[int] = None) -> ModelConfig:
        if self.preset not in MODEL_PRESETS:
            raise ConfigError(f"model.preset: unknown preset {self.preset!r}; available: {sorted(MODEL_PRESETS)}")
        base = MODEL_PRESETS[self.preset]
        try:
            vision = dataclasses.replace(base.vision, **self.vision)
            text = dataclasses.replace(base.text, **self.text)
        except TypeError as exc:
            raise ConfigError(f"model: bad override ({exc})") from exc
        if vocab_size is not None:
            text = dataclasses.replace(text, vocab_size=vocab_size)
        extra = {k: getattr(self, k) for k in ("clip_dim", "ssl_hidden", "ssl_dim") if getattr(self, k) is not None}
        return dataclasses.replace(base, vision=vision, text=text, **extra)


@dataclass(frozen=True)
class DataSection:
    manifest: str = "data/manifest.jsonl"
    ssl_manifest: Optional[str] = None
    vocab: Optional[str] = None  # trained on the manifest captions when absent
    vocab_size: int = 512
    clip_augment: str = "global_crop"


@dataclass(frozen=True)
class ProbeSection:
    epochs: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    standardize: bool = True


@dataclass(frozen=True)
class FinetuneSection:
    epochs: int = 20
    base_lr: float = 1e-3
    layer_decay: float = 0.65
    weight_decay: float = 0.05
    batch_size: int = 32
    warmup_epochs: float = 1.0


@dataclass(frozen=True)
class EvalSection:
    manifest: Optional[str] = None  # labeled held-out split
    class_names: Optional[str] = None
    templates: Optional[str] = None
    settings: tuple = ("zeroshot", "probe")
    monitor_every: int = 0  # 0 disables the in-training zero-shot monitor
    probe: ProbeSection = field(default_factory=ProbeSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "slip"
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 100
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: SlipLossConfig = field(default_factory=SlipLossConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.mode == "decoupled" and not self.data.ssl_manifest:
            raise ConfigError("data.ssl_manifest: required in decoupled mode")
        for s in self.eval.settings:
            if s not in EVAL_SETTINGS:
                raise ConfigError(f"eval.settings: unknown setting {s!r}; available: {EVAL_SETTINGS}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"]["settings"] = list(d["eval"]["settings"])
        return d

    def fingerprint(self) -> str:
        """Hash of everything that affects training (output location excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("checkpoint_every")
        d.pop("eval")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key (allowed: {', '.join(sorted(known))})")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = _SECTIONS.get((cls, name))
        where = f"{path}.{name}" if path else name
        if sub is not None:
            kwargs[name] = _build(sub, value or {}, where)
        elif name == "settings":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}" if path else str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_SECTIONS = {
    (ExperimentConfig, "model"): ModelSection,
    (ExperimentConfig, "optim"): OptimConfig,
    (ExperimentConfig, "loss"): SlipLossConfig,
    (ExperimentConfig, "data"): DataSection,
    (ExperimentConfig, "eval"): EvalSection,
    (EvalSection, "probe"): ProbeSection,
    (EvalSection, "finetune"): FinetuneSection,
}


def config_from_dict(d: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, d, "")


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}") from exc
    return config_from_dict(raw or {})


def dump_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
