"""Run configuration: nested dataclasses loaded from JSON with strict validation."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .model import Dims
from .synthdata import DEFAULT_TARGET, TEMPLATES, PoisonConfig, class_by_name
from .triggers import TriggerSpec, Variant, default_spec

__all__ = [
    "ConfigError",
    "DataConfig",
    "ModelConfig",
    "PretrainConfig",
    "TriggerConfig",
    "PoisonSection",
    "TrainSection",
    "CleanSection",
    "EvalSection",
    "SweepSection",
    "RunConfig",
    "load_config",
    "apply_override",
]

MODES = ("poison", "clean_par", "clean_baseline")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class _Section:
    def to_dict(self, ignore: tuple[str, ...] = ()) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ignore:
                continue
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if isinstance(v, _Section) else (list(v) if isinstance(v, tuple) else v)
        return out


@dataclass
class DataConfig(_Section):
    corpus_dir: Optional[str] = None
    n_train: int = 4000
    n_clean: int = 2000
    n_eval: int = 960
    image_size: int = 32
    seed: int = 0


@dataclass
class ModelConfig(_Section):
    hidden: int = 128
    embed: int = 64
    patch: int = 8
    stride: int = 2
    pool: str = "lse"
    max_len: int = 16
    temperature: str = "learnable"

    def dims(self, image_size: int, vocab_size: int) -> Dims:
        return Dims(image_size=image_size, patch=self.patch, stride=self.stride, pool=self.pool, vocab_size=vocab_size, hidden=self.hidden,
                    embed=self.embed, max_len=self.max_len,
                    learnable_temperature=self.temperature == "learnable")


@dataclass
class PretrainConfig(_Section):
    epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 128
    seed: int = 0
    cache_dir: Optional[str] = None


@dataclass
class TriggerConfig(_Section):
    variant: str = "BadNetStripes"
    patch_size: int = 8
    blend_weight: Optional[float] = None
    triangle_side: int = 14
    text: str = "Watermarked"
    text_height_frac: float = 0.1
    pattern_seed: int = 7

    def spec(self) -> TriggerSpec:
        base = default_spec(self.variant, self.pattern_seed)
        weight = base.blend_weight if self.blend_weight is None else self.blend_weight
        return TriggerSpec(base.variant, patch_size=self.patch_size, blend_weight=weight,
                           triangle_side=self.triangle_side, text=self.text,
                           text_height_frac=self.text_height_frac, pattern_seed=self.pattern_seed)


@dataclass
class PoisonSection(_Section):
    rate: float = 0.005
    target_label: str = DEFAULT_TARGET
    template_ids: list = field(default_factory=lambda: list(range(len(TEMPLATES))))
    seed: int = 1
    trigger: TriggerConfig = field(default_factory=TriggerConfig)

    def to_poison_config(self) -> PoisonConfig:
        return PoisonConfig(rate=self.rate, trigger=self.trigger.spec(), target_label=self.target_label,
                            template_ids=tuple(self.template_ids), seed=self.seed)


@dataclass
class TrainSection(_Section):
    epochs: int = 14
    batch_size: Optional[int] = 64
    schedule: str = "cosine"
    lr: float = 3e-3
    mid_lr: float = 1e-4
    final_lr: float = 1e-6
    weight_decay: float = 1e-4


@dataclass
class CleanSection(_Section):
    poisoned_checkpoint: Optional[str] = None
    epochs: Optional[int] = None
    batch_size: int = 64
    schedule: Optional[str] = None
    lr: Optional[float] = None
    mid_lr: float = 3e-4
    final_lr: float = 1e-7
    mid_frac: float = 0.5
    weight_decay: float = 1e-4
    tau: float = 2.15
    lam: float = 1.0
    noise_std: float = 0.2
    noise_prob: float = 0.5
    cutout_area: list = field(default_factory=lambda: [0.005, 0.01])
    cutout_prob: float = 0.5


@dataclass
class EvalSection(_Section):
    k: int = 5
    seed: int = 11
    n_projection: int = 200


@dataclass
class SweepSection(_Section):
    taus: list = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.15, 2.5, 3.0])
    rates: list = field(default_factory=lambda: [0.0005, 0.00125, 0.0025, 0.005])
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class RunConfig(_Section):
    mode: str = "poison"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    poison: PoisonSection = field(default_factory=PoisonSection)
    train: TrainSection = field(default_factory=TrainSection)
    clean: CleanSection = field(default_factory=CleanSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def clean_settings(self) -> CleanSection:
        """Cleaning section with the mode-dependent defaults filled in.

        ``None`` fields stay ``None`` on the config itself so one file can
        drive both the PAR and the baseline cleaner.
        """
        c = self.clean
        par = self.mode != "clean_baseline"
        return dataclasses.replace(
            c,
            epochs=c.epochs if c.epochs is not None else (10 if par else 5),
            schedule=c.schedule if c.schedule is not None else ("par_custom" if par else "cosine"),
            lr=c.lr if c.lr is not None else (3e-3 if par else 2e-3),
        )

    def validate(self) -> "RunConfig":
        _check(self.mode in MODES, "mode", f"must be one of {MODES}")
        _check(self.model.temperature in ("learnable", "fixed"), "model.temperature", "must be learnable or fixed")
        _check(self.model.pool in ("mean", "max", "lse"), "model.pool", "must be mean, max or lse")
        _check(1 <= self.model.stride <= self.model.patch, "model.stride", "must lie in [1, model.patch]")
        _check(self.data.image_size >= 16, "data.image_size", "must be >= 16")
        _check(self.data.image_size % self.model.patch == 0, "model.patch", "must divide data.image_size")
        _check(0.0 <= self.poison.rate <= 1.0, "poison.rate", "must lie in [0, 1]")
        try:
            class_by_name(self.poison.target_label)
        except KeyError:
            raise ConfigError("poison.target_label", f"unknown class {self.poison.target_label!r}") from None
        try:
            Variant(self.poison.trigger.variant)
        except ValueError:
            raise ConfigError("poison.trigger.variant", f"unknown variant {self.poison.trigger.variant!r}") from None
        for sec in (self.train, self.clean_settings()):
            sched = sec.schedule
            name = "train" if sec is self.train else "clean"
            _check(sched in ("par_custom", "cosine", "constant"), f"{name}.schedule", f"unknown schedule {sched!r}")
        _check(0.0 < self.clean.tau < 4.0, "clean.tau", "must lie in (0, 4)")
        _check(self.clean.lam >= 0.0, "clean.lam", "must be >= 0")
        _check(self.eval.k >= 1, "eval.k", "must be >= 1")
        return self


def _check(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _from_dict(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    return value


def _from_dict(cls, data: dict, path: str = ""):
    prefix = f"{path}." if path else ""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}{k}") for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data).validate()


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for item in overrides:
        apply_override(data, item)
    return from_dict(data)


def apply_override(data: dict, item: str) -> None:
    """Apply ``dotted.key=value`` to a raw config dict; value parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, f"{p} is not a section")
    node[parts[-1]] = value
