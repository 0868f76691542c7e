"""Run configuration: one JSON file holding every tunable, validated strictly."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

from .model import AnchorConfig, ModelConfig
from .objectives import LossConfig
from .synthgen import DEFAULT_LANGUAGES, SplitSpec, check_style_splits, default_style_splits
from .training import Ablation, SamplerConfig, StageConfig

OUTPUT_ENV = "ANCHORRET_OUTPUT"


class ConfigError(ValueError):
    pass


@dataclass
class LexiconSection:
    num_classes: int = 20
    languages: list[str] = field(default_factory=lambda: list(DEFAULT_LANGUAGES))
    seed: int = 0


@dataclass
class SplitSection:
    styles: list[int]
    per_class_per_lang: int
    distortion: float = 1.0


def _default_splits() -> dict[str, SplitSection]:
    return {k: SplitSection(list(v.styles), v.per_class_per_lang, v.distortion)
            for k, v in default_style_splits().items()}


@dataclass
class DataSection:
    seed: int = 0
    canvas: list[int] = field(default_factory=lambda: [24, 72])
    splits: dict[str, SplitSection] = field(default_factory=_default_splits)


@dataclass
class ModelSection:
    base_dim: int = 64
    embed_dim: int = 32
    language_offset: float = 0.05
    anchor_seed: int = 1234
    hidden: int = 64
    pool: int = 4
    tau_init: float = 0.07
    init_seed: int = 0


@dataclass
class LossSection:
    lam: float = 0.5
    eps: float = 1e-8


@dataclass
class SamplerSection:
    batch_size: int | None = None
    min_instances_per_class: int = 2
    language_balance: bool = True
    seed: int = 0


@dataclass
class StageSection:
    lr: float
    epochs: int = 20
    split: str = "train"
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AblationSection:
    v2t: bool = True
    t2v: bool = True
    inv: bool = True
    finetune: bool = True


@dataclass
class EvalSection:
    split: str = "ood_eval"
    k: int = 5
    calibration_size: int = 64
    ablation_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    lexicon: LexiconSection = field(default_factory=LexiconSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    pretrain: StageSection = field(default_factory=lambda: StageSection(lr=1e-2, split="train"))
    finetune: StageSection = field(default_factory=lambda: StageSection(lr=1e-3, split="finetune"))
    ablation: AblationSection = field(default_factory=AblationSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs"

    # -- conversions to the module-level config objects

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(anchor=AnchorConfig(m.base_dim, m.embed_dim, m.language_offset, m.anchor_seed),
                           canvas=tuple(self.data.canvas), pool=m.pool, hidden=m.hidden, tau_init=m.tau_init)

    def split_specs(self) -> dict[str, SplitSpec]:
        return {k: SplitSpec(tuple(v.styles), v.per_class_per_lang, v.distortion)
                for k, v in self.data.splits.items()}

    def stage_config(self, which: str) -> StageConfig:
        s = self.pretrain if which == "pretrain" else self.finetune
        return StageConfig(stage=which, lr=s.lr, epochs=s.epochs, split=s.split,
                           loss=LossConfig(lam=self.loss.lam, eps=self.loss.eps),
                           betas=tuple(s.betas), eps=s.eps, weight_decay=s.weight_decay)

    def sampler_config(self) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(s.batch_size, s.min_instances_per_class, s.language_balance, s.seed)

    def ablation_flags(self) -> Ablation:
        a = self.ablation
        return Ablation(a.v2t, a.t2v, a.inv, a.finetune)

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def validate(self) -> None:
        if self.lexicon.num_classes < 2:
            raise ConfigError("lexicon.num_classes must be at least 2")
        if len(set(self.lexicon.languages)) != len(self.lexicon.languages):
            raise ConfigError("lexicon.languages has duplicates")
        try:
            check_style_splits(self.split_specs())
            self.model_config().pooled_dim
            self.stage_config("pretrain")
            self.stage_config("finetune")
            self.ablation_flags().loss_config(self.loss.lam, self.loss.eps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("pretrain", "finetune"):
            split = getattr(self, name).split
            if split not in self.data.splits:
                raise ConfigError(f"{name}.split {split!r} is not a configured data split")
        if self.eval.split not in self.data.splits:
            raise ConfigError(f"eval.split {self.eval.split!r} is not a configured data split")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        path = f"{where}.{f.name}" if where else f.name
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, path)
        elif f.name == "splits":
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            kwargs[f.name] = {k: _build(SplitSection, v, f"{path}.{k}") for k, v in value.items()}
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _check_keys(cls, data: Any, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = get_type_hints(cls)
    unknown = sorted(set(data) - set(hints))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    for k, v in data.items():
        path = f"{where}.{k}" if where else k
        if dataclasses.is_dataclass(hints[k]):
            _check_keys(hints[k], v, path)
        elif k == "splits":
            if not isinstance(v, dict):
                raise ConfigError(f"{path}: expected an object")
            for name, sub in v.items():
                _check_keys(SplitSection, sub, f"{path}.{name}")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(data: dict) -> RunConfig:
    """Overlay ``data`` on the defaults; unknown keys anywhere are an error."""
    _check_keys(RunConfig, data, "")
    cfg = _build(RunConfig, _merge(RunConfig().to_json(), data), "")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def defaults_json() -> str:
    return json.dumps(RunConfig().to_json(), indent=2, sort_keys=True) + "\n"
