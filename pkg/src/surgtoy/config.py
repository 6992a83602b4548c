"""Run configuration: YAML sections mapped onto validated dataclasses.

Every field and its default is listed in ``configs/schema.md``. Unknown keys are
rejected so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .temporal import STRATEGIES


@dataclass
class DataSection:
    clips: int = 64
    eval_clips: int = 32
    frames: int = 64
    height: int = 32
    width: int = 32
    channels: int = 1
    instrument_counts: list[int] = field(default_factory=lambda: [1, 2])
    event_quantum: int = 4
    max_tube_frames: int = 16
    tasks: list[str] = field(default_factory=lambda: ["phase", "triplet", "location", "relation",
                                                      "movement", "duration", "time_spot"])


@dataclass
class MaskingSection:
    r: float = 0.1
    scales: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    tube_size: int = 16
    background_keep_prob: float = 0.0


@dataclass
class EncoderSection:
    volume_t: int = 2
    patch: int = 8
    width: int = 32
    depth: int = 2
    heads: int = 1


@dataclass
class PretrainSection:
    steps: int = 200
    lr: float = 5e-4


@dataclass
class AlignSection:
    steps: int = 200
    lr: float = 1e-5
    weight_decay: float = 0.02
    batch_size: int = 8
    tau_init: float = 0.07
    use_vtm: bool = True
    use_mlm: bool = True


@dataclass
class EnsembleSection:
    lm_width: int = 64
    lm_depth: int = 2
    lm_heads: int = 2
    memory_tokens: int = 8
    qformer_width: int = 32
    shared_qformer: bool = False
    lora_rank: int = 8
    lora_alpha: float = 8.0
    clip_seconds: float = 4.0
    strategy: str = "interleave"


@dataclass
class TuneSection:
    lm_steps: int = 300
    lm_lr: float = 3e-3
    caption_steps: int = 200
    caption_lr: float = 5e-4
    caption_weight_decay: float = 0.05
    task_steps: int = 300
    task_lr: float = 1e-4
    router_steps: int = 1000
    router_lr: float = 0.1
    batch_size: int = 16


@dataclass
class EvalSection:
    max_new_tokens: int = 12


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"
    data: DataSection = field(default_factory=DataSection)
    masking: MaskingSection = field(default_factory=MaskingSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    align: AlignSection = field(default_factory=AlignSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    tune: TuneSection = field(default_factory=TuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        d, m, e, en = self.data, self.masking, self.encoder, self.ensemble
        _check(self.seed >= 0, "seed must be non-negative")
        _check(self.precision in ("float32", "float64"), "precision must be float32 or float64")
        _check(d.clips >= 2 and d.eval_clips >= 1, "need at least 2 training clips and 1 eval clip")
        for name in ("frames", "height", "width", "channels", "event_quantum", "max_tube_frames"):
            _check(getattr(d, name) >= 1, f"data.{name} must be positive")
        _check(d.instrument_counts and all(c in (0, 1, 2) for c in d.instrument_counts),
               "data.instrument_counts entries must be 0, 1 or 2")
        from .synthgen import TASK_KINDS
        _check(d.tasks and all(t in TASK_KINDS for t in d.tasks), f"data.tasks must be drawn from {TASK_KINDS}")
        _check(0.0 <= m.r <= 1.0, "masking.r must lie in [0, 1]")
        _check(0.0 <= m.background_keep_prob <= 1.0, "masking.background_keep_prob must lie in [0, 1]")
        _check(m.scales and all(k >= 1 and d.frames % k == 0 for k in m.scales),
               "masking.scales must be positive divisors of data.frames")
        _check(m.tube_size >= 1 and d.height % m.tube_size == 0 and d.width % m.tube_size == 0,
               "masking.tube_size must divide the frame height and width")
        _check(all(k % e.volume_t == 0 for k in m.scales), "encoder.volume_t must divide every scale")
        _check(m.tube_size % e.patch == 0, "encoder.patch must divide masking.tube_size")
        _check(e.width >= 1 and e.depth >= 1 and e.heads >= 1 and e.width % e.heads == 0,
               "encoder width must be a positive multiple of heads")
        for sec in ("pretrain", "align"):
            s = getattr(self, sec)
            _check(s.steps >= 0 and s.lr > 0, f"{sec}: steps >= 0 and lr > 0 required")
        _check(self.align.batch_size >= 2, "align.batch_size must be at least 2")
        _check(0 <= self.align.weight_decay < 1, "align.weight_decay must lie in [0, 1)")
        _check(0 < self.align.tau_init <= 1, "align.tau_init must lie in (0, 1]")
        _check(en.lm_width % en.lm_heads == 0, "ensemble.lm_width must be a multiple of lm_heads")
        _check(en.memory_tokens >= 1 and en.qformer_width >= 1, "ensemble memory sizes must be positive")
        _check(1 <= en.lora_rank <= min(en.lm_width, 64), "ensemble.lora_rank out of range")
        _check(en.lora_alpha > 0, "ensemble.lora_alpha must be positive")
        _check(en.clip_seconds > 0 and d.frames % en.clip_seconds == 0 and
               float(en.clip_seconds).is_integer() and int(en.clip_seconds) % e.volume_t == 0,
               "ensemble.clip_seconds must divide data.frames and be a multiple of encoder.volume_t")
        _check(en.strategy in STRATEGIES, f"ensemble.strategy must be one of {STRATEGIES}")
        t = self.tune
        for name in ("lm", "caption", "task", "router"):
            _check(getattr(t, f"{name}_steps") >= 0 and getattr(t, f"{name}_lr") > 0,
                   f"tune.{name}: steps >= 0 and lr > 0 required")
        _check(t.batch_size >= 1 and 0 <= t.caption_weight_decay < 1, "tune batch/weight decay out of range")
        _check(1 <= self.eval.max_new_tokens <= 64, "eval.max_new_tokens must lie in [1, 64]")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **sections) -> "RunConfig":
        """Copy with ``section={"field": value}`` overrides (or top-level scalars)."""
        data = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return from_dict(data)


def _check(ok, message):
    if not ok:
        raise ConfigError(message)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}" if where != "config" else name)
        else:
            kwargs[name] = _coerce(value, f.type, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(value, type_name, where):
    t = str(type_name)
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if t == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if t == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if t == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if t.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        inner = t[5:-1]
        return [_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    raise ConfigError(f"{where}: unsupported field type {t}")


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "config").validate()


def load_config(path=None, seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
    cfg = from_dict(data)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg
