"""Configuration records for every component.

Each section exposes ``problems()`` returning human-readable constraint
violations; :meth:`RunConfig.validate` gathers them all before anything is
allocated.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class BaseConfig:
    vocab_size: int = 16
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 64
    max_seq: int = 32
    n_classes: int = 0
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def problems(self, prefix: str = "base") -> list[str]:
        out = []
        if self.vocab_size < 2:
            out.append(f"{prefix}.vocab_size must be >= 2 (got {self.vocab_size})")
        if self.n_layers < 2:
            out.append(f"{prefix}.n_layers must be >= 2 so layer 0 stays adapter-free (got {self.n_layers})")
        if self.n_heads < 1 or self.d_model % max(self.n_heads, 1):
            out.append(f"{prefix}.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.d_ff < 1 or self.max_seq < 1:
            out.append(f"{prefix}.d_ff and {prefix}.max_seq must be positive")
        if self.n_classes < 0 or self.n_classes == 1:
            out.append(f"{prefix}.n_classes must be 0 (no classifier) or >= 2 (got {self.n_classes})")
        if self.ln_eps <= 0:
            out.append(f"{prefix}.ln_eps must be > 0")
        if self.init_std <= 0:
            out.append(f"{prefix}.init_std must be > 0")
        return out


@dataclass(frozen=True)
class ShadowConfig:
    n_layers: int = 1
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    mode: str = "implicit"
    init_std: float = 0.02

    def problems(self, base: Optional[BaseConfig] = None, prefix: str = "shadow") -> list[str]:
        out = []
        if self.mode not in ("implicit", "explicit"):
            out.append(f"{prefix}.mode must be 'implicit' or 'explicit' (got {self.mode!r})")
        if self.n_layers < 1:
            out.append(f"{prefix}.n_layers must be >= 1")
        if self.d_model < 1:
            out.append(f"{prefix}.d_model must be >= 1")
        if self.n_heads < 1 or self.d_model % max(self.n_heads, 1):
            out.append(f"{prefix}.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.d_ff < 1:
            out.append(f"{prefix}.d_ff must be >= 1")
        if base is not None and self.mode == "implicit" and self.n_layers >= base.n_layers:
            out.append(
                f"{prefix}.n_layers ({self.n_layers}) must be smaller than base.n_layers ({base.n_layers}) for an implicit shadow"
            )
        return out


def derive_implicit_config(base: BaseConfig, layer_fraction: float, width_fraction: float) -> ShadowConfig:
    """Shrink the base configuration into an implicit shadow configuration."""
    for name, f in (("layer_fraction", layer_fraction), ("width_fraction", width_fraction)):
        if not 0.0 < f <= 1.0:
            raise ConfigError([f"{name} must lie in (0, 1] (got {f})"])
    n_layers = max(1, _round_half_up(layer_fraction * base.n_layers))
    n_heads = max(1, _round_half_up(width_fraction * base.n_heads))
    d_model = max(n_heads, _round_half_up(width_fraction * base.d_model / n_heads) * n_heads)
    d_ff = max(1, _round_half_up(width_fraction * base.d_ff))
    cfg = ShadowConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, d_ff=d_ff, mode="implicit",
                       init_std=base.init_std)
    errs = cfg.problems(base)
    if errs:
        raise ConfigError(errs)
    return cfg


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 4
    alpha: float = 1.0
    init_std: float = 0.02
    inject_dropout: float = 0.05
    gate_hidden: int = 0  # 0 means d_model // 2
    update_dropout: float = 0.05
    update_layernorm: bool = True
    update_enabled: bool = True
    shadow_lm_loss_state: str = "initial"
    pooling: str = "last"

    def gate_width(self, d_model: int) -> int:
        return self.gate_hidden or max(1, d_model // 2)

    def problems(self, base: Optional[BaseConfig] = None, prefix: str = "adapter") -> list[str]:
        out = []
        if self.rank < 1:
            out.append(f"{prefix}.rank must be >= 1")
        if base is not None and self.rank >= base.d_model:
            out.append(f"{prefix}.rank ({self.rank}) must be smaller than base.d_model ({base.d_model})")
        if not self.alpha > 0:
            out.append(f"{prefix}.alpha must be > 0: injection strength is a positive residual scale (got {self.alpha})")
        if self.init_std <= 0:
            out.append(f"{prefix}.init_std must be > 0")
        for name in ("inject_dropout", "update_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                out.append(f"{prefix}.{name} must lie in [0, 1) (got {p})")
        if self.gate_hidden < 0:
            out.append(f"{prefix}.gate_hidden must be >= 0")
        if self.shadow_lm_loss_state not in ("initial", "final"):
            out.append(f"{prefix}.shadow_lm_loss_state must be 'initial' or 'final'")
        if self.pooling not in ("last", "mean"):
            out.append(f"{prefix}.pooling must be 'last' or 'mean'")
        return out


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 32
    alpha: float = 32.0
    dropout: float = 0.05
    init_std: float = 0.02
    match_budget: bool = True

    def problems(self, prefix: str = "lora") -> list[str]:
        out = []
        if self.rank < 1:
            out.append(f"{prefix}.rank must be >= 1")
        if self.alpha <= 0:
            out.append(f"{prefix}.alpha must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            out.append(f"{prefix}.dropout must lie in [0, 1)")
        return out


@dataclass(frozen=True)
class TrainConfig:
    shadow_loss_weight: float = 0.05
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 1500
    batch_size: int = 32
    eval_interval: int = 250
    base_pretrain_steps: int = 500
    base_lr: float = 3e-3
    f32: bool = False

    def problems(self, prefix: str = "train") -> list[str]:
        out = []
        if self.shadow_loss_weight < 0:
            out.append(f"{prefix}.shadow_loss_weight must be >= 0")
        if self.lr <= 0 or self.base_lr <= 0:
            out.append(f"{prefix}.lr and {prefix}.base_lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append(f"{prefix}.beta1/beta2 must lie in [0, 1)")
        if self.weight_decay < 0:
            out.append(f"{prefix}.weight_decay must be >= 0")
        if self.steps < 0 or self.base_pretrain_steps < 0:
            out.append(f"{prefix}.steps and {prefix}.base_pretrain_steps must be >= 0")
        if self.batch_size < 1:
            out.append(f"{prefix}.batch_size must be >= 1")
        if self.eval_interval < 1:
            out.append(f"{prefix}.eval_interval must be >= 1")
        return out


@dataclass(frozen=True)
class TaskConfig:
    name: str = "copy_lm"
    vocab_size: int = 16
    seq_len: int = 32
    modulus: int = 13
    train_size: int = 4096
    eval_size: int = 512

    def problems(self, prefix: str = "task") -> list[str]:
        out = []
        if self.name not in ("copy_lm", "modadd_lm", "parity_cls"):
            out.append(f"{prefix}.name must be one of copy_lm, modadd_lm, parity_cls (got {self.name!r})")
        if self.seq_len < 2:
            out.append(f"{prefix}.seq_len must be >= 2")
        if self.name == "copy_lm" and self.seq_len % 2:
            out.append(f"{prefix}.seq_len must be even for copy_lm")
        if self.name == "modadd_lm" and self.vocab_size < self.modulus + 2:
            out.append(f"{prefix}.vocab_size must be >= modulus + 2 for modadd_lm")
        if self.name == "parity_cls" and self.vocab_size < 4:
            out.append(f"{prefix}.vocab_size must be >= 4 for parity_cls")
        if self.train_size < 1 or self.eval_size < 1:
            out.append(f"{prefix}.train_size and {prefix}.eval_size must be >= 1")
        return out


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    method: str = "shadow"
    inference_mode: str = "attached"
    base: BaseConfig = field(default_factory=BaseConfig)
    shadow: ShadowConfig = field(default_factory=ShadowConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    def problems(self) -> list[str]:
        out = []
        if self.method not in ("shadow", "lora"):
            out.append(f"method must be 'shadow' or 'lora' (got {self.method!r})")
        if self.inference_mode not in ("attached", "detached"):
            out.append(f"inference_mode must be 'attached' or 'detached' (got {self.inference_mode!r})")
        out += self.base.problems()
        out += self.shadow.problems(self.base)
        out += self.adapter.problems(self.base)
        out += self.lora.problems()
        out += self.train.problems()
        out += self.task.problems()
        if self.task.vocab_size != self.base.vocab_size:
            out.append(f"task.vocab_size ({self.task.vocab_size}) must equal base.vocab_size ({self.base.vocab_size})")
        want_cls = 2 if self.task.name == "parity_cls" else 0
        if self.base.n_classes != want_cls:
            out.append(f"base.n_classes must be {want_cls} for task {self.task.name}")
        if self.task.seq_len > self.base.max_seq:
            out.append(f"task.seq_len ({self.task.seq_len}) exceeds base.max_seq ({self.base.max_seq})")
        return out

    def validate(self) -> "RunConfig":
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Build from nested dicts, rejecting unknown keys."""
        sections = {
            "base": BaseConfig, "shadow": ShadowConfig, "adapter": AdapterConfig,
            "lora": LoraConfig, "train": TrainConfig, "task": TaskConfig,
        }
        top = {f.name for f in dataclasses.fields(cls)}
        errs, kwargs = [], {}
        for key, val in data.items():
            if key not in top:
                errs.append(f"unknown key {key!r}")
            elif key in sections:
                if not isinstance(val, dict):
                    errs.append(f"{key} must be a section")
                    continue
                known = {f.name: f for f in dataclasses.fields(sections[key])}
                sub = {}
                for k, v in val.items():
                    if k not in known:
                        errs.append(f"unknown key '{key}.{k}'")
                    else:
                        sub[k] = _coerce(v, known[k].type, f"{key}.{k}", errs)
                kwargs[key] = sections[key](**sub)
            else:
                kwargs[key] = _coerce(val, next(f.type for f in dataclasses.fields(cls) if f.name == key), key, errs)
        if errs:
            raise ConfigError(errs)
        return cls(**kwargs)


def _coerce(value, type_name, key, errs):
    t = str(type_name)
    if t == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
    elif t == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif t == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif t == "str":
        return str(value)
    errs.append(f"{key}: cannot interpret {value!r} as {t}")
    return value


def default_config(task: str = "copy_lm") -> RunConfig:
    """The desk-scale defaults for each synthetic task."""
    if task == "copy_lm":
        return RunConfig()
    if task == "modadd_lm":
        return RunConfig(task=TaskConfig(name="modadd_lm", seq_len=5))
    if task == "parity_cls":
        return RunConfig(base=BaseConfig(n_classes=2), task=TaskConfig(name="parity_cls", seq_len=8))
    raise ConfigError([f"unknown task {task!r}"])
