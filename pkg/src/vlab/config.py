"""Experiment configuration: YAML document <-> nested dataclasses.

Every field is addressable by a dotted path (``adapter.resampler.n_layers``),
unknown keys and mistyped values are rejected with that path, and the digest
is the SHA-256 of the canonical JSON form of the fully materialised config.
"""
import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field

import yaml

from .adapters import ADAPTER_KINDS, LN_MODES
from .vision import VIT_SIZES


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    train_size: int = 4096
    val_size: int = 256
    test_size: int = 256
    text_size: int = 8192
    video_fraction: float = 0.0


@dataclass
class EncoderSection:
    image_size: int = 48
    patch_size: int = 6
    size_tag: str = "S"
    heads: int = 4
    frames: int = 8
    pretrain_mode: str = "dense"
    pretrain_steps: int = 300


@dataclass
class LmSection:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    max_seq_len: int = 128
    adapter_causal: bool = True
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_warmup: int = 200
    pretrain_batch: int = 64


def _large_default():
    return LmSection(dim=192, depth=4)


@dataclass
class ResamplerSection:
    n_queries: int = 16
    query_dim: int = 64
    hidden_dim: int = 64
    n_layers: int = 1
    ln_mode: str = "separate"
    final_ln: bool = False
    use_ffn: bool = True
    use_time_embedding: bool = True
    kv_concat_queries: bool = True
    heads: int = 4


@dataclass
class AdapterSection:
    kind: str = "palm2_vadapter"
    resampler: ResamplerSection = field(default_factory=ResamplerSection)
    baseline_layers: int = 6
    allow_deep: bool = False
    tlm_init: str = "stage1"  # random | lm_pretrained | stage1


@dataclass
class OptimizerSection:
    base_lr: float = 5e-4
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 64
    grad_clip: float = 1.0


@dataclass
class StagesSection:
    stage1_steps: int = 3000
    stage2_steps: int = 3000
    baseline_steps: int = 6000
    # per-stage learning rates; 0 means optimizer.base_lr
    stage1_lr: float = 0.0
    stage2_lr: float = 0.0
    baseline_lr: float = 0.0
    val_every: int = 100
    log_every: int = 10
    ckpt_every: int = 0
    convergence_threshold: float = 0.8
    record_wall_ms: bool = False


@dataclass
class EvalSection:
    split: str = "test"
    tasks: list = field(default_factory=lambda: ["caption"])
    max_new: int = 20
    pseudo_examples: int = 4
    batch_size: int = 64


@dataclass
class QuantizeSection:
    temperature_init: float = 2.0
    decay: str = "exponential"
    decay_rate: float = 0.5 ** (1 / 500)
    hard_forward: bool = True
    steps: int = 0  # 0 = the baseline's budget


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    tiny_lm: LmSection = field(default_factory=LmSection)
    large_lm: LmSection = field(default_factory=_large_default)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    stages: StagesSection = field(default_factory=StagesSection)
    eval: EvalSection = field(default_factory=EvalSection)
    quantize: QuantizeSection = field(default_factory=QuantizeSection)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return digest(self)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def _build(cls, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        where = f"{path}.{f.name}" if path else f.name
        kwargs[f.name] = _coerce(hints[f.name], raw[f.name], where)
    return cls(**kwargs)


def _coerce(tp, value, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    elif tp is list:
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return list(value)
    name = getattr(tp, "__name__", str(tp))
    raise ConfigError(f"{path}: expected {name}, got {type(value).__name__} {value!r}")


def _check(cfg):
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(f"{path}: {msg}")

    e = cfg.encoder
    need(e.image_size > 0 and e.patch_size > 0 and e.image_size % e.patch_size == 0,
         "encoder.patch_size", "must divide encoder.image_size")
    need(e.size_tag in VIT_SIZES, "encoder.size_tag", f"must be one of {sorted(VIT_SIZES)}")
    need(1 <= e.frames <= 8, "encoder.frames", "must be in 1..8")
    need(e.pretrain_mode in ("random", "dense"), "encoder.pretrain_mode", "must be random or dense")
    need(cfg.tiny_lm.dim < cfg.large_lm.dim, "tiny_lm.dim", "must be smaller than large_lm.dim")
    for sec in ("tiny_lm", "large_lm"):
        s = getattr(cfg, sec)
        need(s.dim % s.heads == 0, f"{sec}.heads", "must divide dim")
        need(s.pretrain_warmup < s.pretrain_steps or s.pretrain_steps == 0,
             f"{sec}.pretrain_warmup", "must be below pretrain_steps")
    a = cfg.adapter
    need(a.kind in ADAPTER_KINDS, "adapter.kind", f"must be one of {ADAPTER_KINDS}")
    need(a.tlm_init in ("random", "lm_pretrained", "stage1"), "adapter.tlm_init",
         "must be random, lm_pretrained or stage1")
    r = a.resampler
    need(r.ln_mode in LN_MODES, "adapter.resampler.ln_mode", f"must be one of {LN_MODES}")
    need(r.hidden_dim % r.heads == 0, "adapter.resampler.heads", "must divide hidden_dim")
    need(r.ln_mode != "shared" or r.query_dim == r.hidden_dim, "adapter.resampler.ln_mode",
         "shared needs query_dim == hidden_dim")
    need(a.kind != "palm2_vadapter" or r.n_layers == 1 or a.allow_deep, "adapter.resampler.n_layers",
         "palm2_vadapter uses a 1-layer resampler unless adapter.allow_deep is set")
    o = cfg.optimizer
    need(o.base_lr > 0, "optimizer.base_lr", "must be positive")
    need(o.batch_size > 0, "optimizer.batch_size", "must be positive")
    s = cfg.stages
    for name in ("stage1_lr", "stage2_lr", "baseline_lr"):
        need(getattr(s, name) >= 0, f"stages.{name}", "must be >= 0 (0 = optimizer.base_lr)")
    for name in ("stage1_steps", "stage2_steps", "baseline_steps"):
        need(getattr(s, name) > o.warmup_steps, f"stages.{name}", "must exceed optimizer.warmup_steps")
    need(0 < s.convergence_threshold <= 1, "stages.convergence_threshold", "must be in (0, 1]")
    need(cfg.eval.split in ("val", "test"), "eval.split", "must be val or test")
    for t in cfg.eval.tasks:
        need(t in ("caption", "image_qa", "video_qa"), "eval.tasks", f"unknown task {t!r}")
    q = cfg.quantize
    need(q.temperature_init > 0, "quantize.temperature_init", "must be positive")
    need(q.decay in ("none", "exponential"), "quantize.decay", "must be none or exponential")
    need(0 < q.decay_rate <= 1, "quantize.decay_rate", "must be in (0, 1]")
    return cfg


def from_dict(raw):
    return _check(_build(ExperimentConfig, raw, ""))


def parse_config(text):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<document>: not valid YAML ({exc})") from None
    return from_dict(raw)


def load_config(path=None):
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def serialize(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def digest(cfg):
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def apply_overrides(cfg, overrides):
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected path=value")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        node = raw
        for i, k in enumerate(keys[:-1]):
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"{'.'.join(keys[:i + 1])}: unknown section")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"{path.strip()}: unknown key")
        node[keys[-1]] = yaml.safe_load(text)
    return from_dict(raw)
