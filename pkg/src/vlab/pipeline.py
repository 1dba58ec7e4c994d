"""Vision-language systems, stage plans, the training loop and checkpoints."""
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .adapters import AttentionalPooler, PerceiverResampler, VAdapter
from .data import collate
from .evaluation import CAPTION_TEMPLATE, render_prompt
from .lm import greedy_decode, lm_loss
from .nn import const
from .optim import AdamW, clip_grad_norm, lr_at
from .quantize import QuantizedAdapter
from .tensor import ContractError, backward, no_grad
from .vision import encode_batch

STAGES = ("lm_pretrain", "stage1_decoder", "stage2_adapter", "baseline_resampler",
          "quantized_resampler")
# keeps each stage's batch stream independent of the others
STAGE_TAGS = {name: 31 + i for i, name in enumerate(STAGES)}


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class TaskData:
    """Samples with their cached frozen-encoder features, captioning task."""

    samples: list
    features: np.ndarray  # (N, F, tokens_per_frame, vision_dim)
    tokenizer: object

    def __len__(self):
        return len(self.samples)

    def batch(self, idx):
        prompt = render_prompt(CAPTION_TEMPLATE)
        pairs = [(prompt, self.samples[i].caption) for i in idx]
        return collate(pairs, self.tokenizer, idx)


def batch_indices(seed, stage, step, n, batch_size):
    rng = np.random.default_rng([seed, STAGE_TAGS[stage], step])
    return np.sort(rng.integers(0, n, size=batch_size))


# --------------------------------------------------------------------------
# systems
# --------------------------------------------------------------------------

def _named(prefix, module):
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]


class VisionLanguageModel:
    """Frozen encoder features -> adapter -> LM decoder, with named parameter
    groups that stage plans freeze or train."""

    def __init__(self, kind, adapter, decoder, tokenizer, groups, encoder=None, frames=1):
        self.kind = kind
        self.adapter = adapter
        self.decoder = decoder
        self.tokenizer = tokenizer
        self.encoder = encoder
        self.frames = frames
        if encoder is not None:
            groups = dict(groups, encoder=_named("encoder", encoder))
        self.groups = groups
        seen = {}
        for g, params in groups.items():
            for n, p in params:
                if id(p) in seen and seen[id(p)] != g:
                    raise ContractError(f"parameter {n} is in groups {seen[id(p)]} and {g}")
                seen[id(p)] = g

    def named(self, groups=None):
        groups = self.groups if groups is None else groups
        return [item for g in groups for item in self.groups.get(g, ())]

    def state(self):
        return {n: p.data for n, p in self.named()}

    def load_state(self, tensors):
        own = dict(self.named())
        missing = sorted(set(own) - set(tensors))
        if missing:
            raise ContractError(f"checkpoint lacks {missing[:5]}")
        for n, p in own.items():
            if tensors[n].shape != p.shape:
                raise ContractError(f"{n}: checkpoint shape {tensors[n].shape} vs {p.shape}")
            p.data = np.array(tensors[n], dtype=p.dtype)

    def prefix(self, feats):
        return self.adapter(const(feats))

    def loss(self, batch, feats):
        return lm_loss(self.decoder, batch.tokens, batch.loss_mask, self.prefix(feats), batch.vis_pos)

    def token_accuracy(self, batch, feats):
        with no_grad():
            _, logits, tgt, mask = self.loss(batch, feats)
        hit = (logits.data.argmax(-1) == tgt) * mask
        return float(hit.sum()), float(mask.sum())

    def generate(self, prompt_ids, feats, max_new):
        prompt_ids = np.asarray(prompt_ids)
        hits = np.flatnonzero(prompt_ids[0] == self.tokenizer.vis_id)
        vis_pos = int(hits[0]) if hits.size else -1
        with no_grad():
            prefix = self.prefix(feats)
            return greedy_decode(prefix, prompt_ids, self.decoder, max_new, self.tokenizer.eos_id,
                                 vis_pos)

    def encode_samples(self, samples):
        if self.encoder is None:
            raise ContractError("system has no encoder; pass cached features")
        return encode_batch(self.encoder, [s.frames for s in samples], self.frames)


def build_stage1(adapter, tlm, tokenizer, encoder=None, frames=1):
    """Adapter (resampler or pooler) feeding the tiny LM as caption decoder."""
    groups = {"adapter": _named("adapter", adapter), "tlm": _named("tlm", tlm)}
    return VisionLanguageModel("stage1", adapter, tlm, tokenizer, groups, encoder, frames)


def build_stage2(resampler, tlm, large_lm, tokenizer, rng, encoder=None, frames=1):
    """Resampler -> tiny-LM trunk -> projection feeding the frozen large LM."""
    va = VAdapter(resampler, tlm, large_lm.cfg.dim, rng)
    trunk = {id(p) for _, p in tlm.trunk_parameters()}
    groups = {
        "resampler": _named("resampler", resampler),
        "tlm_trunk": [(f"tlm.{n}", p) for n, p in tlm.trunk_parameters()],
        "tlm_embed": [(f"tlm.{n}", p) for n, p in tlm.named_parameters() if id(p) not in trunk],
        "proj": _named("proj", va.proj),
        "large_lm": _named("large_lm", large_lm),
    }
    return VisionLanguageModel("stage2", va, large_lm, tokenizer, groups, encoder, frames)


def build_baseline(resampler, large_lm, tokenizer, encoder=None, frames=1):
    groups = {"resampler": _named("resampler", resampler), "large_lm": _named("large_lm", large_lm)}
    return VisionLanguageModel("baseline", resampler, large_lm, tokenizer, groups, encoder, frames)


def build_quantized(resampler, large_lm, tokenizer, qcfg, rng, seed, encoder=None, frames=1):
    """Baseline wiring with the resampler output quantized to large-LM words."""
    qa = QuantizedAdapter(resampler, large_lm.cfg.vocab_size, lambda: large_lm.tok_emb, qcfg, rng, seed)
    groups = {"resampler": _named("resampler", resampler), "fc": _named("fc", qa.fc),
              "large_lm": _named("large_lm", large_lm)}
    return VisionLanguageModel("quantized", qa, large_lm, tokenizer, groups, encoder, frames)


def make_adapter(kind, cfg, rng):
    if kind == "attentional_pooler":
        return AttentionalPooler(cfg, rng)
    return PerceiverResampler(cfg, rng)


# --------------------------------------------------------------------------
# stage plans
# --------------------------------------------------------------------------

@dataclass
class Stage:
    name: str
    steps: int
    trainable: tuple
    frozen: tuple
    data: str = "caption"

    def validate(self, system=None):
        if self.name not in STAGES:
            raise ContractError(f"unknown stage {self.name!r}")
        overlap = set(self.trainable) & set(self.frozen)
        if overlap:
            raise ContractError(f"stage {self.name}: groups both trainable and frozen: {sorted(overlap)}")
        if self.steps < 1:
            raise ContractError(f"stage {self.name}: steps must be >= 1")
        if system is not None:
            listed = set(self.trainable) | set(self.frozen)
            # the encoder group is absent when features come from a cache
            unknown = listed - set(system.groups) - {"encoder"}
            if unknown:
                raise ContractError(f"stage {self.name}: unknown groups {sorted(unknown)}")
            unassigned = set(system.groups) - listed
            if unassigned:
                raise ContractError(f"stage {self.name}: groups neither trainable nor frozen: "
                                    f"{sorted(unassigned)}")
        return self


@dataclass
class StagePlan:
    stages: list = field(default_factory=list)

    def validate(self):
        names = [s.name for s in self.stages]
        if "stage2_adapter" in names:
            i = names.index("stage2_adapter")
            if not {"stage1_decoder", "lm_pretrain"} & set(names[:i]):
                raise ContractError("stage2_adapter needs a stage1_decoder or lm_pretrain stage before it")
        for s in self.stages:
            s.validate()
        return self


def stage1_plan(steps):
    return Stage("stage1_decoder", steps, ("adapter", "tlm"), ("encoder",))


def stage2_plan(steps):
    return Stage("stage2_adapter", steps, ("resampler", "tlm_trunk", "proj"),
                 ("encoder", "tlm_embed", "large_lm"))


def baseline_plan(steps):
    return Stage("baseline_resampler", steps, ("resampler",), ("encoder", "large_lm"))


def quantized_plan(steps):
    return Stage("quantized_resampler", steps, ("resampler", "fc"), ("encoder", "large_lm"))


def progressive_plan(stage1_steps, stage2_steps, lm_steps=0):
    stages = [Stage("lm_pretrain", lm_steps, ("tlm",), ())] if lm_steps else []
    return StagePlan(stages + [stage1_plan(stage1_steps), stage2_plan(stage2_steps)]).validate()


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainSettings:
    val_every: int = 100
    log_every: int = 10
    ckpt_every: int = 0
    record_wall_ms: bool = False


@dataclass
class TrainState:
    system: VisionLanguageModel
    stage: Stage
    optimizer: AdamW
    step: int = 0
    seed: int = 0
    config_digest: str = ""
    tags: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def checkpoint(self, metadata=None):
        tensors = dict(self.system.state())
        tensors.update(self.optimizer.state_arrays())
        meta = {"stage": self.stage.name, "kind": self.system.kind, "opt_t": self.optimizer.t,
                "trainable": list(self.stage.trainable), **(metadata or {})}
        return ckpt_io.Checkpoint(tensors, self.config_digest, self.step,
                                  {"seed": self.seed, "stream": STAGE_TAGS[self.stage.name]},
                                  list(self.tags), meta)


def val_token_accuracy(system, val, batch_size=64):
    correct = total = 0.0
    for lo in range(0, len(val), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(val)))
        c, t = system.token_accuracy(val.batch(idx), val.features[idx])
        correct += c
        total += t
    return correct / total


class MetricsSink:
    """Appends metric rows to ``metrics.jsonl`` as sorted-key JSON lines."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, row):
        with open(self.path, "a", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def run_stage(stage, system, train, val, opt_cfg, seed, settings=None, sink=None, ckpt_dir=None,
              resume=None, stop_at=None, config_digest="", tags=(), metadata=None):
    """Train ``stage.trainable`` of ``system`` for ``stage.steps`` steps.

    Batches are a pure function of (seed, stage, step), so a run resumed from
    a checkpoint replays the uninterrupted run bit for bit.  Frozen groups
    are verified bit-identical afterwards.  ``metadata`` is merged into every
    checkpoint written.  Returns the final TrainState.
    """
    settings = settings or TrainSettings()
    stage.validate(system)
    opt_cfg.validate()
    if opt_cfg.total_steps != stage.steps:
        raise ContractError(f"optimizer total_steps {opt_cfg.total_steps} != stage steps {stage.steps}")
    for _, p in system.named(stage.frozen):
        p.requires_grad = False
        p.grad = None
    trainable = system.named(stage.trainable)
    for _, p in trainable:
        p.requires_grad = True
    frozen_before = {n: p.data.copy() for n, p in system.named(stage.frozen)}
    state = TrainState(system, stage, AdamW(trainable, opt_cfg), 0, seed, config_digest,
                       list(tags))
    if resume is not None:
        ck = resume if isinstance(resume, ckpt_io.Checkpoint) else ckpt_io.load(resume)
        if ck.metadata.get("stage") != stage.name:
            raise ContractError(f"checkpoint is from stage {ck.metadata.get('stage')}, not {stage.name}")
        system.load_state(ck.tensors)
        state.optimizer.load_state_arrays(ck.tensors, ck.metadata["opt_t"])
        state.step = ck.step
    params = [p for _, p in trainable]
    last = stage.steps if stop_at is None else min(stop_at, stage.steps)
    while state.step < last:
        step = state.step + 1
        t0 = time.perf_counter()
        idx = batch_indices(seed, stage.name, step, len(train), opt_cfg.batch_size)
        if hasattr(system.adapter, "step"):
            system.adapter.step = step
        loss, *_ = system.loss(train.batch(idx), train.features[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise ContractError(f"{stage.name}: non-finite loss at step {step}")
        backward(loss)
        clip_grad_norm(params, opt_cfg.grad_clip)
        lr = lr_at(step, opt_cfg)
        state.optimizer.step(lr)
        state.optimizer.zero_grad()
        state.step = step
        is_val = val is not None and (step % settings.val_every == 0 or step == stage.steps)
        if is_val or step % settings.log_every == 0 or step == 1:
            row = {"step": step, "stage": stage.name, "loss": value, "lr": lr, "val_acc": None,
                   "wall_ms": None}
            if is_val:
                row["val_acc"] = val_token_accuracy(system, val)
            if settings.record_wall_ms:
                row["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            state.log.append(row)
            if sink is not None:
                sink(row)
        if ckpt_dir is not None and settings.ckpt_every and step % settings.ckpt_every == 0:
            ckpt_io.save(Path(ckpt_dir) / f"{stage.name}-{step:06d}.ckpt", state.checkpoint(metadata))
    for n, p in system.named(stage.frozen):
        if not np.array_equal(p.data, frozen_before[n]):
            raise ContractError(f"frozen tensor {n} changed during {stage.name}")
    if state.step == stage.steps:
        state.tags.append({"stage1_decoder": "stage1", "stage2_adapter": "stage2"}.get(
            stage.name, stage.name))
        if ckpt_dir is not None:
            ckpt_io.save(Path(ckpt_dir) / f"{stage.name}.ckpt", state.checkpoint(metadata))
    return state


def train_baseline(resampler, large_lm, tokenizer, train, val, opt_cfg, seed, **kw):
    """Frozen features -> N-layer resampler -> frozen large LM; only the
    resampler trains."""
    system = build_baseline(resampler, large_lm, tokenizer)
    return run_stage(baseline_plan(opt_cfg.total_steps), system, train, val, opt_cfg, seed, **kw)


def convergence_probe(log, threshold, key="val_acc"):
    """First logged step whose ``key`` reaches ``threshold``; ``math.inf`` if none."""
    for row in sorted(log, key=lambda r: r["step"]):
        v = row.get(key)
        if v is not None and v >= threshold:
            return row["step"]
    return math.inf

