"""Experiment compositions: shared frozen backbones plus the ablation grids.

A :class:`Lab` builds (once) the pieces every run shares: tokenizer, frozen
encoder per size tag, cached encoder features, text corpus, frozen large LM
and the language-only pretrained tiny LM.  The grid functions compose module
operations only; the CLI just calls them.
"""
import math
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import data
from .adapters import (
    AdapterSpec, AttentionalPooler, PerceiverResampler, ResamplerConfig, count_parameters, table1_rows,
)
from .config import digest
from .evaluation import evaluate, pseudo_examples
from .lm import LmConfig, Tokenizer, TransformerLM, perplexity, pretrain_tlm
from .optim import OptimizerConfig
from .pipeline import (
    TaskData, TrainSettings, baseline_plan, build_baseline, build_quantized, build_stage1,
    build_stage2, convergence_probe, make_adapter, quantized_plan, run_stage, stage1_plan,
    stage2_plan,
)
from .quantize import STUDY_ROWS, QuantizerConfig
from .tensor import ContractError
from .vision import VitConfig, encode_batch, pretrain_stub


class Lab:
    """Shared, lazily built frozen backbones for one config and backbone seed."""

    def __init__(self, cfg, backbone_seed=0, sink=None, ckpt_dir=None):
        self.cfg = cfg
        self.seed = backbone_seed
        self.sink = sink
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        self.tokenizer = Tokenizer.default()
        self._cache = {}
        self.digest = digest(cfg)

    def _memo(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    # --- configs -----------------------------------------------------------

    def vit_config(self, size_tag=None, pretrain_mode=None):
        e = self.cfg.encoder
        return VitConfig(e.image_size, e.patch_size, size_tag or e.size_tag, e.heads, e.frames,
                         pretrain_mode or e.pretrain_mode, e.pretrain_steps)

    def lm_config(self, which):
        s = getattr(self.cfg, which)
        return LmConfig(len(self.tokenizer), s.dim, s.depth, s.heads, s.max_seq_len,
                        "tiny" if which == "tiny_lm" else "large", s.adapter_causal)

    def optimizer(self, steps, lr=0.0):
        o = self.cfg.optimizer
        # runs shorter than the warmup (smoke rows) warm up over a tenth of their length
        warmup = o.warmup_steps if o.warmup_steps < steps else steps // 10
        return OptimizerConfig(lr or o.base_lr, warmup, steps, o.beta1, o.beta2, o.eps,
                               o.weight_decay, o.batch_size, o.grad_clip).validate()

    def settings(self):
        s = self.cfg.stages
        return TrainSettings(s.val_every, s.log_every, s.ckpt_every, s.record_wall_ms)

    def resampler_config(self, n_layers=None, out_dim=None, size_tag=None, **overrides):
        r = self.cfg.adapter.resampler
        base = ResamplerConfig(**asdict(r), max_frames=8, vision_dim=self.vit_config(size_tag).dim,
                               out_dim=out_dim or self.cfg.tiny_lm.dim)
        if n_layers is not None:
            base = replace(base, n_layers=n_layers)
        return replace(base, **overrides).validate()

    # --- data and frozen backbones ----------------------------------------------

    def samples(self, split):
        d = self.cfg.data
        size = {"train": d.train_size, "val": d.val_size, "test": d.test_size}[split]
        return self._memo(("samples", split),
                          lambda: data.dataset(self.seed, split, size, d.video_fraction))

    def encoder(self, size_tag=None, pretrain_mode=None):
        vit = self.vit_config(size_tag, pretrain_mode)
        return self._memo(("encoder", vit.size_tag, vit.pretrain_mode),
                          lambda: pretrain_stub(vit, self.seed))

    def task_data(self, split, size_tag=None, pretrain_mode=None):
        vit = self.vit_config(size_tag, pretrain_mode)

        def build():
            enc, _ = self.encoder(vit.size_tag, vit.pretrain_mode)
            samples = self.samples(split)
            feats = encode_batch(enc, [s.frames for s in samples], vit.frames)
            return TaskData(samples, feats, self.tokenizer)

        return self._memo(("features", split, vit.size_tag, vit.pretrain_mode), build)

    def text_docs(self):
        return self._memo("text", lambda: data.text_corpus(self.seed, self.cfg.data.text_size))

    def _pretrain(self, which):
        s = getattr(self.cfg, which)
        o = self.cfg.optimizer
        oc = OptimizerConfig(s.pretrain_lr, s.pretrain_warmup, s.pretrain_steps,
                             weight_decay=o.weight_decay, batch_size=s.pretrain_batch,
                             grad_clip=o.grad_clip)
        sink = None
        if self.sink is not None:
            def sink(step, loss, lr, _n=which):
                if step % self.cfg.stages.log_every == 0 or step == 1:
                    self.sink({"step": step, "stage": "lm_pretrain", "loss": loss, "lr": lr,
                               "val_acc": None, "wall_ms": None, "run": _n})
        model, losses = pretrain_tlm(self.text_docs(), self.lm_config(which), oc,
                                     self.seed + (0 if which == "tiny_lm" else 1000),
                                     self.tokenizer, log=sink)
        if self.ckpt_dir is not None:
            ckpt_io.save(self.ckpt_dir / f"{which}.ckpt", ckpt_io.Checkpoint(
                model.state_dict(), self.digest, s.pretrain_steps, {"seed": self.seed},
                ["lm_pretrained"], {"role": which, "final_loss": losses[-1]}))
        return model.state_dict(), losses

    def large_lm(self):
        def build():
            state, _ = self._pretrain("large_lm")
            m = TransformerLM(self.lm_config("large_lm"), np.random.default_rng(0))
            m.load_state_dict(state)
            return m.requires_grad_(False)

        return self._memo("large_lm", build)

    def tiny_lm(self, init, seed=0):
        """Fresh tiny-LM copy: ``random`` (seeded) or ``lm_pretrained``."""
        cfg = self.lm_config("tiny_lm")
        model = TransformerLM(cfg, np.random.default_rng([seed, 303]))
        if init == "lm_pretrained":
            state, _ = self._memo("tiny_lm", lambda: self._pretrain("tiny_lm"))
            model.load_state_dict(state)
        elif init != "random":
            raise ValueError(f"unknown tiny-LM init {init!r}")
        return model

    def lm_report(self):
        """Held-out perplexity of the pretrained tiny LM vs a random one."""
        held = data.text_corpus(self.seed + 1, 256)
        tok = self.tokenizer
        return {"pretrained": perplexity(self.tiny_lm("lm_pretrained"), held, tok),
                "random": perplexity(self.tiny_lm("random"), held, tok)}

    # --- single runs -----------------------------------------------------------

    def _run(self, stage, system, seed, size_tag, run, pretrain_mode=None, meta=None, lr=0.0):
        train = self.task_data("train", size_tag, pretrain_mode)
        val = self.task_data("val", size_tag, pretrain_mode)
        sink = None
        if self.sink is not None:
            def sink(row):
                self.sink(dict(row, run=run))
        ckpt_dir = self.ckpt_dir / run if self.ckpt_dir is not None else None
        meta = {"run": run, "size_tag": self.vit_config(size_tag).size_tag,
                "pretrain_mode": self.vit_config(size_tag, pretrain_mode).pretrain_mode,
                "adapter": _adapter_kind(system), "resampler": asdict(_resampler_cfg(system)),
                **(meta or {})}
        return run_stage(stage, system, train, val, self.optimizer(stage.steps, lr), seed,
                         self.settings(), sink, ckpt_dir, config_digest=self.digest, metadata=meta)

    def final_eval(self, system, size_tag=None, pretrain_mode=None, tasks=None):
        e = self.cfg.eval
        split = self.task_data(e.split, size_tag, pretrain_mode)
        pseudo = pseudo_examples(self.samples("train"), e.pseudo_examples, self.seed)
        return evaluate(system, split.samples, tuple(tasks or e.tasks), split.features, pseudo,
                        e.batch_size, e.max_new)

    def stage1(self, seed, kind="perceiver_resampler", tlm_init="lm_pretrained", size_tag=None,
               n_layers=1, steps=None, run="stage1", pretrain_mode=None):
        rng = np.random.default_rng([seed, 401])
        tlm = self.tiny_lm(tlm_init, seed)
        rcfg = self.resampler_config(n_layers, self.cfg.tiny_lm.dim, size_tag)
        adapter = make_adapter(kind, rcfg, rng)
        system = build_stage1(adapter, tlm, self.tokenizer)
        steps = steps or self.cfg.stages.stage1_steps
        return self._run(stage1_plan(steps), system, seed, size_tag, run, pretrain_mode,
                         {"tlm_init": tlm_init}, self.cfg.stages.stage1_lr)

    def stage2(self, seed, tlm_init="stage1", stage1_state=None, size_tag=None, steps=None,
               run="stage2", pretrain_mode=None):
        """Train the composite adapter against the frozen large LM.

        ``tlm_init`` is ``random``, ``lm_pretrained`` (fresh 1-layer resampler in
        both cases) or ``stage1`` (cross-attention module and TLM taken over
        from ``stage1_state``).
        """
        rng = np.random.default_rng([seed, 402])
        if tlm_init == "stage1":
            if stage1_state is None:
                stage1_state = self.stage1(seed, size_tag=size_tag, pretrain_mode=pretrain_mode)
            adapter = stage1_state.system.adapter
            tlm = stage1_state.system.decoder
        else:
            adapter = PerceiverResampler(self.resampler_config(1, size_tag=size_tag), rng)
            tlm = self.tiny_lm(tlm_init, seed)
        system = build_stage2(adapter, tlm, self.large_lm(), self.tokenizer, rng)
        steps = steps or self.cfg.stages.stage2_steps
        return self._run(stage2_plan(steps), system, seed, size_tag, run, pretrain_mode,
                         {"tlm_init": tlm_init}, self.cfg.stages.stage2_lr)

    def baseline(self, seed, n_layers=None, size_tag=None, steps=None, run="baseline",
                 rcfg=None):
        rng = np.random.default_rng([seed, 403])
        large = self.large_lm()
        if rcfg is None:
            rcfg = self.resampler_config(n_layers or self.cfg.adapter.baseline_layers,
                                         large.cfg.dim, size_tag)
        system = build_baseline(PerceiverResampler(rcfg, rng), large, self.tokenizer)
        steps = steps or self.cfg.stages.baseline_steps
        return self._run(baseline_plan(steps), system, seed, size_tag, run,
                         lr=self.cfg.stages.baseline_lr)

    def quantized(self, seed, qcfg, steps=None, run="quantized"):
        rng = np.random.default_rng([seed, 404])
        large = self.large_lm()
        rcfg = self.resampler_config(self.cfg.adapter.baseline_layers, large.cfg.dim)
        system = build_quantized(PerceiverResampler(rcfg, rng), large, self.tokenizer, qcfg, rng, seed)
        steps = steps or self.cfg.quantize.steps or self.cfg.stages.baseline_steps
        return self._run(quantized_plan(steps), system, seed, None, run,
                         meta={"quantizer": asdict(qcfg)}, lr=self.cfg.stages.baseline_lr)

    def rebuild(self, ck):
        """Re-create the system a checkpoint was written from and load it."""
        m = ck.metadata
        kind = m.get("kind")
        try:
            rcfg = ResamplerConfig(**m["resampler"]).validate()
        except (KeyError, TypeError) as exc:
            raise ContractError(f"checkpoint metadata lacks a resampler config ({exc})") from None
        rng = np.random.default_rng(0)
        tok = self.tokenizer
        if kind == "stage1":
            system = build_stage1(make_adapter(m["adapter"], rcfg, rng), self.tiny_lm("random"), tok)
        elif kind == "stage2":
            system = build_stage2(make_adapter(m["adapter"], rcfg, rng), self.tiny_lm("random"),
                                  self.large_lm(), tok, rng)
        elif kind == "baseline":
            system = build_baseline(PerceiverResampler(rcfg, rng), self.large_lm(), tok)
        elif kind == "quantized":
            qcfg = QuantizerConfig(**m["quantizer"])
            system = build_quantized(PerceiverResampler(rcfg, rng), self.large_lm(), tok, qcfg, rng, 0)
        else:
            raise ContractError(f"checkpoint holds no trained system (kind {kind!r})")
        system.load_state(ck.tensors)
        return system

    def parameter_counts(self, kind, size_tag=None, n_layers=None):
        spec = AdapterSpec(kind, self.resampler_config(n_layers or (
            1 if kind == "palm2_vadapter" else self.cfg.adapter.baseline_layers), size_tag=size_tag),
            allow_deep=True)
        return count_parameters(spec, self.vit_config(size_tag), self.lm_config("tiny_lm"),
                                self.lm_config("large_lm"))


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------

def _adapter_kind(system):
    a = system.adapter
    a = getattr(a, "adapter", a)  # quantized wrapper
    a = getattr(a, "resampler", a)  # VAdapter
    return "attentional_pooler" if isinstance(a, AttentionalPooler) else "perceiver_resampler"


def _resampler_cfg(system):
    a = system.adapter
    a = getattr(a, "adapter", a)
    return getattr(a, "resampler", a).cfg


def _summary(state):
    log = state.log
    vals = [r["val_acc"] for r in log if r["val_acc"] is not None]
    return {"final_loss": log[-1]["loss"], "final_val_acc": vals[-1] if vals else None}


def progressive_vs_baseline(lab, seed, size_tag=None):
    """Stage 1 + stage 2 composite adapter against the deep-resampler baseline."""
    thr = lab.cfg.stages.convergence_threshold
    s1 = lab.stage1(seed, size_tag=size_tag, run=f"stage1-{size_tag or 'default'}-s{seed}")
    s2 = lab.stage2(seed, stage1_state=s1, size_tag=size_tag,
                    run=f"stage2-{size_tag or 'default'}-s{seed}")
    bl = lab.baseline(seed, size_tag=size_tag, run=f"baseline-{size_tag or 'default'}-s{seed}")
    out = {}
    for name, st in (("palm2_vadapter", s2), ("resampler_baseline", bl)):
        rep = lab.final_eval(st.system, size_tag)
        counts = lab.parameter_counts(name, size_tag)
        out[name] = {**_summary(st), "converge_step": convergence_probe(st.log, thr),
                     "cider": rep.tasks["caption"].cider,
                     "exact_match": rep.tasks["caption"].exact_match,
                     "total_params": counts["total"],
                     "trainable_params": max(counts["trainable_per_stage"].values())}
    out["palm2_vadapter"]["stage1_converge_step"] = convergence_probe(s1.log, thr)
    return out


def table1(lab, seed, steps=200):
    rows = []
    large = lab.large_lm()
    base = lab.resampler_config(lab.cfg.adapter.baseline_layers, large.cfg.dim)
    for group, label, rcfg in table1_rows(base):
        st = lab.baseline(seed, steps=steps, rcfg=rcfg, run=f"table1-{group}-{label}")
        losses = [r["loss"] for r in st.log]
        rows.append({"group": group, "setting": label, "finite": all(map(math.isfinite, losses)),
                     **_summary(st)})
    return rows


TABLE3_ROWS = (("random", False, False), ("lm_pretrained", True, False), ("stage1", True, True))


def table3(lab, seed):
    rows = []
    for init, lang, vl in TABLE3_ROWS:
        st = lab.stage2(seed, tlm_init=init, run=f"table3-{init}-s{seed}")
        rep = lab.final_eval(st.system)
        rows.append({"tlm_init": init, "language_only": lang, "vision_language": vl,
                     "cider": rep.tasks["caption"].cider, **_summary(st)})
    return rows


TABLE4_ROWS = (("attentional_pooler", 1), ("perceiver_resampler", 1), ("perceiver_resampler", 6))


def table4(lab, seed, with_stage2=True):
    rows = []
    for kind, layers in TABLE4_ROWS:
        s1 = lab.stage1(seed, kind=kind, n_layers=layers, run=f"table4-{kind}-{layers}-s{seed}")
        row = {"module": kind, "layers": layers, "stage1_val_acc": _summary(s1)["final_val_acc"]}
        if with_stage2:
            # stage 2 keeps whichever cross-attention module stage 1 trained
            st = lab.stage2(seed, stage1_state=s1, run=f"table4-{kind}-{layers}-stage2-s{seed}")
            row["cider"] = lab.final_eval(st.system).tasks["caption"].cider
        rows.append(row)
    return rows


def scale_study(lab, seeds, size_tags=("S", "M", "L")):
    rows = []
    for tag in size_tags:
        for seed in seeds:
            res = progressive_vs_baseline(lab, seed, tag)
            for kind, r in res.items():
                rows.append({"encoder": tag, "seed": seed, "method": kind, **r})
    return rows


def quantize_study(lab, seed, baseline_state=None):
    q = lab.cfg.quantize
    rows = []
    for setting, temp, decay in STUDY_ROWS:
        if temp is None:
            st = baseline_state or lab.baseline(seed, run=f"quantize-baseline-s{seed}")
        else:
            qcfg = QuantizerConfig(temp, decay, q.decay_rate, q.hard_forward)
            st = lab.quantized(seed, qcfg, run=f"quantize-t{temp}-{decay}-s{seed}")
        rep = lab.final_eval(st.system)
        losses = [r["loss"] for r in st.log]
        rows.append({"setting": setting, "temperature": temp, "decay": decay,
                     "cider": rep.tasks["caption"].cider, "finite": all(map(math.isfinite, losses)),
                     **_summary(st)})
    return rows


# --------------------------------------------------------------------------
# fixed-width tables
# --------------------------------------------------------------------------

def _cell(v):
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.4f}"
    return str(v)


def format_table(rows, columns, headers=None):
    headers = headers or columns
    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(h), *(len(row[i]) for row in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    out = [line, "-" * len(line)]
    out += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(out)
