"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (3 to 8) run the desk-scale profile in
configs/acceptance.yaml and share their runs through a session cache; the
whole file takes roughly an hour on one core.

    pytest tests/test_acceptance.py -v
    python3 tests/test_acceptance.py
"""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_config
from test_evaluation import CORPUS_CANDS, CORPUS_REFS, brute_force_cider
from vlab import gradcheck
from vlab.adapters import (
    AttentionalPooler, PerceiverResampler, ResamplerConfig, pooler_config, pooler_to_resampler_state,
)
from vlab.config import load_config
from vlab.evaluation import CAPTION_TEMPLATE, QA_TEMPLATES, cider, render_prompt
from vlab.experiments import Lab, format_table, quantize_study, table1
from vlab.optim import OptimizerConfig, adamw_step, lr_at
from vlab.pipeline import (
    MetricsSink, Stage, TrainSettings, baseline_plan, build_baseline, build_quantized, build_stage1,
    build_stage2, convergence_probe, run_stage, stage1_plan, stage2_plan,
)
from vlab.quantize import QuantizerConfig, gumbel_softmax
from vlab.tensor import Tensor, no_grad, precision

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "acceptance.yaml"
GOLDEN = Path(__file__).parent / "golden"
SEEDS = (0, 1, 2)
QUANT_SEEDS = (0, 1)
RESULTS = []


def verdict(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def fmt(x):
    return "inf" if x == math.inf else f"{x:.4g}"


class Runs:
    """Session cache so criteria that share a run train it once."""

    def __init__(self):
        self.lab = Lab(load_config(CONFIG))
        self.thr = self.lab.cfg.stages.convergence_threshold
        self.cache = {}

    def _get(self, key, build):
        if key not in self.cache:
            self.cache[key] = build()
        return self.cache[key]

    def _result(self, state, size):
        rep = self.lab.final_eval(state.system, size)
        vals = [r["val_acc"] for r in state.log if r["val_acc"] is not None]
        return {"converge": convergence_probe(state.log, self.thr), "val_acc": vals[-1],
                "cider": rep.tasks["caption"].cider, "state": state}

    def stage1(self, seed, size=None, kind="perceiver_resampler"):
        size = size or self.lab.cfg.encoder.size_tag

        def build():
            st = self.lab.stage1(seed, kind=kind, size_tag=size, run=f"stage1-{kind}-{size}-s{seed}")
            vals = [r["val_acc"] for r in st.log if r["val_acc"] is not None]
            return {"val_acc": vals[-1], "state": st}

        return self._get(("stage1", seed, size, kind), build)

    def vadapter(self, seed, size=None, init="stage1"):
        size = size or self.lab.cfg.encoder.size_tag

        def build():
            s1 = self.stage1(seed, size)["state"] if init == "stage1" else None
            st = self.lab.stage2(seed, tlm_init=init, stage1_state=s1, size_tag=size,
                                 run=f"stage2-{init}-{size}-s{seed}")
            return self._result(st, size)

        return self._get(("stage2", seed, size, init), build)

    def baseline(self, seed, size=None):
        size = size or self.lab.cfg.encoder.size_tag

        def build():
            return self._result(self.lab.baseline(seed, size_tag=size, run=f"baseline-{size}-s{seed}"), size)

        return self._get(("baseline", seed, size), build)


@pytest.fixture(scope="module")
def runs():
    return Runs()


# --------------------------------------------------------------------------

def test_01_gradient_soundness():
    ops = gradcheck.op_checks(0)
    e2e = gradcheck.end_to_end_checks(20, 0)
    results = ops + e2e
    op_err = max(r.error for r in ops)
    e2e_err = max(r.error for r in e2e)
    ok = op_err < 1e-4 and e2e_err < 1e-3 and len(e2e) >= 20 and all(r.ok for r in results)
    verdict(1, ok, f"{len(ops)} op checks max rel err {op_err:.2e} (< 1e-4); "
                   f"{len(e2e)} end-to-end configs max rel err {e2e_err:.2e} (< 1e-3)")


def _snap(module):
    return {n: p.data.copy() for n, p in module.named_parameters()}


def _unchanged(before, module):
    return all(np.array_equal(before[n], p.data) for n, p in module.named_parameters())


def test_02_freezing_contract():
    lab = Lab(tiny_config())
    enc, _ = lab.encoder()
    large = lab.large_lm()
    train, val = lab.task_data("train"), lab.task_data("val")
    tok = lab.tokenizer
    rng = np.random.default_rng(0)
    tlm = lab.tiny_lm("lm_pretrained")
    s1 = build_stage1(PerceiverResampler(lab.resampler_config(1), rng), tlm, tok, encoder=enc)
    s2 = build_stage2(s1.adapter, tlm, large, tok, rng, encoder=enc)
    bl = build_baseline(PerceiverResampler(lab.resampler_config(2, large.cfg.dim), rng), large, tok,
                        encoder=enc)
    qz = build_quantized(PerceiverResampler(lab.resampler_config(2, large.cfg.dim), rng), large, tok,
                         QuantizerConfig(), rng, 0, encoder=enc)
    plans = [(stage1_plan(6), s1), (stage2_plan(6), s2), (baseline_plan(6), bl),
             (Stage("quantized_resampler", 6, ("resampler", "fc"), ("encoder", "large_lm")), qz)]
    frozen_ok = True
    for plan, system in plans:
        enc0, large0 = _snap(enc), _snap(large)
        run_stage(plan, system, train, val, lab.optimizer(plan.steps), seed=3)
        frozen_ok &= _unchanged(enc0, enc)
        if plan.name != "stage1_decoder":
            frozen_ok &= _unchanged(large0, large)
    trainable = {n for n, p in s2.named() if p.requires_grad}
    want = {n for g in ("resampler", "tlm_trunk", "proj") for n, _ in s2.groups[g]}
    layers = len(s2.adapter.resampler.layers)
    set_ok = trainable == want and layers == 1
    verdict(2, frozen_ok and set_ok,
            f"encoder and large LM bit-identical after {len(plans)} full stages: {frozen_ok}; "
            f"stage-2 trainable set = {{1-layer resampler, TLM trunk, projection}}: {set_ok}")


def test_03_convergence_direction(runs):
    faster = higher = 0
    parts = []
    for seed in SEEDS:
        va, bl = runs.vadapter(seed), runs.baseline(seed)
        faster += va["converge"] <= bl["converge"]
        higher += va["cider"] >= bl["cider"]
        parts.append(f"s{seed}: steps {fmt(va['converge'])} vs {fmt(bl['converge'])}, "
                     f"CIDEr {va['cider']:.3f} vs {bl['cider']:.3f}")
    verdict(3, faster == len(SEEDS) and higher >= 2,
            f"vadapter reaches 80% no later in {faster}/3, CIDEr >= baseline in {higher}/3 ({'; '.join(parts)})")


def _le(a, b):
    return a <= b or abs(a - b) <= 0.01 * max(abs(a), abs(b))


def test_04_progressive_pretraining_ordering(runs):
    good = 0
    parts = []
    for seed in SEEDS:
        c = [runs.vadapter(seed, init=i)["cider"] for i in ("random", "lm_pretrained", "stage1")]
        good += _le(c[0], c[1]) and _le(c[1], c[2])
        parts.append(f"s{seed}: " + " / ".join(f"{v:.3f}" for v in c))
    verdict(4, good >= 2, f"random <= lm-pretrained <= lm-pretrained+stage1 CIDEr in {good}/3 "
                          f"({'; '.join(parts)})")


def test_05_scalability_direction(runs):
    good = 0
    parts = []
    for seed in SEEDS:
        dv = runs.vadapter(seed, "M")["cider"] - runs.vadapter(seed, "S")["cider"]
        db = runs.baseline(seed, "M")["cider"] - runs.baseline(seed, "S")["cider"]
        good += dv > db
        parts.append(f"s{seed}: vadapter {dv:+.3f} vs baseline {db:+.3f}")
    verdict(5, good >= 2, f"S->M CIDEr gain larger for vadapter in {good}/3 ({'; '.join(parts)})")


def test_06_pooler_vs_resampler(runs):
    rng = np.random.default_rng(0)
    cfg = ResamplerConfig(n_queries=8, query_dim=16, hidden_dim=24, heads=2, vision_dim=12, out_dim=10)
    pool = AttentionalPooler(cfg, rng)
    res = PerceiverResampler(pooler_config(cfg), rng)
    res.load_state_dict(pooler_to_resampler_state(pool.state_dict()))
    x = Tensor(rng.standard_normal((40, 12)))
    with precision(np.float64), no_grad():
        pool.astype(np.float64)
        res.astype(np.float64)
        gap = float(np.max(np.abs(pool(x).data - res(x).data)))
    good = 0
    parts = []
    for seed in SEEDS:
        r = runs.stage1(seed)["val_acc"]
        p = runs.stage1(seed, kind="attentional_pooler")["val_acc"]
        good += r >= p
        parts.append(f"s{seed}: {r:.3f} vs {p:.3f}")
    verdict(6, good >= 2 and gap <= 1e-6,
            f"resampler >= pooler stage-1 val acc in {good}/3 ({'; '.join(parts)}); "
            f"pooler vs degenerate resampler max diff {gap:.1e}")


def test_07_table1_grid(runs):
    rows = table1(runs.lab, 0, steps=200)
    groups = [r["group"] for r in rows]
    layout = [groups.count(g) for g in dict.fromkeys(groups)]
    table = format_table(rows, ["group", "setting", "final_loss", "final_val_acc", "finite"],
                         ["Ablation", "Setting", "Loss", "Val acc", "Finite"])
    print(table)
    finite = all(r["finite"] for r in rows)
    verdict(7, len(rows) == 16 and layout == [4, 3, 3, 3, 3] and finite,
            f"{len(rows)} rows in groups {layout}, 200 steps each, all losses finite: {finite}")


def test_08_quantization_collapse(runs):
    logits = np.array([1.0, 0.0, -0.5, 2.0, 0.3])
    _, idx = gumbel_softmax(np.tile(logits, (100_000, 1)), 1.0, seed=123)
    freq = np.bincount(idx, minlength=len(logits)) / 100_000
    p = np.exp(logits) / np.exp(logits).sum()
    mc = float(np.max(np.abs(freq - p)))
    worse = total = 0
    parts = []
    for seed in QUANT_SEEDS:
        rows = quantize_study(runs.lab, seed, runs.baseline(seed)["state"])
        base = rows[0]["cider"]
        for r in rows[1:]:
            total += 1
            worse += r["cider"] <= base
        parts.append(f"s{seed}: baseline {base:.3f}, gumbel " + " / ".join(f"{r['cider']:.3f}" for r in rows[1:]))
    verdict(8, worse == total and mc < 0.01,
            f"{worse}/{total} gumbel variants <= baseline ({'; '.join(parts)}); "
            f"gumbel-max max |freq - softmax| {mc:.4f} over 100k draws")


def test_09_prompt_byte_exactness():
    cases = {
        "caption.txt": render_prompt(CAPTION_TEMPLATE),
        "image_qa_0.txt": render_prompt(QA_TEMPLATES["image_qa"], "what color is the circle"),
        "image_qa_2.txt": render_prompt(QA_TEMPLATES["image_qa"], "what color is the circle",
                                        [("what color is the square", "red"), ("how many objects", "2")]),
        "video_qa_2.txt": render_prompt(QA_TEMPLATES["video_qa"], "which direction is it moving",
                                        [("what color is the square", "red"), ("how many objects", "2")]),
    }
    bad = [name for name, text in cases.items() if text.encode("utf-8") != (GOLDEN / name).read_bytes()]
    verdict(9, not bad, f"{len(cases) - len(bad)}/{len(cases)} prompts match golden files byte for byte")


def test_10_determinism_and_resume(tmp_path):
    blobs = []
    for name in ("a", "b"):
        lab = Lab(tiny_config(), sink=MetricsSink(tmp_path / name / "metrics.jsonl"))
        lab.stage1(7, steps=6)
        lab.baseline(7, steps=6)
        blobs.append((tmp_path / name / "metrics.jsonl").read_bytes())
    same_metrics = blobs[0] == blobs[1]

    lab = Lab(tiny_config())
    train, val = lab.task_data("train"), lab.task_data("val")
    settings = TrainSettings(val_every=3, log_every=1, ckpt_every=3)

    def fresh():
        large = lab.large_lm()
        return build_baseline(PerceiverResampler(lab.resampler_config(2, large.cfg.dim),
                                                 np.random.default_rng(4)), large, lab.tokenizer)

    full = run_stage(baseline_plan(8), fresh(), train, val, lab.optimizer(8), 5, settings)
    run_stage(baseline_plan(8), fresh(), train, val, lab.optimizer(8), 5, settings,
              ckpt_dir=tmp_path / "ck", stop_at=3)
    resumed = run_stage(baseline_plan(8), fresh(), train, val, lab.optimizer(8), 5, settings,
                        resume=tmp_path / "ck" / "baseline_resampler-000003.ckpt")
    a, b = full.system.state(), resumed.system.state()
    bit_exact = all(np.array_equal(a[k], b[k]) for k in a) and full.log[3:] == resumed.log
    verdict(10, same_metrics and bit_exact,
            f"metrics.jsonl byte-identical across reruns: {same_metrics}; "
            f"resume from step 3 equals uninterrupted run bit for bit: {bit_exact}")


def test_11_schedule_optimizer_cider():
    cfg = OptimizerConfig()
    lr_ok = lr_at(0, cfg) == 0.0 and abs(lr_at(1000, cfg) - 5e-4) < 1e-15 and lr_at(cfg.total_steps, cfg) == 0.0
    p, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
    trace_cfg = OptimizerConfig(base_lr=1e-3, warmup_steps=0, total_steps=10)
    want = [0.99899990002, 0.9986541942811752, 0.9982747026429476]
    err = 0.0
    for t, (g, w) in enumerate(zip([0.5, -0.2, 0.1], want), start=1):
        adamw_step(p, np.array([g]), m, v, t, 1e-3, trace_cfg)
        err = max(err, abs(p[0] - w))
    c_err = abs(cider(CORPUS_CANDS, CORPUS_REFS) - brute_force_cider(CORPUS_CANDS, CORPUS_REFS))
    verdict(11, lr_ok and err < 1e-7 and c_err < 1e-6,
            f"lr_at(0, 1000, total) = ({lr_at(0, cfg)}, {lr_at(1000, cfg)}, {lr_at(cfg.total_steps, cfg)}); "
            f"AdamW trace err {err:.1e}; CIDEr vs brute force {c_err:.1e}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
