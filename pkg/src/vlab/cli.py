"""``vlab`` command line: one subcommand per module operation or table grid.

Every run writes into ``--out``::

    config.snapshot   the fully materialised config (YAML)
    metrics.jsonl     one JSON row per logged training step
    checkpoints/      binary checkpoints
    reports/          JSON reports and fixed-width tables

Exit status: 0 success, 1 contract/config error, 2 usage error.
"""
import argparse
import json
import math
import sys
from pathlib import Path
from types import SimpleNamespace

from . import checkpoint as ckpt_io
from . import data, experiments, gradcheck
from .config import ConfigError, apply_overrides, load_config, serialize
from .evaluation import EvalReport
from .pipeline import MetricsSink
from .tensor import ContractError, ShapeError


class RunDir:
    def __init__(self, root, cfg):
        self.root = Path(root)
        self.checkpoints = self.root / "checkpoints"
        self.reports = self.root / "reports"
        for d in (self.root, self.checkpoints, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        (self.root / "config.snapshot").write_text(serialize(cfg), encoding="utf-8")
        self.metrics = self.root / "metrics.jsonl"
        self.metrics.write_text("", encoding="utf-8")  # one run per directory
        self.sink = MetricsSink(self.metrics)

    def report(self, name, payload, table=None):
        (self.reports / f"{name}.json").write_text(
            json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if table is not None:
            (self.reports / f"{name}.txt").write_text(table + "\n", encoding="utf-8")
            print(table)


def _jsonable(x):
    # json has no infinity; a run that never converged reports null
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _lab(args, cfg, run):
    return experiments.Lab(cfg, args.seed, sink=run.sink, ckpt_dir=run.checkpoints)


def _caption(rep):
    t = rep.tasks["caption"]
    return {"cider": t.cider, "exact_match": t.exact_match, "token_accuracy": t.token_accuracy}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args, cfg, run):
    d = cfg.data
    out = run.root / "data"
    for split, size in (("train", d.train_size), ("val", d.val_size), ("test", d.test_size)):
        data.export_split(out, args.seed, split, size, d.video_fraction)
    lab = experiments.Lab(cfg, args.seed)
    lab.tokenizer.save(out / "vocab.txt")
    with open(out / "text.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(doc + "\n" for doc in lab.text_docs()))
    run.report("gen_data", {"train": d.train_size, "val": d.val_size, "test": d.test_size,
                            "text": d.text_size, "vocab_size": len(lab.tokenizer)})


def cmd_pretrain_lm(args, cfg, run):
    lab = _lab(args, cfg, run)
    lab.large_lm()
    rep = lab.lm_report()
    run.report("pretrain_lm", {"held_out_perplexity": rep},
               experiments.format_table([{"model": k, "ppl": v} for k, v in rep.items()],
                                        ["model", "ppl"], ["Tiny LM", "Perplexity"]))


def _stage1_kind(cfg):
    return "attentional_pooler" if cfg.adapter.kind == "attentional_pooler" else "perceiver_resampler"


def cmd_align_stage1(args, cfg, run):
    lab = _lab(args, cfg, run)
    init = "random" if cfg.adapter.tlm_init == "random" else "lm_pretrained"
    st = lab.stage1(args.seed, kind=_stage1_kind(cfg), tlm_init=init)
    rep = lab.final_eval(st.system)
    run.report("align_stage1", {**experiments._summary(st), **_caption(rep),
                                "converge_step": experiments.convergence_probe(
                                    st.log, cfg.stages.convergence_threshold)})


def cmd_align_stage2(args, cfg, run):
    lab = _lab(args, cfg, run)
    stage1_state = None
    if args.stage1:
        ck = ckpt_io.load(args.stage1)
        if ck.metadata.get("kind") != "stage1":
            raise ContractError(f"{args.stage1} is not a stage-1 checkpoint")
        stage1_state = SimpleNamespace(system=lab.rebuild(ck))
    st = lab.stage2(args.seed, tlm_init=cfg.adapter.tlm_init, stage1_state=stage1_state)
    rep = lab.final_eval(st.system)
    run.report("align_stage2", {**experiments._summary(st), **_caption(rep),
                                "converge_step": experiments.convergence_probe(
                                    st.log, cfg.stages.convergence_threshold)})


def cmd_train_baseline(args, cfg, run):
    lab = _lab(args, cfg, run)
    st = lab.baseline(args.seed)
    rep = lab.final_eval(st.system)
    run.report("train_baseline", {**experiments._summary(st), **_caption(rep),
                                  "converge_step": experiments.convergence_probe(
                                      st.log, cfg.stages.convergence_threshold)})


def cmd_ablate_table1(args, cfg, run):
    lab = _lab(args, cfg, run)
    rows = experiments.table1(lab, args.seed, args.steps)
    run.report("table1", rows, experiments.format_table(
        rows, ["group", "setting", "final_loss", "final_val_acc", "finite"],
        ["Ablation", "Setting", "Loss", "Val acc", "Finite"]))


def cmd_ablate_table3(args, cfg, run):
    lab = _lab(args, cfg, run)
    rows = experiments.table3(lab, args.seed)
    run.report("table3", rows, experiments.format_table(
        rows, ["language_only", "vision_language", "tlm_init", "cider", "final_val_acc"],
        ["Language-only", "Vision-language", "TLM init", "CIDEr", "Val acc"]))


def cmd_ablate_table4(args, cfg, run):
    lab = _lab(args, cfg, run)
    rows = experiments.table4(lab, args.seed, with_stage2=not args.stage1_only)
    run.report("table4", rows, experiments.format_table(
        rows, ["module", "layers", "stage1_val_acc", "cider"],
        ["Cross-attention module", "Layers", "Stage-1 val acc", "CIDEr"]))


def cmd_scale_study(args, cfg, run):
    lab = _lab(args, cfg, run)
    seeds = args.seeds or [args.seed]
    rows = experiments.scale_study(lab, seeds, tuple(args.sizes))
    run.report("scale_study", rows, experiments.format_table(
        rows, ["method", "encoder", "seed", "trainable_params", "total_params", "converge_step",
               "cider", "final_val_acc"],
        ["Method", "Encoder", "Seed", "Trainable", "Total", "Steps to thr.", "CIDEr", "Val acc"]))


def cmd_eval(args, cfg, run):
    lab = _lab(args, cfg, run)
    ck = ckpt_io.load(args.checkpoint)
    m = ck.metadata
    system = lab.rebuild(ck)
    rep = lab.final_eval(system, m.get("size_tag"), m.get("pretrain_mode"))
    rep = EvalReport(rep.tasks, ck.config_digest, ",".join(map(str, ck.tags)))
    (run.reports / "eval.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    rows = [{"task": k, **vars(v)} for k, v in rep.tasks.items()]
    print(experiments.format_table(rows, ["task", "cider", "exact_match", "token_accuracy", "n_samples"],
                                   ["Task", "CIDEr", "Exact match", "Token acc", "N"]))


def cmd_quantize_study(args, cfg, run):
    lab = _lab(args, cfg, run)
    base = None
    if args.baseline:
        ck = ckpt_io.load(args.baseline)
        if ck.metadata.get("kind") != "baseline":
            raise ContractError(f"{args.baseline} is not a baseline checkpoint")
        base = SimpleNamespace(system=lab.rebuild(ck), log=[{"loss": math.nan, "val_acc": None}])
    rows = experiments.quantize_study(lab, args.seed, base)
    run.report("quantize_study", rows, experiments.format_table(
        rows, ["setting", "temperature", "decay", "cider"],
        ["Setting", "Softmax Temp.", "Temp. Decay", "CIDEr"]))


def cmd_grad_check(args, cfg, run):
    results = gradcheck.run_all(args.seed, args.configs)
    rows = [{"check": r.name, "error": r.error, "tol": r.tol, "ok": r.ok} for r in results]
    run.report("grad_check", rows, experiments.format_table(
        rows, ["check", "error", "tol", "ok"], ["Check", "Rel. error", "Tolerance", "Pass"]))
    return 0 if all(r.ok for r in results) else 1


COMMANDS = {
    "gen-data": (cmd_gen_data, "export the shapes-world splits and vocabulary"),
    "pretrain-lm": (cmd_pretrain_lm, "language-only pretraining of both LMs"),
    "align-stage1": (cmd_align_stage1, "stage 1: cross-attention module + tiny LM decoder"),
    "align-stage2": (cmd_align_stage2, "stage 2: composite adapter into the frozen large LM"),
    "train-baseline": (cmd_train_baseline, "deep perceiver resampler into the frozen large LM"),
    "ablate-table1": (cmd_ablate_table1, "resampler design grid, smoke-trained"),
    "ablate-table3": (cmd_ablate_table3, "tiny-LM initialisation grid"),
    "ablate-table4": (cmd_ablate_table4, "cross-attention module grid"),
    "scale-study": (cmd_scale_study, "encoder sizes x adapter kinds"),
    "eval": (cmd_eval, "evaluate a checkpoint"),
    "quantize-study": (cmd_quantize_study, "gumbel-softmax quantized prefixes vs baseline"),
    "grad-check": (cmd_grad_check, "finite-difference gradient suite"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/default", help="run directory")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field, e.g. adapter.resampler.n_layers=6")
    p = argparse.ArgumentParser(prog="vlab", description="Progressive vision-language adapters at desk scale.")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=h) for name, (_, h) in COMMANDS.items()}
    parsers["align-stage2"].add_argument("--stage1", help="stage-1 checkpoint to continue from")
    parsers["ablate-table1"].add_argument("--steps", type=int, default=200)
    parsers["ablate-table4"].add_argument("--stage1-only", action="store_true")
    parsers["scale-study"].add_argument("--seeds", type=int, nargs="+")
    parsers["scale-study"].add_argument("--sizes", nargs="+", default=["S", "M", "L"], choices=["S", "M", "L"])
    parsers["eval"].add_argument("--checkpoint", required=True)
    parsers["quantize-study"].add_argument("--baseline", help="trained baseline checkpoint")
    parsers["grad-check"].add_argument("--configs", type=int, default=20,
                                       help="randomized end-to-end configurations")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)  # exits 2 on bad usage
    try:
        cfg = apply_overrides(load_config(args.config), args.set)
        run = RunDir(args.out, cfg)
        code = COMMANDS[args.command][0](args, cfg, run)
    except (ContractError, ConfigError, ShapeError, ValueError, OSError) as exc:
        print(f"vlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
