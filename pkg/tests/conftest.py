import pytest

from vlab.config import from_dict
from vlab.experiments import Lab

TINY = {
    "data": {"train_size": 64, "val_size": 16, "test_size": 16, "text_size": 200},
    "encoder": {"image_size": 48, "patch_size": 12, "frames": 1, "pretrain_steps": 5},
    "tiny_lm": {"dim": 16, "depth": 1, "heads": 2, "max_seq_len": 64, "pretrain_steps": 10,
                "pretrain_warmup": 2, "pretrain_batch": 8},
    "large_lm": {"dim": 24, "depth": 1, "heads": 2, "max_seq_len": 64, "pretrain_steps": 10,
                 "pretrain_warmup": 2, "pretrain_batch": 8},
    "adapter": {"resampler": {"n_queries": 4, "query_dim": 16, "hidden_dim": 16, "heads": 2},
                "baseline_layers": 2},
    "optimizer": {"warmup_steps": 2, "batch_size": 8},
    "stages": {"stage1_steps": 6, "stage2_steps": 6, "baseline_steps": 6, "val_every": 3, "log_every": 2},
    "eval": {"max_new": 8, "batch_size": 16},
}


def tiny_config(**sections):
    raw = {k: dict(v) for k, v in TINY.items()}
    for k, v in sections.items():
        raw.setdefault(k, {}).update(v)
    return from_dict(raw)


@pytest.fixture(scope="session")
def tiny_lab():
    return Lab(tiny_config())


def pytest_terminal_summary(terminalreporter):
    # repeat the acceptance verdicts after pytest's own summary
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
