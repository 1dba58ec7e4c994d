"""Time the numba kernels against their numpy twins, then one training step
under each backend.

    python3 benchmarks/bench_kernels.py --repeat 50
"""
import argparse
import time

import numpy as np

from vlab import _kernels, data
from vlab.adapters import PerceiverResampler, ResamplerConfig
from vlab.lm import LmConfig, Tokenizer, TransformerLM
from vlab.optim import OptimizerConfig
from vlab.pipeline import TaskData, baseline_plan, build_baseline, run_stage


def best_of(fn, repeat):
    fn()  # warm up (and compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng, rows, cols):
    x = rng.standard_normal((rows, cols)).astype(np.float32)
    dy = rng.standard_normal((rows, cols)).astype(np.float32)
    g = np.ones(cols, dtype=np.float32)
    b = np.zeros(cols, dtype=np.float32)
    y = _kernels.np_softmax_fwd(x)
    _, mean, rstd = _kernels.np_layernorm_fwd(x, g, b, 1e-5)
    tgt = rng.integers(0, cols, size=rows)
    mask = np.ones(rows, dtype=np.float32)
    _, lse = _kernels.np_xent_fwd(x, tgt, mask)[:2]
    img = np.ones((48, 48, 3), dtype=np.float32)
    return {
        "softmax_fwd": (x,),
        "softmax_fwd causal": (x, 64),
        "softmax_bwd": (y, dy),
        "layernorm_fwd": (x, g, b, 1e-5),
        "layernorm_bwd": (dy, x, mean, rstd, g),
        "xent_fwd": (x, tgt, mask),
        "xent_bwd": (x, tgt, mask, lse, 1.0),
        "render_disc": (img, 24.0, 24.0, 7.0, 1.0, 0.0, 0.0),
        "render_tri": (img, 24.0, 24.0, 7.0, 0.0, 1.0, 0.0),
    }


def train_step_time(backend, steps):
    _kernels.use_backend(backend)
    tok = Tokenizer.default()
    samples = data.dataset(0, "train", 64)
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((64, 1, 64, 64)).astype(np.float32)
    train = TaskData(samples, feats, tok)
    large = TransformerLM(LmConfig(len(tok), 96, 2, 4, 64), rng).requires_grad_(False)
    res = PerceiverResampler(ResamplerConfig(n_layers=6, query_dim=32, hidden_dim=32, out_dim=96), rng)
    system = build_baseline(res, large, tok)
    opt = OptimizerConfig(1e-3, 1, steps, batch_size=32)
    t0 = time.perf_counter()
    run_stage(baseline_plan(steps), system, train, None, opt, 0)
    return (time.perf_counter() - t0) / steps


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--rows", type=int, default=2048)
    ap.add_argument("--cols", type=int, default=64)
    ap.add_argument("--steps", type=int, default=10, help="training steps per backend (0 skips)")
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    cases = kernel_cases(rng, args.rows, args.cols)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, argv in cases.items():
        name = label.split()[0]
        t = {}
        for prefix in ("np_", "nb_"):
            fn = getattr(_kernels, prefix + name)
            t[prefix] = best_of(lambda: fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in argv]),
                                args.repeat)
        print(f"{label:<22}{t['np_'] * 1e3:>10.3f}{t['nb_'] * 1e3:>10.3f}{t['np_'] / t['nb_']:>8.2f}x")

    if args.steps:
        old = _kernels.backend
        per = {b: train_step_time(b, args.steps) for b in ("numpy", "numba")}
        _kernels.use_backend(old)
        print(f"\nbaseline training step (batch 32): numpy {per['numpy'] * 1e3:.1f} ms, "
              f"numba {per['numba'] * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
