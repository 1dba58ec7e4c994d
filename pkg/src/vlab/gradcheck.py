"""Finite-difference gradient checks, per op and end to end, at float64.

Error measure: ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
over the checked coordinates, with central differences of step ``h``.
Per-op checks use the 3-point stencil; end-to-end checks use the 5-point one,
whose O(h^4) truncation error stays negligible even where the composed loss
is sharply curved.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapters import AttentionalPooler, PerceiverResampler, ResamplerConfig, VAdapter
from .lm import LmConfig, TransformerLM, lm_loss, tlm_as_adapter_forward
from .nn import Attention, FeedForward, Linear, add_time_embedding, attention, ffn
from .tensor import Parameter, Tensor, precision
from .vision import VisionEncoder, VitConfig

OP_TOL = 1e-4
E2E_TOL = 1e-3
H = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self):
        return bool(self.error < self.tol)


def _rel_error(a, n):
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _central(f, flat, i, h, points):
    old = flat[i]

    def at(d):
        flat[i] = old + d
        with T.no_grad():
            return f().item()

    try:
        if points == 3:
            return (at(h) - at(-h)) / (2 * h)
        return (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
    finally:
        flat[i] = old


def check(name, fn, params, rng, tol=OP_TOL, h=H, max_coords=None, numeric_fn=None, points=3):
    """Compare ``backward`` grads of scalar ``fn()`` with central differences
    on each Parameter of ``params`` (all coordinates, or a random sample).

    ``numeric_fn`` differentiates a surrogate instead, for ops whose gradient
    is defined by a relaxation (straight-through)."""
    numeric_fn = numeric_fn or fn
    for p in params:
        p.grad = None
    T.backward(fn())
    analytic, numeric = [], []
    for p in params:
        flat = p.data.reshape(-1)
        g = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            numeric.append(_central(numeric_fn, flat, i, h, points))
            analytic.append(g[i])
    return CheckResult(name, _rel_error(np.array(analytic), np.array(numeric)), tol)


def _p(rng, *shape, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale)


def _proj(out, rng):
    # random linear functional so every output element matters
    w = rng.standard_normal(out.shape)
    return T.sum_(T.mul(out, w))


def op_checks(seed=0):
    """One finite-difference check per differentiable op and layer."""
    rng = np.random.default_rng([seed, 900])
    res = []
    with precision(np.float64):
        a, b = _p(rng, 3, 4), _p(rng, 4)
        res.append(check("add (broadcast)", lambda: _proj(T.add(a, b), rng_fixed(1)), [a, b], rng))
        res.append(check("mul", lambda: _proj(T.mul(a, _p_fixed(a.shape, 2)), rng_fixed(3)), [a], rng))
        c = _p(rng, 3, 4)
        res.append(check("mul (tensor x tensor)", lambda: _proj(T.mul(a, c), rng_fixed(4)), [a, c], rng))
        res.append(check("exp", lambda: _proj(T.exp(a), rng_fixed(5)), [a], rng))
        pos = Parameter(rng.uniform(0.5, 2.0, (3, 4)))
        res.append(check("log", lambda: _proj(T.log(pos), rng_fixed(6)), [pos], rng))
        res.append(check("gelu", lambda: _proj(T.gelu(a), rng_fixed(7)), [a], rng))
        res.append(check("sum (axis)", lambda: _proj(T.sum_(a, axis=0), rng_fixed(8)), [a], rng))
        res.append(check("mean", lambda: _proj(T.mean(a, axis=1, keepdims=True), rng_fixed(9)), [a], rng))
        res.append(check("reshape/transpose",
                         lambda: _proj(T.transpose(T.reshape(a, (2, 6)), (1, 0)), rng_fixed(10)), [a], rng))
        res.append(check("concat", lambda: _proj(T.concat([a, c], axis=1), rng_fixed(11)), [a, c], rng))
        res.append(check("slice", lambda: _proj(a[1:, ::2], rng_fixed(12)), [a], rng))
        table = _p(rng, 6, 3)
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        res.append(check("embedding lookup (repeated ids)",
                         lambda: _proj(T.embedding_lookup(table, ids), rng_fixed(13)), [table], rng))
        x3, w = _p(rng, 2, 3, 4), _p(rng, 4, 5)
        res.append(check("matmul (batched x shared weight)", lambda: _proj(T.matmul(x3, w), rng_fixed(14)),
                         [x3, w], rng))
        y3 = _p(rng, 2, 4, 3)
        res.append(check("matmul (batched)", lambda: _proj(T.matmul(x3, y3), rng_fixed(15)), [x3, y3], rng))
        s = _p(rng, 2, 3, 5)
        res.append(check("softmax", lambda: _proj(T.softmax(s), rng_fixed(16)), [s], rng))
        res.append(check("softmax (causal)", lambda: _proj(T.softmax(s, causal=True), rng_fixed(17)), [s], rng))
        res.append(check("softmax (axis 0)", lambda: _proj(T.softmax(s, axis=0), rng_fixed(18)), [s], rng))
        g, bb = _p(rng, 4), _p(rng, 4)
        res.append(check("layer norm", lambda: _proj(T.layer_norm(x3, g, bb), rng_fixed(19)), [x3, g, bb], rng))
        logits = _p(rng, 2, 3, 7)
        tgt = np.array([[1, 6, 0], [3, 3, 2]])
        mask = np.array([[1, 0, 1], [1, 1, 0]])
        res.append(check("cross entropy (masked)", lambda: T.cross_entropy(logits, tgt, mask), [logits], rng))
        soft = _p(rng, 2, 5)
        hard = np.eye(5)[[1, 3]]
        res.append(check("straight-through (soft path)",
                         lambda: _proj(T.straight_through(hard, T.softmax(soft)), rng_fixed(20)), [soft], rng,
                         numeric_fn=lambda: _proj(T.softmax(soft), rng_fixed(20))))

        lr = np.random.default_rng([seed, 901])
        lin = Linear(4, 3, lr)
        res.append(check("linear", lambda: _proj(lin(x3), rng_fixed(21)), lin.parameters() + [x3], rng))
        att = Attention(4, 6, 8, 2, lr)
        kv = _p(lr, 2, 5, 6)
        res.append(check("cross attention", lambda: _proj(attention(x3, kv, att), rng_fixed(22)),
                         att.parameters() + [x3, kv], rng))
        sa = Attention(4, 4, 4, 2, lr)
        res.append(check("causal self attention", lambda: _proj(sa(x3, causal=True), rng_fixed(23)),
                         sa.parameters() + [x3], rng))
        ff = FeedForward(4, lr)
        res.append(check("feed-forward", lambda: _proj(ffn(x3, ff), rng_fixed(24)), ff.parameters() + [x3], rng))
        frames = _p(lr, 2, 3, 2, 4)
        tab = _p(lr, 4, 4)
        res.append(check("time embedding", lambda: _proj(add_time_embedding(frames, tab), rng_fixed(25)),
                         [frames, tab], rng))
    return res


def rng_fixed(k):
    return np.random.default_rng([12345, k])


def _p_fixed(shape, k):
    return Tensor(rng_fixed(k).standard_normal(shape))


# --------------------------------------------------------------------------
# end to end
# --------------------------------------------------------------------------

def _random_resampler_cfg(rng, vision_dim, out_dim, n_layers=None):
    heads = int(rng.choice([1, 2]))
    ln_mode = str(rng.choice(["none", "shared", "separate"]))
    qd = int(rng.choice([4, 6]))
    hd = qd if ln_mode == "shared" else heads * int(rng.choice([2, 4]))
    return ResamplerConfig(
        n_queries=int(rng.integers(1, 4)), query_dim=qd, hidden_dim=hd,
        n_layers=n_layers or int(rng.integers(1, 3)),
        ln_mode=ln_mode, final_ln=bool(rng.integers(2)),
        use_ffn=bool(rng.integers(2)), use_time_embedding=bool(rng.integers(2)),
        kv_concat_queries=bool(rng.integers(2)), heads=heads, max_frames=3,
        vision_dim=vision_dim, out_dim=out_dim,
    ).validate()


def _caption_batch(rng, vocab, vis_pos, length=6):
    tokens = rng.integers(4, vocab, size=(2, length))
    tokens[:, 0] = 1
    tokens[:, vis_pos] = 3
    mask = np.zeros(tokens.shape)
    mask[:, vis_pos + 1:] = 1  # a 3-token caption after the slot
    return tokens, mask


def _frozen_features(rng, frames):
    """A frozen random ViT over random pixels: (2, frames, 4, dim) features."""
    vcfg = VitConfig(image_size=12, patch_size=6, size_tag="S", heads=2, frames=frames)
    enc = VisionEncoder(vcfg, rng).requires_grad_(False)
    images = rng.random((2 * frames, 12, 12, 3))
    with T.no_grad():
        out = enc(images).data
    return out.reshape(2, frames, vcfg.tokens_per_frame, vcfg.dim)


def end_to_end_checks(n_configs=20, seed=0, max_coords=4):
    """Frozen encoder -> adapter -> frozen LM caption loss, on randomized
    configurations of every adapter kind; gradients w.r.t. adapter params."""
    res = []
    vocab = 9
    with precision(np.float64):
        for k in range(n_configs):
            rng = np.random.default_rng([seed, 950, k])
            frames = int(rng.integers(1, 3))
            feats = _frozen_features(rng, frames)
            vd = feats.shape[-1]
            large = TransformerLM(LmConfig(vocab, 8, 1, 2, 32), rng).requires_grad_(False)
            kind = ("palm2_vadapter", "resampler_baseline", "attentional_pooler")[k % 3]
            if kind == "palm2_vadapter":
                tlm = TransformerLM(LmConfig(vocab, 4, int(rng.integers(1, 3)), 2, 32,
                                             adapter_causal=bool(rng.integers(2))), rng)
                res_cfg = _random_resampler_cfg(rng, vd, 4, n_layers=1)
                adapter = VAdapter(PerceiverResampler(res_cfg, rng), tlm, 8, rng)
                params = [p for _, p in adapter.trainable_parameters()]
                for p in tlm.parameters():
                    p.requires_grad = False
                for p in params:
                    p.requires_grad = True
            elif kind == "resampler_baseline":
                adapter = PerceiverResampler(_random_resampler_cfg(rng, vd, 8), rng)
                params = adapter.parameters()
            else:
                adapter = AttentionalPooler(_random_resampler_cfg(rng, vd, 8), rng)
                params = adapter.parameters()
            tokens, mask = _caption_batch(rng, vocab, vis_pos=2)

            def fn():
                prefix = adapter(Tensor(feats))
                return lm_loss(large, tokens, mask, prefix, vis_pos=2)[0]

            res.append(check(f"end-to-end #{k} {kind}", fn, params, rng, E2E_TOL, max_coords=max_coords,
                             points=5))
    return res


def adapter_forward_check(seed=0):
    """TLM-as-adapter trunk plus projection, every coordinate."""
    with precision(np.float64):
        rng = np.random.default_rng([seed, 960])
        tlm = TransformerLM(LmConfig(9, 4, 1, 2, 16), rng)
        proj = Linear(4, 6, rng)
        vis = _p(rng, 3, 4)
        params = [p for _, p in tlm.trunk_parameters()] + proj.parameters() + [vis]
        return check("tiny LM as adapter + projection",
                     lambda: _proj(tlm_as_adapter_forward(vis, tlm, proj), rng_fixed(30)), params, rng,
                     OP_TOL)


def run_all(seed=0, n_configs=20):
    return op_checks(seed) + [adapter_forward_check(seed)] + end_to_end_checks(n_configs, seed)
