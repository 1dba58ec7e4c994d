"""Perceiver resampler, attentional pooler and the resampler + tiny-LM adapter."""
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .lm import tlm_as_adapter_forward
from .nn import (
    Attention, FeedForward, LayerNorm, Linear, Module, add_time_embedding, const, normal,
)
from .tensor import Parameter, ShapeError, Tensor, add, concat, reshape

LN_MODES = ("none", "shared", "separate")
ADAPTER_KINDS = ("resampler_baseline", "attentional_pooler", "palm2_vadapter")


@dataclass
class ResamplerConfig:
    n_queries: int = 16
    query_dim: int = 64
    hidden_dim: int = 64  # width of the projected visual tokens and of cross-attention
    n_layers: int = 6
    ln_mode: str = "separate"
    final_ln: bool = False
    use_ffn: bool = True
    use_time_embedding: bool = True
    kv_concat_queries: bool = True
    heads: int = 4
    max_frames: int = 8
    vision_dim: int = 64
    out_dim: int = 64

    def validate(self):
        for name in ("n_queries", "query_dim", "hidden_dim", "n_layers", "heads", "max_frames",
                     "vision_dim", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"resampler.{name} must be >= 1")
        if self.ln_mode not in LN_MODES:
            raise ValueError(f"resampler.ln_mode must be one of {LN_MODES}, got {self.ln_mode!r}")
        if self.hidden_dim % self.heads:
            raise ValueError(f"resampler.hidden_dim {self.hidden_dim} not divisible by {self.heads} heads")
        if self.ln_mode == "shared" and self.query_dim != self.hidden_dim:
            raise ValueError("resampler.ln_mode shared needs query_dim == hidden_dim")
        return self


class ResamplerLayer(Module):
    def __init__(self, cfg, rng):
        qd, hd = cfg.query_dim, cfg.hidden_dim
        if cfg.ln_mode == "shared":
            self.ln_shared = LayerNorm(qd)
        elif cfg.ln_mode == "separate":
            self.ln_q = LayerNorm(qd)
            self.ln_kv = LayerNorm(hd)
        # queries joining the key/value set are lifted to the visual width
        if cfg.kv_concat_queries and qd != hd:
            self.latent_kv = Linear(qd, hd, rng)
        self.attn = Attention(qd, hd, hd, cfg.heads, rng)
        if cfg.use_ffn:
            if cfg.ln_mode != "none":
                self.ln_ffn = LayerNorm(qd)
            self.ffn = FeedForward(qd, rng)
        self.cfg = cfg

    def norms(self):
        mode = self.cfg.ln_mode
        if mode == "shared":
            return self.ln_shared, self.ln_shared
        if mode == "separate":
            return self.ln_q, self.ln_kv
        return None, None

    def __call__(self, x, inputs):
        ln_q, ln_kv = self.norms()
        q = ln_q(x) if ln_q else x
        kv = ln_kv(inputs) if ln_kv else inputs
        if self.cfg.kv_concat_queries:
            lat = self.latent_kv(q) if hasattr(self, "latent_kv") else q
            kv = concat([kv, lat], axis=1)
        x = x + self.attn(q, kv)
        if self.cfg.use_ffn:
            h = self.ln_ffn(x) if self.cfg.ln_mode != "none" else x
            x = x + self.ffn(h)
        return x


def _flatten_visual(visual, vision_dim, table=None):
    """(T, D), (F, N, D) or (B, F, N, D) -> (B, T', D) plus whether a batch
    axis was added.  Frame-shaped input gets the time embedding."""
    if hasattr(visual, "tokens_per_frame"):  # VisualTokens
        t = visual.tensor
        visual = reshape(t, (visual.frames, visual.tokens_per_frame, t.shape[-1]))
    if not isinstance(visual, Tensor):
        visual = const(visual)
    if visual.shape[-1] != vision_dim:
        raise ShapeError(f"visual tokens of width {visual.shape[-1]} vs adapter input {vision_dim}")
    unbatched = visual.ndim in (2, 3)
    if visual.ndim in (3, 4):
        if table is not None:
            visual = add_time_embedding(visual, table)
        else:
            visual = reshape(visual, visual.shape[:-3] + (visual.shape[-3] * visual.shape[-2], vision_dim))
    if visual.ndim == 2:
        visual = reshape(visual, (1,) + visual.shape)
    return visual, unbatched


class PerceiverResampler(Module):
    """Learnable queries cross-attending to (projected) visual tokens."""

    def __init__(self, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        self.queries = Parameter(normal(rng, (cfg.n_queries, cfg.query_dim), 0.02))
        if cfg.use_time_embedding:
            self.time_emb = Parameter(normal(rng, (cfg.max_frames, cfg.vision_dim), 0.02), decay=False)
        self.input_proj = Linear(cfg.vision_dim, cfg.hidden_dim, rng)
        self.layers = [ResamplerLayer(cfg, rng) for _ in range(cfg.n_layers)]
        if cfg.final_ln:
            self.ln_final = LayerNorm(cfg.query_dim)
        self.out_proj = Linear(cfg.query_dim, cfg.out_dim, rng)

    def __call__(self, visual):
        """Visual tokens -> (n_queries, out_dim), batched when the input is."""
        cfg = self.cfg
        table = self.time_emb if cfg.use_time_embedding else None
        inputs, unbatched = _flatten_visual(visual, cfg.vision_dim, table)
        inputs = self.input_proj(inputs)
        b = inputs.shape[0]
        x = add(const(np.zeros((b, cfg.n_queries, cfg.query_dim))), self.queries)
        for layer in self.layers:
            x = layer(x, inputs)
        if cfg.final_ln:
            x = self.ln_final(x)
        out = self.out_proj(x)
        return reshape(out, out.shape[1:]) if unbatched else out


def resampler_forward(visual, params):
    return params(visual)


class AttentionalPooler(Module):
    """One cross-attention from learnable queries to the visual tokens, then a
    LayerNorm.  The query bank is kept on the residual path so the pooler is
    exactly the one-layer, FFN-free, norm-free resampler with a final norm."""

    def __init__(self, cfg, rng):
        cfg = pooler_config(cfg)
        self.cfg = cfg
        self.queries = Parameter(normal(rng, (cfg.n_queries, cfg.query_dim), 0.02))
        self.input_proj = Linear(cfg.vision_dim, cfg.hidden_dim, rng)
        self.attn = Attention(cfg.query_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.heads, rng)
        self.ln = LayerNorm(cfg.query_dim)
        self.out_proj = Linear(cfg.query_dim, cfg.out_dim, rng)

    def __call__(self, visual):
        cfg = self.cfg
        inputs, unbatched = _flatten_visual(visual, cfg.vision_dim)
        inputs = self.input_proj(inputs)
        q = add(const(np.zeros((inputs.shape[0], cfg.n_queries, cfg.query_dim))), self.queries)
        out = self.out_proj(self.ln(q + self.attn(q, inputs)))
        return reshape(out, out.shape[1:]) if unbatched else out


def attentional_pooler_forward(visual, params):
    return params(visual)


def pooler_config(cfg):
    """The degenerate resampler configuration an attentional pooler equals."""
    return replace(cfg, n_layers=1, use_ffn=False, ln_mode="none", final_ln=True,
                   kv_concat_queries=False, use_time_embedding=False).validate()


def pooler_to_resampler_state(state):
    """Rename pooler tensors to the matching degenerate-resampler names."""
    rename = {"attn.": "layers.0.attn.", "ln.": "ln_final."}
    out = {}
    for name, arr in state.items():
        for old, new in rename.items():
            if name.startswith(old):
                name = new + name[len(old):]
                break
        out[name] = arr
    return out


class VAdapter(Module):
    """One-layer resampler -> tiny-LM trunk -> linear projection to the large LM."""

    def __init__(self, resampler, tlm, large_dim, rng):
        if resampler.cfg.out_dim != tlm.cfg.dim:
            raise ShapeError(f"resampler out_dim {resampler.cfg.out_dim} vs TLM dim {tlm.cfg.dim}")
        self.resampler = resampler
        self.tlm = tlm
        self.proj = Linear(tlm.cfg.dim, large_dim, rng)

    def trainable_parameters(self):
        """Resampler, TLM trunk and projection; TLM embeddings and head stay out."""
        out = [("resampler." + n, p) for n, p in self.resampler.named_parameters()]
        out += [("tlm." + n, p) for n, p in self.tlm.trunk_parameters()]
        out += [("proj." + n, p) for n, p in self.proj.named_parameters()]
        return out

    def __call__(self, visual):
        return tlm_as_adapter_forward(self.resampler(visual), self.tlm, self.proj)


def vadapter_forward(visual, resampler_params, tlm_params, proj_params):
    return tlm_as_adapter_forward(resampler_params(visual), tlm_params, proj_params)


@dataclass
class AdapterSpec:
    kind: str = "palm2_vadapter"
    resampler: ResamplerConfig = field(default_factory=lambda: ResamplerConfig(n_layers=1))
    tlm_checkpoint: str = ""
    allow_deep: bool = False  # lift the one-layer rule for the depth ablation

    def validate(self):
        if self.kind not in ADAPTER_KINDS:
            raise ValueError(f"adapter.kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")
        self.resampler.validate()
        if self.kind == "palm2_vadapter" and self.resampler.n_layers != 1 and not self.allow_deep:
            raise ValueError("palm2_vadapter expects a 1-layer resampler (set allow_deep to override)")
        return self


# --------------------------------------------------------------------------
# parameter counting
# --------------------------------------------------------------------------

def _linear(i, o):
    return i * o + o


def _attention(qd, kvd, hd, out):
    return _linear(qd, hd) + 2 * _linear(kvd, hd) + _linear(hd, out)


def _block(d):
    return 4 * d + _attention(d, d, d, d) + _linear(d, 4 * d) + _linear(4 * d, d)


def resampler_count(cfg):
    qd, hd = cfg.query_dim, cfg.hidden_dim
    per_layer = _attention(qd, hd, hd, qd)
    per_layer += {"none": 0, "shared": 2 * qd, "separate": 2 * qd + 2 * hd}[cfg.ln_mode]
    per_layer += _linear(qd, hd) if cfg.kv_concat_queries and qd != hd else 0
    if cfg.use_ffn:
        per_layer += _linear(qd, 4 * qd) + _linear(4 * qd, qd)
        per_layer += 2 * qd if cfg.ln_mode != "none" else 0
    n = cfg.n_queries * qd + _linear(cfg.vision_dim, hd) + cfg.n_layers * per_layer
    n += cfg.max_frames * cfg.vision_dim if cfg.use_time_embedding else 0
    n += 2 * qd if cfg.final_ln else 0
    return n + _linear(qd, cfg.out_dim)


def pooler_count(cfg):
    return resampler_count(pooler_config(cfg))


def lm_count(cfg, trunk_only=False):
    d = cfg.dim
    trunk = cfg.max_seq_len * d + cfg.depth * _block(d) + 2 * d
    if trunk_only:
        return trunk
    return trunk + cfg.vocab_size * d + _linear(d, cfg.vocab_size)


def encoder_count(cfg):
    d = cfg.dim
    return _linear(cfg.patch_size ** 2 * 3, d) + cfg.tokens_per_frame * d + cfg.depth * _block(d) + 2 * d


def count_parameters(spec, vit_cfg, tlm_cfg, large_cfg):
    """Closed-form {total, trainable_per_stage} for an adapter spec.

    ``total`` is what the deployed system holds: frozen encoder + frozen large
    LM + the adapter (for the composite adapter: resampler, TLM trunk and
    projection; the TLM head and token table are dropped after stage 1).
    """
    frozen = encoder_count(vit_cfg) + lm_count(large_cfg)
    r = spec.resampler
    if spec.kind == "palm2_vadapter":
        res = resampler_count(replace(r, out_dim=tlm_cfg.dim, vision_dim=vit_cfg.dim))
        stage2 = res + lm_count(tlm_cfg, trunk_only=True) + _linear(tlm_cfg.dim, large_cfg.dim)
        stages = {"stage1": res + lm_count(tlm_cfg), "stage2": stage2}
        return {"total": frozen + stage2, "trainable_per_stage": stages}
    count_fn = pooler_count if spec.kind == "attentional_pooler" else resampler_count
    n = count_fn(replace(r, out_dim=large_cfg.dim, vision_dim=vit_cfg.dim))
    return {"total": frozen + n, "trainable_per_stage": {"baseline": n}}


# --------------------------------------------------------------------------
# ablation grid over the resampler's components
# --------------------------------------------------------------------------

def table1_rows(base=None):
    """(group, label, ResamplerConfig) for the 4+3+3+3+3 component ablations.

    Rows vary one component group at a time around ``base`` (the strongest
    baseline: separate norms, no final norm, FFN and time embedding on).
    """
    base = base or ResamplerConfig()
    rows = []
    for ln_mode, final in (("none", True), ("shared", False), ("separate", False), ("separate", True)):
        rows.append(("LayerNorm", f"{ln_mode} / final {'yes' if final else 'no'}",
                     replace(base, ln_mode=ln_mode, final_ln=final)))
    for ffn, time in ((True, False), (False, True), (True, True)):
        rows.append(("FFN & Time", f"ffn {'yes' if ffn else 'no'} / time {'yes' if time else 'no'}",
                     replace(base, use_ffn=ffn, use_time_embedding=time)))
    for qd in (32, 64, 128):
        rows.append(("Query Dim", str(qd), replace(base, query_dim=qd)))
    for hd in (32, 64, 128):
        rows.append(("Hidden Dim", str(hd), replace(base, hidden_dim=hd)))
    for n in (1, 3, 6):
        rows.append(("#Layers", str(n), replace(base, n_layers=n)))
    for _, _, cfg in rows:
        cfg.validate()
    return rows


def config_dict(cfg):
    return asdict(cfg)
