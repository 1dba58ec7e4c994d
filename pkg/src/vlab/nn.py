"""Layers shared by the vision encoder, the language models and the adapters."""
import numpy as np

from .tensor import (
    Parameter, ShapeError, Tensor, add, concat, default_dtype, gelu, layer_norm as _ln,
    matmul, reshape, softmax, transpose,
)

LN_EPS = 1e-5


class Module:
    """Minimal parameter container; attributes that are Parameters, Modules or
    lists of Modules are discovered in definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def normal(rng, shape, std):
    return (rng.standard_normal(shape) * std).astype(default_dtype())


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, std=None, bias=True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(normal(rng, (in_dim, out_dim), std if std is not None else in_dim ** -0.5))
        self.bias = Parameter(np.zeros(out_dim, dtype=default_dtype())) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear: input {x.shape} vs weight {self.weight.shape}")
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim):
        self.dim = dim
        self.gain = Parameter(np.ones(dim, dtype=default_dtype()), decay=False)
        self.bias = Parameter(np.zeros(dim, dtype=default_dtype()), decay=False)

    def __call__(self, x):
        return layer_norm(x, self)


def layer_norm(x, params, eps=LN_EPS):
    return _ln(x, params.gain, params.bias, eps)


class Attention(Module):
    """Multi-head attention; query and key/value inputs may have different widths."""

    def __init__(self, q_dim, kv_dim, hidden_dim, heads, rng, out_dim=None):
        if hidden_dim % heads:
            raise ShapeError(f"attention: hidden dim {hidden_dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = hidden_dim // heads
        self.wq = Linear(q_dim, hidden_dim, rng)
        self.wk = Linear(kv_dim, hidden_dim, rng)
        self.wv = Linear(kv_dim, hidden_dim, rng)
        self.wo = Linear(hidden_dim, out_dim or q_dim, rng)

    def __call__(self, q_in, kv_in=None, causal=False):
        return attention(q_in, q_in if kv_in is None else kv_in, self, causal)


def _split_heads(x, heads, head_dim, axes):
    b, t = x.shape[0], x.shape[1]
    return transpose(reshape(x, (b, t, heads, head_dim)), axes)


def attention(q_in, kv_in, params, causal=False):
    """softmax(Q K^T / sqrt(head_dim)) V per head, concatenated and projected.

    Inputs are (T, D) or (B, T, D).  With ``causal`` query i sees keys <= i.
    """
    if kv_in.shape[-2] == 0:
        raise ShapeError("attention: empty key/value input")
    unbatched = q_in.ndim == 2
    if unbatched:
        q_in = reshape(q_in, (1,) + q_in.shape)
        kv_in = reshape(kv_in, (1,) + kv_in.shape)
    if q_in.shape[0] != kv_in.shape[0]:
        raise ShapeError(f"attention: batch of queries {q_in.shape} vs keys {kv_in.shape}")
    h, dh = params.heads, params.head_dim
    q = _split_heads(params.wq(q_in), h, dh, (0, 2, 1, 3))
    kt = _split_heads(params.wk(kv_in), h, dh, (0, 2, 3, 1))
    v = _split_heads(params.wv(kv_in), h, dh, (0, 2, 1, 3))
    scores = matmul(q, kt) * (dh ** -0.5)
    probs = softmax(scores, axis=-1, causal=causal)
    ctx = transpose(matmul(probs, v), (0, 2, 1, 3))
    ctx = reshape(ctx, (ctx.shape[0], ctx.shape[1], h * dh))
    out = params.wo(ctx)
    if unbatched:
        out = reshape(out, out.shape[1:])
    return out


class FeedForward(Module):
    def __init__(self, dim, rng, mult=4):
        self.expand = Linear(dim, mult * dim, rng)
        self.contract = Linear(mult * dim, dim, rng)

    def __call__(self, x):
        return ffn(x, self)


def ffn(x, params):
    return params.contract(gelu(params.expand(x)))


class Block(Module):
    """Pre-norm transformer block with self-attention."""

    def __init__(self, dim, heads, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, dim, dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)

    def __call__(self, x, causal=False):
        x = x + self.attn(self.ln1(x), causal=causal)
        return x + self.ffn(self.ln2(x))


class TimeEmbedding(Module):
    def __init__(self, max_frames, dim, rng):
        self.max_frames = max_frames
        self.table = Parameter(normal(rng, (max_frames, dim), 0.02), decay=False)

    def __call__(self, tokens):
        return add_time_embedding(tokens, self.table)


def add_time_embedding(tokens, table):
    """Add ``table[f]`` to every token of frame ``f`` and flatten the frames.

    ``tokens`` is (F, N, D) or (B, F, N, D); the result is (F*N, D) or
    (B, F*N, D).
    """
    frames = tokens.shape[-3]
    if frames > table.shape[0]:
        raise ShapeError(f"time embedding: {frames} frames exceed table of {table.shape[0]}")
    d = tokens.shape[-1]
    rows = table[:frames] if frames < table.shape[0] else table
    out = add(tokens, reshape(rows, (frames, 1, d)))
    return reshape(out, tokens.shape[:-3] + (frames * tokens.shape[-2], d))


def stack_batch(tensors):
    """Stack same-shape tensors along a new leading axis."""
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def const(array):
    return Tensor(np.asarray(array, dtype=default_dtype()))
