"""Decoder-only transformer LM: tiny LM (adapter-to-be), large frozen LM, decoding."""
import re
from dataclasses import dataclass

import numpy as np

from . import data
from .nn import Block, LayerNorm, Linear, Module, normal
from .optim import AdamW, clip_grad_norm, lr_at
from .tensor import (
    ContractError, Parameter, ShapeError, add, backward, concat, cross_entropy,
    embedding_lookup, no_grad, reshape,
)

PAD, BOS, EOS, VIS = "<PAD>", "<BOS>", "<EOS>", "<VIS>"
SPECIALS = (PAD, BOS, EOS, VIS)
_ATTACH = {"?", ".", ",", ":"}
_TOKEN_RE = re.compile(r"<[A-Z]+>|[A-Za-z]+|\d|[^\sA-Za-z\d]")

PROMPT_WORDS = (
    "Describe", "the", "following", "Answer", "question", "given", "images",
    "Given", "Question", "in", "exactly", "one", "word",
)
GRAMMAR_WORDS = (
    "a", "above", "below", "left", "right", "of", "and", "moving", "up", "down",
    "what", "color", "is", "shape", "how", "many", "objects", "which", "direction", "it",
)


class Tokenizer:
    """Closed-vocabulary word tokenizer; id = position in the sorted word list."""

    def __init__(self, words):
        self.itos = sorted(set(words))
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for s in SPECIALS:
            if s not in self.stoi:
                raise ValueError(f"vocabulary lacks special token {s}")
        self.pad_id, self.bos_id = self.stoi[PAD], self.stoi[BOS]
        self.eos_id, self.vis_id = self.stoi[EOS], self.stoi[VIS]

    @classmethod
    def default(cls):
        words = set(SPECIALS) | set(PROMPT_WORDS) | set(GRAMMAR_WORDS)
        words |= set(data.COLORS) | set(data.SHAPES) | set(data.DIRECTIONS)
        words |= {str(d) for d in range(10)} | _ATTACH
        return cls(words)

    def __len__(self):
        return len(self.itos)

    def encode(self, text, allow_vis=False):
        ids = []
        for tok in _TOKEN_RE.findall(text):
            if tok == VIS and not allow_vis:
                raise ValueError("visual placeholder in plain text")
            if tok in SPECIALS and tok != VIS:
                raise ValueError(f"special token {tok} in text")
            if tok not in self.stoi:
                raise KeyError(f"out-of-vocabulary token {tok!r}")
            ids.append(self.stoi[tok])
        return ids

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            tok = self.itos[i]
            if out and tok in _ATTACH:
                out[-1] += tok
            else:
                out.append(tok)
        return " ".join(out)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("".join(w + "\n" for w in self.itos))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            words = f.read().split("\n")[:-1]
        tok = cls(words)
        if tok.itos != words:
            raise ValueError("vocabulary file is not a sorted, duplicate-free word list")
        return tok


@dataclass
class LmConfig:
    vocab_size: int = 0
    dim: int = 64
    depth: int = 2
    heads: int = 4
    max_seq_len: int = 128
    size_tag: str = "tiny"
    adapter_causal: bool = True


class TransformerLM(Module):
    def __init__(self, cfg, rng):
        if cfg.vocab_size <= 0:
            raise ValueError("LmConfig.vocab_size must be set")
        self.cfg = cfg
        self.tok_emb = Parameter(normal(rng, (cfg.vocab_size, cfg.dim), 0.02), decay=False)
        self.pos_emb = Parameter(normal(rng, (cfg.max_seq_len, cfg.dim), 0.02), decay=False)
        self.blocks = [Block(cfg.dim, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.vocab_size, rng, std=0.02)

    def trunk_parameters(self):
        """(name, param) pairs of everything except token embeddings and LM head."""
        return [(n, p) for n, p in self.named_parameters()
                if not n.startswith(("tok_emb", "head."))]

    def embed(self, token_ids, prefix=None, vis_pos=-1):
        token_ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
        b = token_ids.shape[0]
        if prefix is None:
            x = embedding_lookup(self.tok_emb, token_ids)
        else:
            if prefix.ndim == 2:
                prefix = reshape(prefix, (1,) + prefix.shape)
            if prefix.shape[0] != b or prefix.shape[-1] != self.cfg.dim:
                raise ShapeError(f"prefix {prefix.shape} vs tokens {token_ids.shape} / dim {self.cfg.dim}")
            if vis_pos is not None and vis_pos >= 0:
                parts = [token_ids[:, :vis_pos], None, token_ids[:, vis_pos + 1:]]
            else:
                parts = [None, token_ids]
            pieces = []
            for part in parts:
                if part is None:
                    pieces.append(prefix)
                elif part.shape[1]:
                    pieces.append(embedding_lookup(self.tok_emb, part))
            x = concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]
        return self.add_positions(x)

    def add_positions(self, x):
        t = x.shape[1]
        if t > self.cfg.max_seq_len:
            raise ContractError(f"sequence of {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        return add(x, self.pos_emb[:t])

    def trunk(self, x, causal=True):
        for blk in self.blocks:
            x = blk(x, causal=causal)
        return self.ln_f(x)

    def __call__(self, token_ids, prefix=None, vis_pos=-1):
        return self.head(self.trunk(self.embed(token_ids, prefix, vis_pos)))


def lm_forward(prefix, token_ids, params, vis_pos=-1):
    """Logits for every position of ``[prefix || token embeddings]``.

    When ``token_ids`` contain the VIS id at column ``vis_pos`` the prefix is
    spliced in at that slot instead of being prepended.
    """
    return params(token_ids, prefix, vis_pos)


def expanded_targets(tokens, loss_mask, prefix_len=0, vis_pos=-1):
    """Next-token targets/mask aligned with the logits of ``tokens[:, :-1]``
    after the VIS slot is expanded to ``prefix_len`` rows."""
    tgt = tokens[:, 1:]
    mask = np.asarray(loss_mask, dtype=np.float32)[:, 1:]
    if prefix_len:
        at, extra = (vis_pos, prefix_len - 1) if vis_pos >= 0 else (0, prefix_len)
        if extra:
            tgt = np.insert(tgt, [at] * extra, 0, axis=1)
            mask = np.insert(mask, [at] * extra, 0.0, axis=1)
    return tgt, mask


def lm_loss(model, tokens, loss_mask, prefix=None, vis_pos=-1):
    logits = model(tokens[:, :-1], prefix, vis_pos)
    p = 0 if prefix is None else prefix.shape[-2]
    tgt, mask = expanded_targets(tokens, loss_mask, p, vis_pos)
    return cross_entropy(logits, tgt, mask), logits, tgt, mask


def greedy_decode(prefix, prompt_ids, params, max_new, stop_id, vis_pos=-1):
    """Append argmax tokens until ``stop_id`` or ``max_new`` tokens.

    ``prompt_ids`` is (B, L) with identical length rows; returns one list of
    generated ids per row, excluding the stop token.
    """
    if max_new < 1:
        raise ContractError("max_new must be >= 1")
    tokens = np.atleast_2d(np.asarray(prompt_ids, dtype=np.int64))
    b = tokens.shape[0]
    out = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    with no_grad():
        for _ in range(max_new):
            logits = params(tokens, prefix, vis_pos)
            nxt = logits.data[:, -1].argmax(axis=-1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == stop_id:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    return out


def tlm_as_adapter_forward(visual, tlm, proj):
    """Run the TLM trunk (no LM head) over visual tokens and project the
    final hidden states to the large LM width."""
    if visual.shape[-1] != tlm.cfg.dim:
        raise ShapeError(f"visual tokens {visual.shape} vs TLM dim {tlm.cfg.dim}")
    unbatched = visual.ndim == 2
    x = reshape(visual, (1,) + visual.shape) if unbatched else visual
    h = tlm.trunk(tlm.add_positions(x), causal=tlm.cfg.adapter_causal)
    out = proj(h)
    return reshape(out, out.shape[1:]) if unbatched else out


def text_batches(docs, tokenizer, batch_size, seed, step):
    """Deterministic LM batch for ``step``: BOS doc EOS, right padded."""
    rng = np.random.default_rng([seed, 11, step])
    pick = rng.integers(0, len(docs), size=batch_size)
    rows = [[tokenizer.bos_id] + tokenizer.encode(docs[i]) + [tokenizer.eos_id] for i in pick]
    width = max(len(r) for r in rows)
    tokens = np.full((batch_size, width), tokenizer.pad_id, dtype=np.int64)
    mask = np.zeros((batch_size, width), dtype=np.float32)
    for i, r in enumerate(rows):
        tokens[i, :len(r)] = r
        mask[i, 1:len(r)] = 1.0
    return tokens, mask


def pretrain_tlm(docs, cfg, opt_cfg, seed, tokenizer, model=None, log=None):
    """Next-token training on text only; the language-only pretraining stage.

    Used for the tiny LM and, with a larger ``cfg``, for the frozen large LM.
    Returns ``(model, losses)``.
    """
    opt_cfg.validate()
    if model is None:
        model = TransformerLM(cfg, np.random.default_rng([seed, 101]))
    opt = AdamW(model.named_parameters(), opt_cfg)
    losses = []
    for step in range(1, opt_cfg.total_steps + 1):
        tokens, mask = text_batches(docs, tokenizer, opt_cfg.batch_size, seed, step)
        loss, *_ = lm_loss(model, tokens, mask)
        backward(loss)
        clip_grad_norm(model.parameters(), opt_cfg.grad_clip)
        lr = lr_at(step, opt_cfg)
        opt.step(lr)
        opt.zero_grad()
        losses.append(loss.item())
        if log is not None:
            log(step, loss.item(), lr)
    return model, losses


def perplexity(model, docs, tokenizer, batch_size=64):
    total, count = 0.0, 0.0
    with no_grad():
        for lo in range(0, len(docs), batch_size):
            chunk = docs[lo:lo + batch_size]
            rows = [[tokenizer.bos_id] + tokenizer.encode(d) + [tokenizer.eos_id] for d in chunk]
            width = max(len(r) for r in rows)
            tokens = np.full((len(rows), width), tokenizer.pad_id, dtype=np.int64)
            mask = np.zeros(tokens.shape, dtype=np.float32)
            for i, r in enumerate(rows):
                tokens[i, :len(r)] = r
                mask[i, 1:len(r)] = 1
            loss, *_ = lm_loss(model, tokens, mask)
            n = mask[:, 1:].sum()
            total += loss.item() * n
            count += n
    return float(np.exp(total / count))

