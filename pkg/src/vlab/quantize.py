"""Quantizing adapter outputs to vocabulary words with gumbel-softmax."""
from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module, const
from .tensor import (
    ContractError, ShapeError, Tensor, add, grad_enabled, matmul, mul, softmax, straight_through,
)


@dataclass
class QuantizerConfig:
    temperature_init: float = 2.0
    decay: str = "none"  # "none" or "exponential"
    decay_rate: float = 0.5 ** (1 / 500)  # halves every 500 steps
    hard_forward: bool = True

    def validate(self):
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be positive")
        if self.decay not in ("none", "exponential"):
            raise ValueError(f"decay must be none or exponential, got {self.decay!r}")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        return self


# (setting, temperature, decay) rows of the study, baseline first
STUDY_ROWS = (
    ("Baseline", None, None),
    ("Gumbel-Softmax", 1.0, "none"),
    ("Gumbel-Softmax", 2.0, "none"),
    ("Gumbel-Softmax", 2.0, "exponential"),
)


def temperature_at(step, cfg):
    if cfg.decay == "exponential":
        return cfg.temperature_init * cfg.decay_rate ** step
    return cfg.temperature_init


def gumbel_noise(rng, shape):
    u = rng.random(shape)
    # keep u inside (0, 1) so both logs stay finite
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, temperature, seed=None, hard=False, noise=None):
    """Relaxed categorical sample over the last axis.

    Returns ``(weights, hard_index)``: ``weights`` is ``softmax((logits + g) / t)``,
    or with ``hard`` the one-hot of ``hard_index`` carrying the soft gradient
    (straight-through).  ``seed`` (int or Generator) draws the noise ``g``;
    ``seed=None`` and ``noise=None`` means no noise, i.e. plain argmax.
    """
    if temperature <= 0:
        raise ContractError(f"gumbel temperature must be positive, got {temperature}")
    logits = logits if isinstance(logits, Tensor) else const(logits)
    if noise is None and seed is not None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        noise = gumbel_noise(rng, logits.shape)
    z = logits if noise is None else add(logits, np.asarray(noise, dtype=logits.dtype))
    soft = softmax(mul(z, 1.0 / temperature), axis=-1)
    index = soft.data.argmax(axis=-1)
    if not hard:
        return soft, index
    one_hot = np.zeros(soft.shape, dtype=soft.dtype)
    np.put_along_axis(one_hot, index[..., None], 1.0, axis=-1)
    return straight_through(one_hot, soft), index


def quantized_prefix(visual_embeddings, fc, qcfg, table, step, seed=None):
    """Project adapter outputs to vocabulary logits, gumbel-quantize them and
    read the language model's embedding rows as the prefix."""
    if visual_embeddings.shape[-1] != fc.in_dim:
        raise ShapeError(f"quantizer: embeddings {visual_embeddings.shape} vs FC input {fc.in_dim}")
    if fc.out_dim != table.shape[0]:
        raise ShapeError(f"quantizer: FC vocabulary {fc.out_dim} vs embedding table {table.shape}")
    weights, _ = gumbel_softmax(fc(visual_embeddings), temperature_at(step, qcfg), seed,
                                hard=qcfg.hard_forward)
    return matmul(weights, table)


class QuantizedAdapter(Module):
    """Adapter whose outputs are replaced by (mixtures of) LM word embeddings.

    Noise is drawn per step from ``(seed, step)`` while gradients are enabled;
    under ``no_grad`` (validation, decoding) it is off, so the choice is the
    pure argmax and evaluation is deterministic.
    """

    def __init__(self, adapter, vocab_size, table_fn, qcfg, rng, seed=0):
        self.adapter = adapter
        self.fc = Linear(adapter.cfg.out_dim, vocab_size, rng)
        self.qcfg = qcfg.validate()
        self.table_fn = table_fn  # callable, so the frozen table is not owned here
        self.seed = seed
        self.step = 0

    @property
    def cfg(self):
        return self.adapter.cfg

    def __call__(self, visual):
        seed = [self.seed, 77, self.step] if grad_enabled() else None
        return quantized_prefix(self.adapter(visual), self.fc, self.qcfg, self.table_fn(), self.step,
                                seed)
