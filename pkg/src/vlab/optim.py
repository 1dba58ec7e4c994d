"""AdamW with warm-up / linear-decay learning rate and global-norm clipping."""
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, ShapeError


@dataclass
class OptimizerConfig:
    base_lr: float = 5e-4
    warmup_steps: int = 1000
    total_steps: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 64
    grad_clip: float = 1.0

    def validate(self):
        for name in ("base_lr", "total_steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be below total_steps ({self.total_steps})")
        return self


def lr_at(step, cfg):
    """Linear 0 -> base_lr over warm-up, then linear base_lr -> 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    return cfg.base_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def adamw_step(param, grad, m, v, step, lr, cfg, decay=True):
    """One in-place AdamW update of arrays ``param``, ``m``, ``v`` (step >= 1)."""
    if step < 1:
        raise ContractError("adamw step counter starts at 1")
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError(f"adamw: param {param.shape} grad {grad.shape} moments {m.shape}/{v.shape}")
    b1, b2 = cfg.beta1, cfg.beta2
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    update = mhat / (np.sqrt(vhat) + cfg.eps)
    if decay and cfg.weight_decay:
        update = update + cfg.weight_decay * param
    param -= (lr * update).astype(param.dtype)


def clip_grad_norm(params, max_norm):
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


class AdamW:
    def __init__(self, named_params, cfg):
        self.cfg = cfg
        self.params = list(named_params)
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr):
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.m[name], self.v[name], self.t, lr, self.cfg,
                       decay=getattr(p, "decay", True))

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_arrays(self):
        out = {}
        for n in self.m:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays, t):
        for n in self.m:
            self.m[n] = np.array(arrays[f"opt.m.{n}"], dtype=self.m[n].dtype)
            self.v[n] = np.array(arrays[f"opt.v.{n}"], dtype=self.v[n].dtype)
        self.t = t
