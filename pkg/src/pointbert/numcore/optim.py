"""AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericsError, ShapeError


@dataclass
class OptimState:
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(params, grads, state):
    """One in-place AdamW update.

    ``params`` and ``grads`` are parallel mappings name -> array. Decay is
    applied as ``p -= lr * wd * p`` before the bias-corrected Adam update.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        if m.shape != p.shape or g.shape != p.shape:
            raise ShapeError(f"moment/grad shape mismatch for {name}")
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Optimizer over a list of ``(name, Tensor)`` pairs.

    Names listed in ``no_decay`` (or 1-d parameters when
    ``decay_1d=False``) skip weight decay.
    """

    def __init__(self, named_params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay_1d=False):
        self.params = list(named_params)
        self.decay = OptimState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.plain = OptimState(lr=lr, betas=betas, eps=eps, weight_decay=0.0)
        self._decayed = {n for n, p in self.params if decay_1d or p.ndim > 1}

    @property
    def step_count(self):
        return self.decay.step

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr=None):
        if lr is not None:
            self.decay.lr = self.plain.lr = float(lr)
        groups = ((self.decay, [(n, p) for n, p in self.params if n in self._decayed]),
                  (self.plain, [(n, p) for n, p in self.params if n not in self._decayed]))
        for _, params in groups:
            for name, p in params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericsError(f"non-finite gradient for {name}")
        for state, params in groups:
            adamw_step({n: p.data for n, p in params}, {n: p.grad for n, p in params}, state)

    def state_arrays(self):
        out = {}
        for tag, state in (("decay", self.decay), ("plain", self.plain)):
            for name in state.exp_avg:
                out[f"optim.{tag}.m.{name}"] = state.exp_avg[name]
                out[f"optim.{tag}.v.{name}"] = state.exp_avg_sq[name]
        return out


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = 0.0


def lr_at(schedule, step):
    """Linear warmup from 0, then cosine decay to ``floor_lr`` at ``total_steps``."""
    s = schedule
    if step < 0:
        raise ValueError("step must be non-negative")
    if s.warmup_steps > 0 and step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    if step >= s.total_steps:
        return s.floor_lr
    span = s.total_steps - s.warmup_steps
    if span <= 0:
        return s.base_lr
    progress = (step - s.warmup_steps) / span
    return s.floor_lr + (s.base_lr - s.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
