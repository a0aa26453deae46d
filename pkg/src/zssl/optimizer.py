"""ScaledAdam and the Eden learning-rate schedule.

ScaledAdam takes the usual bias-corrected Adam direction and scales it by
the root-mean-square of the parameter tensor, so a tensor ``c`` times larger
receives an update ``c`` times larger.  Single-element tensors follow the
same rule with RMS = |theta|, so a scalar at zero only moves at the
``eps_rms`` floor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from zssl import numerics as nx


class NonFiniteGradient(ArithmeticError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name!r}; step rejected")
        self.name = name


@dataclass
class OptState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    eps_rms: float = 1e-5
    clip: float = 10.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array(float(self.step))}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]) -> None:
        self.step = int(tensors["opt.step"])
        self.m = {k[len("opt.m."):]: np.array(v) for k, v in tensors.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: np.array(v) for k, v in tensors.items() if k.startswith("opt.v.")}


def scaled_adam_step(params: Mapping[str, nx.Tensor], state: OptState, lr: float,
                     grads: Mapping[str, np.ndarray] | None = None,
                     lr_scale: Mapping[str, float] | None = None) -> dict[str, np.ndarray]:
    """Update ``params`` in place and return the applied deltas.

    Gradients come from ``grads`` when given, else from each tensor's
    ``.grad``; tensors without a gradient are left alone.  ``lr_scale``
    optionally multiplies ``lr`` per tensor.  All gradients are checked
    before anything is modified.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise nx.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    deltas = {}
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        direction = np.clip(m_hat / (np.sqrt(v_hat) + state.eps), -state.clip, state.clip)
        rms = max(float(np.sqrt(np.mean(p.data * p.data))), state.eps_rms)
        scale = lr_scale.get(name, 1.0) if lr_scale else 1.0
        delta = -lr * scale * rms * direction
        p.data = p.data + delta
        deltas[name] = delta
    return deltas


def zero_grads(params: Mapping[str, nx.Tensor]) -> None:
    for p in params.values():
        p.grad = None


@dataclass(frozen=True)
class EdenSchedule:
    base_lr: float = 0.045
    step_warmup: float = 7500.0
    epoch_warmup: float = 3.5

    def __post_init__(self):
        if self.step_warmup <= 0 or self.epoch_warmup <= 0:
            raise ValueError("Eden warmup constants must be positive")


def eden_lr(sched: EdenSchedule, step: float, epoch: float) -> float:
    """base_lr * ((s^2 + S^2)/S^2)^(-1/4) * ((e^2 + E^2)/E^2)^(-1/4)."""
    s_term = ((step ** 2 + sched.step_warmup ** 2) / sched.step_warmup ** 2) ** -0.25
    e_term = ((epoch ** 2 + sched.epoch_warmup ** 2) / sched.epoch_warmup ** 2) ** -0.25
    return sched.base_lr * s_term * e_term
