"""Parameter registry, SGD/Adam updates and finite-difference gradient checks.

Gradients are produced by the hand-written backward passes of each model;
this module only stores them, applies updates and verifies them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError


class ParamSet:
    """Named float64 arrays with matching gradient buffers."""

    def __init__(self, arrays=None, frozen=()):
        self.values = {}
        self.grads = {}
        self.frozen = set(frozen)
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name, value):
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.values[name].shape:
            raise ValidationError(f"{name}: shape {value.shape} != {self.values[name].shape}")
        self.values[name][...] = value

    def __contains__(self, name):
        return name in self.values

    def names(self):
        return list(self.values)

    def trainable(self):
        return [k for k in self.values if k not in self.frozen]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def size(self):
        return sum(v.size for v in self.values.values())

    def flat(self):
        if not self.values:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.values.values()])

    def flat_grad(self):
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size():
            raise ValidationError(f"flat vector has {flat.size} entries, expected {self.size()}")
        pos = 0
        for v in self.values.values():
            v[...] = flat[pos : pos + v.size].reshape(v.shape)
            pos += v.size

    def copy(self):
        out = ParamSet({k: v.copy() for k, v in self.values.items()}, self.frozen)
        for k, g in self.grads.items():
            out.grads[k][...] = g
        return out

    def shapes(self):
        return {k: list(v.shape) for k, v in self.values.items()}


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.kind!r}")


def _check_shapes(p):
    for name, value in p.values.items():
        if p.grads[name].shape != value.shape:
            raise ValidationError(f"{name}: gradient shape {p.grads[name].shape} != {value.shape}")


def _decay(p, s):
    """Decoupled weight decay on weight arrays (scalars are left alone)."""
    if s.weight_decay:
        for name in p.trainable():
            if p.values[name].ndim:
                p.values[name] *= 1.0 - s.lr * s.weight_decay


def sgd_step(p, s):
    _check_shapes(p)
    _decay(p, s)
    for name in p.trainable():
        p.values[name] -= s.lr * p.grads[name]
    s.step += 1
    p.zero_grad()
    return p


def adam_step(p, s):
    _check_shapes(p)
    _decay(p, s)
    s.step += 1
    t = s.step
    for name in p.trainable():
        g = p.grads[name]
        m = s.m.setdefault(name, np.zeros_like(g))
        v = s.v.setdefault(name, np.zeros_like(g))
        if m.shape != g.shape or v.shape != g.shape:
            raise ValidationError(f"{name}: optimizer moment shape mismatch")
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * g * g
        m_hat = m / (1.0 - s.beta1**t)
        v_hat = v / (1.0 - s.beta2**t)
        p.values[name] -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
    p.zero_grad()
    return p


def step(p, s):
    return adam_step(p, s) if s.kind == "adam" else sgd_step(p, s)


def finite_diff_check(loss, p, eps=1e-5, names=None):
    """Compare ``p.grads`` against central differences of ``loss()``.

    ``loss`` takes no arguments and reads the current values of ``p``.
    Returns ``(max_rel_err, numeric_grads)``; the relative error per
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    numeric = {}
    worst = 0.0
    for name in names or p.names():
        value = p.values[name]
        flat = value.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            num[i] = (up - down) / (2.0 * eps)
        num = num.reshape(value.shape)
        ana = p.grads[name]
        rel = np.abs(ana - num) / np.maximum(1e-8, np.abs(ana) + np.abs(num))
        if rel.size:
            worst = max(worst, float(rel.max()))
        numeric[name] = num
    return worst, numeric
