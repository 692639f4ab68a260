"""SGD, Adam, AdamW and RMSProp over a dict of named arrays (updated in place)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("SGD", "Adam", "RMSProp", "AdamW")


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "Adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rms_decay: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not 1e-5 <= self.learning_rate <= 1e-3:
            raise ValueError(f"learning_rate {self.learning_rate} outside [1e-5, 1e-3]")


class Optimizer:
    def __init__(self, spec: OptimizerSpec):
        self.spec = spec
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, tensors: dict, grads: dict) -> None:
        self.t += 1
        for name, w in tensors.items():
            g = grads.get(name)
            if g is not None:
                self._update(name, w, g, self.t)

    def _update(self, name, w, g, t):
        s = self.spec
        lr = s.learning_rate
        if s.kind == "SGD":
            w -= lr * g
            return
        if s.kind == "RMSProp":
            v = self.v.setdefault(name, np.zeros_like(w))
            v *= s.rms_decay
            v += (1.0 - s.rms_decay) * g * g
            w -= lr * g / (np.sqrt(v) + s.eps)
            return
        m = self.m.setdefault(name, np.zeros_like(w))
        v = self.v.setdefault(name, np.zeros_like(w))
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * g * g
        if s.kind == "AdamW" and s.weight_decay:
            w -= lr * s.weight_decay * w
        mhat = m / (1.0 - s.beta1 ** t)
        vhat = v / (1.0 - s.beta2 ** t)
        w -= lr * mhat / (np.sqrt(vhat) + s.eps)


def optimizer_step(spec: OptimizerSpec, tensors: dict, grads: dict, t: int,
                   state: Optimizer | None = None) -> dict:
    """Functional form: returns updated copies. Pass ``state`` to carry moments across steps."""
    opt = state or Optimizer(spec)
    opt.t = t - 1
    out = {k: np.array(v, dtype=np.float64) for k, v in tensors.items()}
    opt.step(out, grads)
    return out
