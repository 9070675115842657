"""SGD and AdamW over named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0


class SGD:
    """Plain gradient step, ``p -= lr * grad``."""

    def __init__(self, groups: list[ParamGroup]):
        self.groups = groups

    def step(self, lr_scale: float = 1.0) -> None:
        for g in self.groups:
            lr = np.float32(g.lr * lr_scale)
            for p in g.params:
                if p.grad is None:
                    continue
                if g.weight_decay:
                    p.data = p.data * np.float32(1.0 - g.lr * lr_scale * g.weight_decay)
                p.data = (p.data - lr * p.grad).astype(np.float32)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.grad = None


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}
        self.v = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for g in self.groups:
            lr = g.lr * lr_scale
            for p in g.params:
                if p.grad is None:
                    continue
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.b1
                m += (1 - self.b1) * p.grad
                v *= self.b2
                v += (1 - self.b2) * p.grad * p.grad
                upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
                data = p.data
                if g.weight_decay:
                    data = data * (1.0 - lr * g.weight_decay)
                p.data = (data - lr * upd).astype(np.float32)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.grad = None
