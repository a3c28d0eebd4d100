"""SGD with momentum over parameter groups that carry their own learning rate."""
from __future__ import annotations

from dataclasses import dataclass, field

from mdil.tensor import Parameter


@dataclass
class ParamGroup:
    params: list
    lr: float
    name: str = ""


@dataclass
class SGD:
    """``v <- momentum * v + g``; ``w <- w - lr * v`` per group.

    Gradients are cleared after every step. A group whose learning rate is
    exactly zero leaves its parameters bitwise untouched.
    """

    groups: list
    momentum: float = 0.9
    _velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        seen = set()
        for group in self.groups:
            if group.lr < 0:
                raise ValueError(f"group {group.name!r}: negative learning rate")
            for p in group.params:
                _check_trainable(p, group)
                if id(p) in seen:
                    raise ValueError(f"parameter {p.name} appears in two groups")
                seen.add(id(p))

    def step(self):
        for group in self.groups:
            for p in group.params:
                _check_trainable(p, group)
            if group.lr == 0:
                continue
            for p in group.params:
                if p.grad is None:
                    continue
                g = p.grad
                if self.momentum:
                    v = self._velocity.get(id(p))
                    v = g.copy() if v is None else self.momentum * v + g
                    self._velocity[id(p)] = v
                    g = v
                p.data -= p.data.dtype.type(group.lr) * g
        self.zero_grad()

    def zero_grad(self):
        for group in self.groups:
            for p in group.params:
                p.grad = None


def _check_trainable(p: Parameter, group: ParamGroup):
    if getattr(p, "frozen", False):
        raise ValueError(f"frozen parameter {p.name} in optimizer group {group.name!r}")
