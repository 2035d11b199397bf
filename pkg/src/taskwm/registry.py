"""Named parameter registry shared by all model components."""
from __future__ import annotations

from . import numcore as nc


class ParamRegistry:
    """Ordered name -> parameter map; the single source of truth for
    optimizers and checkpoints."""

    def __init__(self):
        self._params = {}

    def add(self, name, values, frozen=False):
        if name in self._params:
            raise ValueError("duplicate parameter name %r" % name)
        p = nc.parameter(values, name=name, frozen=frozen)
        self._params[name] = p
        return p

    def params(self):
        return list(self._params.values())

    def named(self):
        return dict(self._params)

    def get(self, name):
        return self._params[name]

    def trainable(self):
        return [p for p in self._params.values() if not p.frozen]

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def __len__(self):
        return len(self._params)
