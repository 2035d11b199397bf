"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from . import core as tp


def grad_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the DiffArray ``x`` to a scalar DiffArray and must be
    deterministic (seed any sampling inside).  The error per coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over coordinates is
    returned.  h = 1e-5 balances truncation against float64 round-off.
    """
    with tp.tape():
        y = f(x)
        if not np.isfinite(y.values).all():
            raise ValueError("grad_check: function value is not finite")
        tp.backward(y)
        analytic = (
            x.grad.copy() if x.grad is not None else np.zeros_like(x.values)
        )
        for p in _walk_leaves(x):
            p.zero_grad()
    flat = x.values.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).values)
        flat[i] = orig - h
        fm = float(f(x).values)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("grad_check: non-finite value at coordinate %d" % i)
        numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.ravel()
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(err.max())


def grad_check_params(f, params, h=1e-5):
    """Run grad_check treating each parameter in turn as the variable.

    ``f`` takes no arguments and evaluates the scalar loss from the current
    parameter values.  Returns the worst relative error across parameters.
    """
    worst = 0.0
    for p in params:
        if p.frozen:
            continue
        worst = max(worst, grad_check(lambda _x, _f=f: _f(), p, h=h))
    return worst


def _walk_leaves(x):
    yield x
