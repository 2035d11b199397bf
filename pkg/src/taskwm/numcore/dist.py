"""Diagonal-Gaussian distributions over differentiable arrays."""
from __future__ import annotations

import numpy as np

from . import core as tp

LOG_STD_MIN = float(np.log(0.1))
LOG_STD_MAX = float(np.log(10.0))


class DiagGaussian:
    """Diagonal Gaussian with log-std clamped to [log 0.1, log 10].

    ``mean`` and ``log_std`` are DiffArrays of identical shape; the trailing
    axis is the event dimension.  Construction applies the hard clamp, so any
    stored std lies in [0.1, 10].  Network heads should pass their raw output
    through ``squash_log_std`` first, which keeps values strictly inside the
    clamp and therefore keeps gradients alive.
    """

    __slots__ = ("mean", "log_std")

    def __init__(self, mean, log_std, _clamped=False):
        mean = mean if isinstance(mean, tp.DiffArray) else tp.DiffArray(mean)
        log_std = log_std if isinstance(log_std, tp.DiffArray) else tp.DiffArray(log_std)
        if mean.values.shape != log_std.values.shape:
            raise tp.ShapeError(
                "mean shape %s != log_std shape %s"
                % (list(mean.values.shape), list(log_std.values.shape))
            )
        self.mean = mean
        # _clamped callers (squashed heads) already guarantee the range
        self.log_std = log_std if _clamped else tp.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    @property
    def dim(self):
        return self.mean.values.shape[-1]

    def std(self):
        return tp.exp(self.log_std)

    def sample(self, rng):
        """Reparameterized draw: mean + std * eps with eps ~ N(0, I)."""
        eps = rng.normal(self.mean.values.shape)
        return tp.gauss_sample(self.mean, self.log_std, eps)

    def mode(self):
        return self.mean


def squash_log_std(raw):
    """Smoothly map an unconstrained head output into the open clamp interval.

    sigmoid keeps the result in (log 0.1, log 10) with nonzero gradient
    everywhere; a raw value of 0 lands exactly at std = 1.
    """
    return tp.squash_to(raw, LOG_STD_MIN, LOG_STD_MAX)


def gaussian_head(raw):
    """Split a [*, 2d] head output into DiagGaussian(d) (mean then raw log-std)."""
    d = raw.values.shape[-1]
    if d % 2 != 0:
        raise tp.ShapeError("gaussian head needs an even last dimension, got %d" % d)
    mean = tp.slice_last(raw, 0, d // 2)
    log_std = squash_log_std(tp.slice_last(raw, d // 2, d))
    return DiagGaussian(mean, log_std, _clamped=True)


def kl_rows(p, q):
    """Row-wise KL(p || q) of diagonal Gaussians, summed over the event axis.

    Closed form per coordinate:
        log(sq/sp) + (sp^2 + (mp - mq)^2) / (2 sq^2) - 1/2
    Returns a [m, 1] DiffArray for [m, d] inputs (a scalar for vector inputs).
    """
    if p.mean.values.shape[-1] != q.mean.values.shape[-1]:
        raise tp.ShapeError(
            "KL between different event dims: %d vs %d"
            % (p.mean.values.shape[-1], q.mean.values.shape[-1])
        )
    if p.mean.values.shape != q.mean.values.shape:
        raise tp.ShapeError(
            "KL between different shapes: %s vs %s"
            % (list(p.mean.values.shape), list(q.mean.values.shape))
        )
    return tp.kl_rows_fused(p.mean, p.log_std, q.mean, q.log_std)


def kl_diag_gaussian(p, q):
    """Total KL(p || q) as a scalar DiffArray (sums rows for batched inputs)."""
    rows = kl_rows(p, q)
    if rows.values.ndim == 0:
        return rows
    return tp.sum_(rows)
