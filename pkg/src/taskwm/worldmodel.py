"""Recurrent state-space latent dynamics.

State = deterministic GRU hidden part h plus a stochastic sample s drawn from
a diagonal-Gaussian head.  The recurrent update consumes only (s, a); the
observation enters through the posterior head, so prior (imagination) and
posterior (filtering) rollouts share h given the same sample/action history.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc


@dataclass
class LatentState:
    h: nc.DiffArray  # [B, d_h]
    s: nc.DiffArray  # [B, d_s]
    s_dist: nc.DiagGaussian

    def feature(self):
        """Full downstream state concat[h, s] of width d_h + d_s."""
        return nc.concat([self.h, self.s], axis=-1)


@dataclass
class WorldModelParams:
    gru_w_ih: nc.DiffArray
    gru_b_ih: nc.DiffArray
    gru_w_hh: nc.DiffArray
    gru_b_hh: nc.DiffArray
    prior_w: nc.DiffArray
    prior_b: nc.DiffArray
    post_w: nc.DiffArray
    post_b: nc.DiffArray
    embed_w: nc.DiffArray
    embed_b: nc.DiffArray
    d_h: int
    d_s: int


def init_world_model(reg, rng, obs_dim, act_dim, d_h, d_s, d_embed):
    def lin(name, fi, fo):
        return (
            reg.add("world.%s.w" % name, rng.normal((fi, fo)) / np.sqrt(fi)),
            reg.add("world.%s.b" % name, np.zeros(fo)),
        )

    in_dim = d_s + act_dim
    gw_ih = reg.add("world.gru.w_ih", rng.normal((in_dim, 3 * d_h)) / np.sqrt(in_dim))
    gb_ih = reg.add("world.gru.b_ih", np.zeros(3 * d_h))
    gw_hh = reg.add("world.gru.w_hh", rng.normal((d_h, 3 * d_h)) / np.sqrt(d_h))
    gb_hh = reg.add("world.gru.b_hh", np.zeros(3 * d_h))
    pw, pb = lin("prior", d_h, 2 * d_s)
    qw, qb = lin("post", d_h + d_embed, 2 * d_s)
    ew, eb = lin("embed", obs_dim, d_embed)
    return WorldModelParams(gw_ih, gb_ih, gw_hh, gb_hh, pw, pb, qw, qb, ew, eb, d_h, d_s)


def initial_state(params, batch):
    """h = 0, s = 0, s_dist = N(0, 0.1 I) with the std at the clamp floor."""
    h = nc.constant(np.zeros((batch, params.d_h)))
    s = nc.constant(np.zeros((batch, params.d_s)))
    dist = nc.DiagGaussian(
        np.zeros((batch, params.d_s)),
        np.full((batch, params.d_s), nc.LOG_STD_MIN),
    )
    return LatentState(h, s, dist)


def _recur(params, prev, action):
    x = nc.concat([prev.s, action], axis=-1)
    h = nc.gru_cell(
        x, prev.h, params.gru_w_ih, params.gru_b_ih, params.gru_w_hh, params.gru_b_hh
    )
    return h, None


def _advance(params, prev, action):
    h, _ = _recur(params, prev, action)
    prior = nc.gaussian_head(nc.affine(h, params.prior_w, params.prior_b))
    return h, prior


def wm_step(params, prev, action, obs, rng):
    """Filtering step: returns (state, prior, posterior); the new state's
    sample is a reparameterized draw from the posterior."""
    obs = obs if isinstance(obs, nc.DiffArray) else nc.constant(obs)
    if not np.isfinite(obs.values).all():
        raise ValueError("non-finite observation passed to wm_step")
    action = action if isinstance(action, nc.DiffArray) else nc.constant(action)
    if not np.isfinite(action.values).all():
        raise ValueError("non-finite action passed to wm_step")
    h, prior = _advance(params, prev, action)
    embed = nc.affine(obs, params.embed_w, params.embed_b)
    post = nc.gaussian_head(
        nc.affine(nc.concat([h, embed], axis=-1), params.post_w, params.post_b)
    )
    s = post.sample(rng)
    return LatentState(h, s, post), prior, post


def imagine_step(params, prev, action, rng):
    """Observation-free step: same recurrence, sample drawn from the prior."""
    action = action if isinstance(action, nc.DiffArray) else nc.constant(action)
    h, prior = _advance(params, prev, action)
    s = prior.sample(rng)
    return LatentState(h, s, prior), prior


def posterior_scan(params, observations, actions, rng):
    """Filter a batch of sequences.

    observations: [B, L, obs_dim], actions: [B, L-1, act_dim].  Step t uses
    action t-1 (zeros for the first step) and conditions on observation t.
    Returns (states, prior_all, post_all).

    Equivalent to repeated wm_step, but the observation embedding and the
    prior heads are evaluated batched across time (they do not feed the
    recurrence, so the values are identical), and the prior/posterior pairs
    come back as single [L*B, d_s] stacked Gaussians in t-major order.
    """
    b, length, obs_dim = observations.shape
    if not np.isfinite(observations).all():
        raise ValueError("non-finite observation passed to posterior_scan")
    act_dim = actions.shape[-1] if actions.size else 1
    state = initial_state(params, b)
    flat_obs = nc.constant(
        np.ascontiguousarray(np.swapaxes(observations, 0, 1)).reshape(length * b, obs_dim)
    )
    embed_all = nc.affine(flat_obs, params.embed_w, params.embed_b)
    states, posts = [], []
    zero_a = np.zeros((b, act_dim))
    hs = []
    for t in range(length):
        a = zero_a if t == 0 else actions[:, t - 1]
        a = a if isinstance(a, nc.DiffArray) else nc.constant(a)
        h, _lazy = _recur(params, state, a)
        embed = nc.slice_rows(embed_all, t * b, (t + 1) * b)
        post = nc.gaussian_head(
            nc.affine(nc.concat([h, embed], axis=-1), params.post_w, params.post_b)
        )
        s = post.sample(rng)
        state = LatentState(h, s, post)
        states.append(state)
        posts.append(post)
        hs.append(h)
    h_all = nc.concat(hs, axis=0)
    prior_all = nc.gaussian_head(nc.affine(h_all, params.prior_w, params.prior_b))
    post_all = stack_gaussians(posts)
    return states, prior_all, post_all


def stack_gaussians(dists):
    """Concatenate per-step [B, d] Gaussians into one [T*B, d] Gaussian
    (t-major order), preserving gradients."""
    mean = nc.concat([d.mean for d in dists], axis=0)
    log_std = nc.concat([d.log_std for d in dists], axis=0)
    return nc.DiagGaussian(mean, log_std)


def dynamics_loss(prior_all, post_all, steps, free_bits=1.0):
    """Sum over steps of max(KL(post || prior), free_bits), averaged over the
    batch.  Accepts the stacked [steps*B, d_s] prior/posterior Gaussians from
    posterior_scan.  Returns (loss, diagnostics) with the pre-clamp mean KL."""
    kl = nc.kl_rows(post_all, prior_all)  # [T*B, 1]
    clamped = nc.clamp(kl, lo=free_bits)
    loss = nc.mul(nc.mean_(clamped), float(steps))
    diag = {
        "kl_mean": float(kl.values.mean()),
        "kl_clamped_mean": float(clamped.values.mean()),
    }
    return loss, diag
