"""Task-aware behavior learning in the fused latent space.

Trajectories are imagined entirely in latent space: the policy acts on the
fused latent, the world model's prior advances the state, and the decoded
semantic embedding replaces the real one (imagination has no observations).
A text-conditioned imagination chain, seeded from the task latent and rolled
forward by moment propagation along the same actions, provides both a
per-step cosine reward and the distribution sequence used for trajectory
alignment.

This module deliberately has no access to environment rewards; the only
reward here is latent similarity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from . import worldmodel as wm
from . import fusion as fu
from . import encoders as enc


class RolloutError(RuntimeError):
    """Raised when an imagined trajectory left the finite domain."""


@dataclass
class PolicyParams:
    trunk_w: nc.DiffArray
    trunk_b: nc.DiffArray
    mean_w: nc.DiffArray
    mean_b: nc.DiffArray
    lstd_w: nc.DiffArray
    lstd_b: nc.DiffArray


def init_policy(reg, rng, d_z, act_dim, hidden=64):
    # zero-init output heads: the initial policy emits tanh(eps) with unit
    # pre-squash std, and its mean action is exactly zero
    return PolicyParams(
        reg.add("policy.trunk.w", rng.normal((d_z, hidden)) / np.sqrt(d_z)),
        reg.add("policy.trunk.b", np.zeros(hidden)),
        reg.add("policy.mean.w", np.zeros((hidden, act_dim))),
        reg.add("policy.mean.b", np.zeros(act_dim)),
        reg.add("policy.lstd.w", np.zeros((hidden, act_dim))),
        reg.add("policy.lstd.b", np.zeros(act_dim)),
    )


def policy_dist(params, z):
    """Pre-squash action distribution."""
    h = nc.gelu(nc.affine(z, params.trunk_w, params.trunk_b))
    mean = nc.affine(h, params.mean_w, params.mean_b)
    log_std = nc.squash_log_std(nc.affine(h, params.lstd_w, params.lstd_b))
    return nc.DiagGaussian(mean, log_std)


def policy_sample(params, z, rng):
    """Reparameterized tanh-squashed action in (-1, 1)^act_dim."""
    return nc.tanh(policy_dist(params, z).sample(rng))


def policy_mean_action(params, z):
    return nc.tanh(policy_dist(params, z).mean)


@dataclass
class CriticParams:
    w1: nc.DiffArray
    b1: nc.DiffArray
    w2: nc.DiffArray
    b2: nc.DiffArray


def init_critic(reg, rng, d_z, hidden=64):
    return CriticParams(
        reg.add("critic.l1.w", rng.normal((d_z, hidden)) / np.sqrt(d_z)),
        reg.add("critic.l1.b", np.zeros(hidden)),
        reg.add("critic.head.w", np.zeros((hidden, 1))),
        reg.add("critic.head.b", np.zeros(1)),
    )


def critic_value(params, z):
    h = nc.gelu(nc.affine(z, params.w1, params.b1))
    return nc.affine(h, params.w2, params.b2)


@dataclass
class TextImaginationParams:
    w: nc.DiffArray
    b: nc.DiffArray


def init_text_imagination(reg, rng, d_z, act_dim):
    fan_in = d_z + act_dim
    return TextImaginationParams(
        reg.add("text_im.w", rng.normal((fan_in, 2 * d_z)) / np.sqrt(fan_in)),
        reg.add("text_im.b", np.zeros(2 * d_z)),
    )


def text_transition(params, z_tau, action):
    return nc.gaussian_head(nc.affine(nc.concat([z_tau, action], axis=-1), params.w, params.b))


def text_rollout(params, z_tau0, actions, rng=None, sample=False):
    """Task-conditioned imagination along a fixed action sequence.

    Returns H+1 DiagGaussians; element 0 stands in for the point mass at the
    task latent (std pinned to the clamp floor).  By default the mean is fed
    forward (moment propagation); ``sample=True`` draws instead.
    """
    b = z_tau0.values.shape[0]
    d = z_tau0.values.shape[1]
    dists = [
        nc.DiagGaussian(z_tau0, nc.constant(np.full((b, d), nc.LOG_STD_MIN)))
    ]
    cur = z_tau0
    for a in actions:
        dist = text_transition(params, cur, a)
        dists.append(dist)
        cur = dist.sample(rng) if sample else dist.mean
    return dists


def lift_prior(fusion_params, d_h, d_s, e_v, h, prior, w_sq):
    """Push the stochastic prior through the shared state->latent linear map.

    The mean is the fusion projection evaluated at the prior mean; the
    variance propagates diagonally through the squared weight block w_sq
    (precompute once per rollout via ``state_weight_sq``).
    """
    state_mean = nc.concat([h, prior.mean], axis=-1)
    if isinstance(fusion_params, fu.GatedFusionParams):
        mean = fu.fuse_initial(fusion_params, e_v, state_mean)
    else:
        mean = fu.additive_latent(fusion_params, e_v, state_mean)
    var_s = nc.exp(nc.mul(prior.log_std, 2.0))
    var_z = nc.add(nc.matmul(var_s, w_sq), 1e-12)
    return nc.DiagGaussian(mean, nc.mul(nc.log(var_z), 0.5))


def state_weight_sq(fusion_params, d_h, d_s):
    w = fu.stochastic_block_weight(fusion_params, d_h, d_s)
    return nc.mul(w, w)


@dataclass
class ImaginedTrajectory:
    zs: list  # H+1 latents [B, d_z]
    actions: list  # H actions [B, act_dim]
    rewards: list  # H rewards [B, 1]; rewards[h] = cos(z[h+1], text_mean[h+1])
    text_means: list  # H+1 task-imagined means [B, d_z]
    wm_dists: list  # H lifted prior distributions over the latent
    text_dists: list  # H+1 text-imagination distributions
    degenerate: int  # rows with near-zero norm in the cosine (flagged, not fatal)

    @property
    def horizon(self):
        return len(self.actions)


def rollout(model, state, e_v, tau, z0, horizon, rng, imagination_ev="decoded", gates=None):
    """Imagine ``horizon`` steps from a posterior state.

    Returns (zs, actions, wm_dists, states).  The semantic input for step
    h+1 is the decoded semantic head of z_h ("decoded") or the last real
    embedding held fixed ("frozen-last").
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    w_sq = state_weight_sq(model.fusion, model.dims.d_h, model.dims.d_s)
    if gates is None and model.gated:
        # the gate depends on tau only: compute once, reuse every step
        gates = [fu.gate_value(layer.gate, tau) for layer in model.fusion.layers]
    zs = [z0]
    actions = []
    wm_dists = []
    states = [state]
    z = z0
    for h in range(horizon):
        a = policy_sample(model.policy, z, rng)
        state, prior = wm.imagine_step(model.world, state, a, rng)
        ev_h = enc.decode_semantic(model.dec, z) if imagination_ev == "decoded" else e_v
        wm_dists.append(
            lift_prior(model.fusion, model.dims.d_h, model.dims.d_s, ev_h, state.h, prior, w_sq)
        )
        z, _ = model.fuse(ev_h, state.feature(), tau, gates=gates)
        if not np.isfinite(z.values).all():
            raise RolloutError(
                "non-finite latent at imagination step %d (max |z| so far %.3e)"
                % (h + 1, max(np.abs(q.values).max() for q in zs))
            )
        zs.append(z)
        actions.append(a)
        states.append(state)
    return zs, actions, wm_dists, states


def imagine_trajectory(
    model,
    state,
    e_v,
    tau,
    z0,
    horizon,
    rng,
    imagination_ev="decoded",
    text_sample=False,
    gates=None,
    with_rewards=True,
):
    """Compose the policy rollout with the task-conditioned imagination and
    (optionally) the dense cosine rewards."""
    zs, actions, wm_dists, _ = rollout(
        model, state, e_v, tau, z0, horizon, rng, imagination_ev, gates=gates
    )
    z_tau0 = enc.task_to_latent(model.t2l, tau)
    text_dists = text_rollout(model.text, z_tau0, actions, rng=rng, sample=text_sample)
    text_means = [d.mean for d in text_dists]
    rewards = []
    degenerate = 0
    if with_rewards:
        for h in range(horizon):
            r, flag = nc.cosine_rows(zs[h + 1], text_means[h + 1])
            rewards.append(r)
            degenerate += flag
    return ImaginedTrajectory(zs, actions, rewards, text_means, wm_dists, text_dists, degenerate)


def task_reward(z, z_tau_mean):
    """Scalar cosine reward between a latent and its task-imagined reference;
    degenerate norms yield 0 plus a flag."""
    return nc.cosine_sim(z, z_tau_mean)


def traj_alignment_kl(wm_dists, text_dists):
    """Mean over steps of KL(world-model dist || text dist), batch-averaged."""
    if len(wm_dists) != len(text_dists):
        raise ValueError(
            "sequence lengths differ: %d vs %d" % (len(wm_dists), len(text_dists))
        )
    terms = []
    for p, q in zip(wm_dists, text_dists):
        kl = nc.kl_rows(p, q)
        terms.append(nc.mean_(kl) if kl.values.ndim else kl)
    total = terms[0]
    for t in terms[1:]:
        total = nc.add(total, t)
    return nc.mul(total, 1.0 / len(terms))


def compute_returns(rewards, terminal_value, gamma):
    """Discounted returns R_h = r_h + gamma R_{h+1} with R_H the critic value."""
    returns = [None] * len(rewards)
    acc = terminal_value
    for h in range(len(rewards) - 1, -1, -1):
        acc = nc.add(rewards[h], nc.mul(acc, gamma))
        returns[h] = acc
    return returns


class params_fixed:
    """Temporarily exclude parameters from gradient accumulation."""

    def __init__(self, params):
        self.params = [p for p in params if p.needs_grad]

    def __enter__(self):
        for p in self.params:
            p.needs_grad = False

    def __exit__(self, exc_type, exc, tb):
        for p in self.params:
            p.needs_grad = True
        return False


def behavior_update(model, state, e_v, tau, z0, cfg, rng, actor_opt, critic_opt):
    """One actor step (pathwise return maximization through the learned
    dynamics, critic held fixed) and one critic regression step on detached
    latents with stop-gradient targets.

    ``cfg`` needs: horizon, gamma, imagination_ev, text_sample.
    Returns diagnostics.
    """
    critic_params = model.critic_param_list()
    with nc.tape():
        with params_fixed(critic_params):
            traj = imagine_trajectory(
                model,
                state,
                e_v,
                tau,
                z0,
                cfg.horizon,
                rng,
                imagination_ev=cfg.imagination_ev,
                text_sample=cfg.text_sample,
            )
            v_final = critic_value(model.critic, traj.zs[-1])
            returns = compute_returns(traj.rewards, v_final, cfg.gamma)
            actor_loss = nc.neg(nc.mean_(returns[0]))
            nc.backward(actor_loss)
        actor_opt.step()
        z_detached = np.concatenate([z.values for z in traj.zs[:-1]], axis=0)
        targets = np.concatenate([r.values for r in returns], axis=0)
    model.zero_grad()
    with nc.tape():
        v = critic_value(model.critic, nc.constant(z_detached))
        err = nc.sub(v, nc.constant(targets))
        critic_loss = nc.mean_(nc.mul(err, err))
        nc.backward(critic_loss)
        critic_opt.step()
    model.zero_grad()
    reward_mean = float(np.mean([r.values.mean() for r in traj.rewards]))
    return {
        "actor_loss": float(actor_loss.values),
        "critic_loss": float(critic_loss.values),
        "reward_mean": reward_mean,
        "reward_degenerate": traj.degenerate,
    }
