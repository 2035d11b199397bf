"""Joint training objective and the optimizer.

The total loss is a weighted sum of three terms:
  world     prior-posterior KL (free-bits clamped) + observation reconstruction
  semantic  semantic reconstruction + cross-modal alignment on the embedding
  align     discounted KL between lifted world-model rollout distributions and
            the text-conditioned imagination along the same actions

Setting a weight to zero skips the term entirely, so no gradient can leak
from a disabled term.  Loss conventions: world-model terms sum over time and
average over the batch (so forcing posterior = prior yields free_bits * T
exactly); the semantic term averages over all (row, step) pairs; the align
term is a discounted sum over imagination steps of batch-averaged KLs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from . import worldmodel as wm
from . import behavior as bh
from . import encoders as enc


@dataclass
class LossWeights:
    lambda_world: float = 1.0
    lambda_sem: float = 1.0
    lambda_align: float = 0.1
    gamma: float = 0.99

    def __post_init__(self):
        for name in ("lambda_world", "lambda_sem", "lambda_align"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be non-negative" % name)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")


class GradientError(RuntimeError):
    pass


class Adam:
    """Bias-corrected first/second-moment adaptive update with a global
    gradient-norm clip.  Frozen parameters and parameters without a gradient
    are left untouched.

    Moments live in one flat buffer; each step gathers gradients into a flat
    view, does the update vectorized, and scatters results back.
    """

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip=100.0):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.step_count = 0
        self._sizes = [p.values.size for p in self.params]
        self._offsets = np.concatenate([[0], np.cumsum(self._sizes)])
        total = int(self._offsets[-1])
        self._m = np.zeros(total)
        self._v = np.zeros(total)
        self._g = np.zeros(total)
        self.last_grad_norm = 0.0

    def step(self):
        g = self._g
        g[:] = 0.0
        touched = np.zeros(len(self.params), dtype=bool)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            touched[i] = True
            g[self._offsets[i] : self._offsets[i + 1]] = p.grad.ravel()
            p.grad = None
        norm_sq = float(g @ g)
        if not np.isfinite(norm_sq):
            for i, p in enumerate(self.params):
                seg = g[self._offsets[i] : self._offsets[i + 1]]
                if not np.isfinite(seg).all():
                    raise GradientError(
                        "non-finite gradient for parameter %s" % (p.name or "<unnamed>")
                    )
        norm = float(np.sqrt(norm_sq))
        self.last_grad_norm = norm
        if norm > self.clip:
            g *= self.clip / norm
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        m, v = self._m, self._v
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        g *= g  # g is scratch from here on
        v += (1.0 - self.beta2) * g
        denom = np.sqrt(v, out=g)  # reuse the scratch buffer
        denom *= 1.0 / np.sqrt(b2c)
        denom += self.eps
        np.divide(m, denom, out=denom)
        denom *= self.lr / b1c
        for i, p in enumerate(self.params):
            if touched[i]:
                p.values -= denom[self._offsets[i] : self._offsets[i + 1]].reshape(
                    p.values.shape
                )


def semantic_loss(e_v, z, tau_rows, dec, t2s):
    """Reconstruction + alignment squared errors, averaged over rows.

    The embedding is a target with gradients allowed into its own encoder;
    that backward route is what refines the semantic space.
    """
    rec_err = nc.sub(e_v, enc.decode_semantic(dec, z))
    rec = nc.mean_(nc.sum_(nc.mul(rec_err, rec_err), axis=-1, keepdims=True))
    ali_err = nc.sub(e_v, enc.task_to_semantic(t2s, tau_rows))
    ali = nc.mean_(nc.sum_(nc.mul(ali_err, ali_err), axis=-1, keepdims=True))
    return nc.add(rec, ali), {"sem_rec": float(rec.values), "sem_align": float(ali.values)}


def alignment_loss(wm_dists, text_dists, gamma):
    """Discounted trajectory alignment: sum_h gamma^h KL(world_h || text_h),
    each KL batch-averaged.  Minimizing pulls the two imaginations together.

    Computed as one batched KL over the step-stacked distributions with a
    per-step discount column; identical to the per-step sum.
    """
    if len(wm_dists) != len(text_dists):
        raise ValueError(
            "alignment sequences differ in length: %d vs %d"
            % (len(wm_dists), len(text_dists))
        )
    h_steps = len(wm_dists)
    b = wm_dists[0].mean.values.shape[0]
    p_all = wm.stack_gaussians(wm_dists)
    q_all = wm.stack_gaussians(text_dists)
    kl = nc.kl_rows(p_all, q_all)  # [H*B, 1], t-major
    disc = np.repeat(gamma ** np.arange(h_steps), b)[:, None] / b
    return nc.sum_(nc.mul(kl, nc.constant(disc)))


def total_loss(model, batch_obs, batch_actions, prompts, weights, rng, cfg):
    """Full joint objective on one batch of real sequences.

    ``cfg`` needs: free_bits, horizon, imagination_ev, text_sample.
    Returns (loss DiffArray or None when every weight is zero, diagnostics).
    Per-term randomness comes from streams derived off ``rng``, so a term
    recomputed standalone with the same base seed reproduces exactly.
    """
    b, length, obs_dim = batch_obs.shape
    diag = {}

    unique = sorted(set(prompts))
    idx = np.array([unique.index(p) for p in prompts])
    tau_u = enc.task_embedding(model.task_enc, unique)
    tau_rows = nc.gather_rows(tau_u, idx)
    tau_tiled = nc.tile_rows(tau_rows, length)

    windows = enc.make_windows(batch_obs, model.dims.window)
    flat = nc.constant(np.swapaxes(windows, 0, 1).reshape(length * b, -1))
    e_v = enc.semantic_embed(model.sem_enc, flat)

    states, prior_all, post_all = wm.posterior_scan(
        model.world, batch_obs, batch_actions, rng.derive("scan")
    )
    h_all = nc.concat([st.h for st in states], axis=0)
    s_all = nc.concat([st.s for st in states], axis=0)
    state_feat = nc.concat([h_all, s_all], axis=-1)
    z_all, gates = model.fuse(e_v, state_feat, tau_tiled)
    if gates is not None:
        diag["gates"] = [float(g.values[0, 0]) for g in gates]

    terms = []
    if weights.lambda_world > 0:
        dyn, dyn_diag = wm.dynamics_loss(prior_all, post_all, length, cfg.free_bits)
        obs_t_major = nc.constant(
            np.swapaxes(batch_obs, 0, 1).reshape(length * b, obs_dim)
        )
        rec_err = nc.sub(obs_t_major, enc.decode_observation(model.dec, z_all))
        rec = nc.mul(
            nc.mean_(nc.sum_(nc.mul(rec_err, rec_err), axis=-1, keepdims=True)),
            float(length),
        )
        world = nc.add(dyn, rec)
        diag.update(dyn_diag)
        diag["loss_world_dyn"] = float(dyn.values)
        diag["loss_world_rec"] = float(rec.values)
        diag["loss_world"] = float(world.values)
        terms.append(nc.mul(world, weights.lambda_world))
    if weights.lambda_sem > 0:
        sem, sem_diag = semantic_loss(e_v, z_all, tau_tiled, model.dec, model.t2s)
        diag.update(sem_diag)
        diag["loss_sem"] = float(sem.values)
        terms.append(nc.mul(sem, weights.lambda_sem))
    if weights.lambda_align > 0:
        start_state = states[-1]
        ev_last = nc.slice_rows(e_v, (length - 1) * b, length * b)
        z_last = nc.slice_rows(z_all, (length - 1) * b, length * b)
        traj = bh.imagine_trajectory(
            model,
            start_state,
            ev_last,
            tau_rows,
            z_last,
            cfg.horizon,
            rng.derive("rollout"),
            imagination_ev=cfg.imagination_ev,
            text_sample=cfg.text_sample,
            with_rewards=False,
        )
        align = alignment_loss(traj.wm_dists, traj.text_dists[1:], weights.gamma)
        diag["loss_align"] = float(align.values)
        terms.append(nc.mul(align, weights.lambda_align))

    if not terms:
        diag["loss_total"] = 0.0
        return None, diag
    total = terms[0]
    for t in terms[1:]:
        total = nc.add(total, t)
    for key in ("loss_world", "loss_sem", "loss_align"):
        if key in diag and not np.isfinite(diag[key]):
            raise FloatingPointError("loss term %s is not finite" % key)
    diag["loss_total"] = float(total.values)
    return total, diag


def term_grad_norms(model, batch_obs, batch_actions, prompts, weights, rng, cfg):
    """Gradient norm of each enabled term in isolation (diagnostic cadence
    only; runs one backward per term)."""
    out = {}
    for name, w in (
        ("world", LossWeights(1.0, 0.0, 0.0, weights.gamma)),
        ("sem", LossWeights(0.0, 1.0, 0.0, weights.gamma)),
        ("align", LossWeights(0.0, 0.0, 1.0, weights.gamma)),
    ):
        lam = getattr(weights, "lambda_" + name)
        if lam == 0:
            continue
        with nc.tape():
            loss, _ = total_loss(model, batch_obs, batch_actions, prompts, w, rng, cfg)
            nc.backward(loss)
            sq = sum(
                float((p.grad * p.grad).sum())
                for p in model.param_list()
                if p.grad is not None
            )
            out["grad_norm_" + name] = float(np.sqrt(sq)) * lam
        model.zero_grad()
    return out
