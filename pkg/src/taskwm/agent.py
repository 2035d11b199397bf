"""Model assembly: every component's parameters behind one registry."""
from __future__ import annotations

from dataclasses import dataclass

from . import numcore as nc
from . import encoders as enc
from . import worldmodel as wm
from . import fusion as fu
from . import behavior as bh
from .registry import ParamRegistry

RUNGS = ("base", "semantic", "fusion", "alignment")
GATED_RUNGS = ("fusion", "alignment")


@dataclass
class Dims:
    d_tau: int = 32
    d_m: int = 64
    d_z: int = 64
    d_h: int = 64
    d_s: int = 32
    d_embed: int = 16
    d_adapter: int = 64
    n_layers: int = 3
    window: int = 4

    @property
    def d_state(self):
        return self.d_h + self.d_s


class Agent:
    """All trainable state for one run.

    ``rung`` picks the architecture/objective ladder step: "base" and
    "semantic" use additive fusion, "fusion" and "alignment" the gated stack.
    Module parameters draw from per-module derived seeds, so components
    shared between rungs are initialized identically at the same seed.
    """

    def __init__(self, obs_dim, act_dim, rung="alignment", dims=None, seed=0):
        if rung not in RUNGS:
            raise ValueError("unknown rung %r (expected one of %s)" % (rung, list(RUNGS)))
        self.dims = dims or Dims()
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.rung = rung
        self.seed = seed
        d = self.dims
        root = nc.Rng(seed)
        reg = ParamRegistry()
        self.reg = reg
        self.task_enc = enc.init_task_encoder(reg, root.derive("task_enc"), d.d_tau)
        self.sem_enc = enc.init_semantic_encoder(
            reg, root.derive("sem_enc"), d.window, obs_dim, d.d_m
        )
        self.t2l = enc.init_task_to_latent(reg, root.derive("t2l"), d.d_tau, d.d_z)
        self.t2s = enc.init_task_to_semantic(reg, root.derive("t2s"), d.d_tau, d.d_m)
        self.dec = enc.init_decoder(reg, root.derive("dec"), d.d_z, d.d_m, obs_dim)
        self.world = wm.init_world_model(
            reg, root.derive("world"), obs_dim, act_dim, d.d_h, d.d_s, d.d_embed
        )
        if rung in GATED_RUNGS:
            self.fusion = fu.init_gated_fusion(
                reg, root.derive("fusion"), d.d_m, d.d_state, d.d_z, d.d_tau, d.d_adapter, d.n_layers
            )
        else:
            self.fusion = fu.init_additive_fusion(
                reg, root.derive("fusion"), d.d_m, d.d_state, d.d_z
            )
        self.policy = bh.init_policy(reg, root.derive("policy"), d.d_z, act_dim)
        self.critic = bh.init_critic(reg, root.derive("critic"), d.d_z)
        self.text = bh.init_text_imagination(reg, root.derive("text"), d.d_z, act_dim)
        # the fused latent and the task latent must share one manifold
        task_latent_dim = self.t2l.w.values.shape[1]
        if task_latent_dim != d.d_z:
            raise AssertionError(
                "task latent dim %d != fused latent dim %d" % (task_latent_dim, d.d_z)
            )

    @property
    def gated(self):
        return isinstance(self.fusion, fu.GatedFusionParams)

    def fuse(self, e_v, state_feat, tau, gates=None, gate_override=None):
        """Latent fusion; returns (z, per-layer gates or None for additive)."""
        if self.gated:
            if gates is not None:
                z = fu.fuse_initial(self.fusion, e_v, state_feat)
                for layer, p in zip(self.fusion.layers, gates):
                    z = fu.fusion_layer(layer, z, p)
                return z, gates
            return fu.fused_latent(self.fusion, e_v, state_feat, tau, gate_override)
        return fu.additive_latent(self.fusion, e_v, state_feat), None

    def encode_tasks(self, prompts):
        return enc.task_embedding(self.task_enc, prompts)

    # parameter groupings -------------------------------------------------
    def param_list(self):
        return self.reg.params()

    def named_params(self):
        return self.reg.named()

    def policy_param_list(self):
        p = self.policy
        return [p.trunk_w, p.trunk_b, p.mean_w, p.mean_b, p.lstd_w, p.lstd_b]

    def critic_param_list(self):
        c = self.critic
        return [c.w1, c.b1, c.w2, c.b2]

    def model_param_list(self):
        """Everything except policy and critic (the total-loss group)."""
        skip = {id(p) for p in self.policy_param_list() + self.critic_param_list()}
        return [p for p in self.reg.params() if id(p) not in skip]

    def zero_grad(self):
        self.reg.zero_grad()
