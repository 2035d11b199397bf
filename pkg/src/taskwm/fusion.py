"""Task-gated fusion of semantic embeddings and world-model states.

A lightweight projection merges the semantic embedding with the recurrent
state, then a stack of residual layers refines it.  Each layer holds two
expert adapters (semantic / dynamics) blended by a scalar gate computed from
the task embedding alone:

    gate   p = sigmoid(W2 gelu(W1 layernorm(tau)))
    layer  z' = z + (1 - p) * A_sem(z) + p * A_dyn(z)

Adapters are Pre-LayerNorm -> GEGLU -> Linear -> LayerScale -> Residual with
the layer-scale vector initialized to zero, so the whole stack is exactly the
initial projection at init.  An additive variant (plain sum of two linear
maps, no task gating) backs the ablation baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc


@dataclass
class AdapterParams:
    ln_g: nc.DiffArray
    ln_b: nc.DiffArray
    w1: nc.DiffArray
    b1: nc.DiffArray
    w2: nc.DiffArray
    b2: nc.DiffArray
    scale: nc.DiffArray  # layer-scale vector, zero at init


def init_adapter(reg, rng, name, d_z, d_adapter):
    return AdapterParams(
        reg.add(name + ".ln_g", np.ones(d_z)),
        reg.add(name + ".ln_b", np.zeros(d_z)),
        reg.add(name + ".w1", rng.normal((d_z, 2 * d_adapter)) / np.sqrt(d_z)),
        reg.add(name + ".b1", np.zeros(2 * d_adapter)),
        reg.add(name + ".w2", rng.normal((d_adapter, d_z)) / np.sqrt(d_adapter)),
        reg.add(name + ".b2", np.zeros(d_z)),
        reg.add(name + ".scale", np.zeros(d_z)),
    )


def adapter_apply(p, z):
    return nc.expert_adapter(z, p.ln_g, p.ln_b, p.w1, p.b1, p.w2, p.b2, p.scale)


@dataclass
class GateParams:
    ln_g: nc.DiffArray
    ln_b: nc.DiffArray
    w1: nc.DiffArray
    b1: nc.DiffArray
    w2: nc.DiffArray
    b2: nc.DiffArray


def init_gate(reg, rng, name, d_tau):
    return GateParams(
        reg.add(name + ".ln_g", np.ones(d_tau)),
        reg.add(name + ".ln_b", np.zeros(d_tau)),
        reg.add(name + ".w1", rng.normal((d_tau, d_tau)) / np.sqrt(d_tau)),
        reg.add(name + ".b1", np.zeros(d_tau)),
        reg.add(name + ".w2", rng.normal((d_tau, 1)) / np.sqrt(d_tau)),
        reg.add(name + ".b2", np.zeros(1)),
    )


def gate_value(p, tau):
    """Routing probability in (0, 1); depends on the task embedding only."""
    h = nc.layernorm(tau, p.ln_g, p.ln_b)
    h = nc.gelu(nc.affine(h, p.w1, p.b1))
    return nc.sigmoid(nc.affine(h, p.w2, p.b2))


@dataclass
class FusionLayerParams:
    sem: AdapterParams
    dyn: AdapterParams
    gate: GateParams


@dataclass
class GatedFusionParams:
    fuse_w: nc.DiffArray
    fuse_b: nc.DiffArray
    layers: list
    d_m: int
    d_state: int


def init_gated_fusion(reg, rng, d_m, d_state, d_z, d_tau, d_adapter, n_layers):
    fuse_w = reg.add("fusion.fuse.w", rng.normal((d_m + d_state, d_z)) / np.sqrt(d_m + d_state))
    fuse_b = reg.add("fusion.fuse.b", np.zeros(d_z))
    layers = []
    for i in range(n_layers):
        layers.append(
            FusionLayerParams(
                init_adapter(reg, rng, "fusion.l%d.sem" % i, d_z, d_adapter),
                init_adapter(reg, rng, "fusion.l%d.dyn" % i, d_z, d_adapter),
                init_gate(reg, rng, "fusion.l%d.gate" % i, d_tau),
            )
        )
    return GatedFusionParams(fuse_w, fuse_b, layers, d_m, d_state)


def fuse_initial(params, e_v, state_feat):
    """Initial projection of concat[semantic, state] into the latent space."""
    if e_v.values.shape[-1] != params.d_m or state_feat.values.shape[-1] != params.d_state:
        raise nc.ShapeError(
            "fusion inputs [%d, %d] do not match expected [%d, %d]"
            % (
                e_v.values.shape[-1],
                state_feat.values.shape[-1],
                params.d_m,
                params.d_state,
            )
        )
    return nc.affine(nc.concat([e_v, state_feat], axis=-1), params.fuse_w, params.fuse_b)


def _adapter_tuple(p):
    return (p.ln_g, p.ln_b, p.w1, p.b1, p.w2, p.b2, p.scale)


def fusion_layer(layer, z, p):
    """Residual dual-expert combination with gate p (column [n, 1])."""
    return nc.dual_adapter_residual(z, p, _adapter_tuple(layer.sem), _adapter_tuple(layer.dyn))


def _reshape(a, shape):
    # parameters are 1-d; the fold needs them as explicit row/column matrices
    return nc.core._reshape_leaf(a, shape)


def _fold_adapter(ad):
    """Fold the LayerNorm affine into w1/b1 and the LayerScale into w2/b2:

        (zhat * g + b) @ w1 + b1 = zhat @ (g[:, None] * w1) + (b @ w1 + b1)
        (q @ w2 + b2) * s        = q @ (w2 * s[None, :]) + b2 * s
    """
    d = ad.ln_g.values.shape[0]
    w1f = nc.mul(ad.w1, _reshape(ad.ln_g, (d, 1)))
    c1 = nc.add(nc.matmul(_reshape(ad.ln_b, (1, d)), ad.w1), _reshape(ad.b1, (1, -1)))
    w2f = nc.mul(ad.w2, _reshape(ad.scale, (1, -1)))
    c2 = nc.mul(ad.b2, ad.scale)
    return w1f, c1, w2f, c2


def fold_layer(layer):
    """Precompute the concatenated folded weights consumed by the fused
    gated_dual_geglu op; build once per tape pass, reuse across timesteps."""
    w1s, c1s, w2s, c2s = _fold_adapter(layer.sem)
    w1d, c1d, w2d, c2d = _fold_adapter(layer.dyn)
    m = w2s.values.shape[0]
    # column layout [u_sem | u_dyn | v_sem | v_dyn] keeps the GEGLU halves
    # contiguous after concatenation
    w1cat = nc.concat(
        [
            nc.slice_last(w1s, 0, m),
            nc.slice_last(w1d, 0, m),
            nc.slice_last(w1s, m, 2 * m),
            nc.slice_last(w1d, m, 2 * m),
        ],
        axis=-1,
    )
    c1cat = nc.concat(
        [
            nc.slice_last(c1s, 0, m),
            nc.slice_last(c1d, 0, m),
            nc.slice_last(c1s, m, 2 * m),
            nc.slice_last(c1d, m, 2 * m),
        ],
        axis=-1,
    )
    w2stack = nc.concat([w2s, w2d], axis=0)
    return w1cat, c1cat, w2stack, c2s, c2d


def fold_fusion(params):
    """Folded weights for every layer of a gated fusion stack."""
    return [fold_layer(layer) for layer in params.layers]


def fused_latent(params, e_v, state_feat, tau, gate_override=None):
    """Full stack: initial projection then the residual layers.

    Returns (z, gates) where gates is the per-layer list of [n, 1] routing
    probabilities.  ``gate_override`` pins every layer's gate to a constant
    (used by branch-independence checks).
    """
    z = fuse_initial(params, e_v, state_feat)
    gates = []
    for layer in params.layers:
        if gate_override is None:
            p = gate_value(layer.gate, tau)
        else:
            p = nc.constant(np.full((z.values.shape[0], 1), float(gate_override)))
        gates.append(p)
        z = fusion_layer(layer, z, p)
    return z, gates


@dataclass
class AdditiveFusionParams:
    """Ungated baseline: z = e_v W_e + state W_s + b."""

    w_e: nc.DiffArray
    w_s: nc.DiffArray
    b: nc.DiffArray
    d_m: int
    d_state: int


def init_additive_fusion(reg, rng, d_m, d_state, d_z):
    return AdditiveFusionParams(
        reg.add("fusion.add.w_e", rng.normal((d_m, d_z)) / np.sqrt(d_m)),
        reg.add("fusion.add.w_s", rng.normal((d_state, d_z)) / np.sqrt(d_state)),
        reg.add("fusion.add.b", np.zeros(d_z)),
        d_m,
        d_state,
    )


def additive_latent(params, e_v, state_feat):
    return nc.add(
        nc.matmul(e_v, params.w_e),
        nc.affine(state_feat, params.w_s, params.b),
    )


def stochastic_block_weight(params, d_h, d_s):
    """Rows of the state->latent projection acting on the stochastic part s;
    both fusion variants expose this so the prior can be lifted into latent
    space by the same shared linear map the fusion itself applies."""
    if isinstance(params, GatedFusionParams):
        start = params.d_m + d_h
        return nc.slice_rows(params.fuse_w, start, start + d_s)
    start = d_h
    return nc.slice_rows(params.w_s, start, start + d_s)
