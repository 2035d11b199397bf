"""Encoders bridging prompts, observation windows and the latent space.

The semantic encoder stands in for a large pretrained backbone: its first
layer is frozen after random init and only the head layers train, so the
joint loss can refine the semantic space without shipping a real model.
Prompts are embedded by hashed bag-of-words (deterministic across platforms)
followed by a small trainable map.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import numcore as nc

BOW_BUCKETS = 64


def load_prompt_registry(path=None):
    """Registry file: one "<embodiment>/<task><TAB>prompt" line per entry."""
    if path is None:
        text = resources.files("taskwm").joinpath("prompts.txt").read_text("utf-8")
    else:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    registry = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError("prompt registry line %d has no tab separator" % lineno)
        key, prompt = line.split("\t", 1)
        registry[key.strip()] = prompt.strip()
    return registry


def get_prompt(registry, embodiment, task_id):
    key = "%s/%s" % (embodiment, task_id)
    if key not in registry:
        raise KeyError("no prompt registered for %r" % key)
    return registry[key]


def _bucket(token):
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % BOW_BUCKETS


def bow_vector(prompt):
    """Hashed bag-of-words counts over lowercase alphanumeric tokens."""
    tokens = [t for t in "".join(c if c.isalnum() else " " for c in prompt.lower()).split() if t]
    if not tokens:
        raise ValueError("empty prompt")
    vec = np.zeros(BOW_BUCKETS)
    for tok in tokens:
        vec[_bucket(tok)] += 1.0
    return vec


# ---------------------------------------------------------------------------
# parameter containers


def _linear(reg, rng, name, fan_in, fan_out, zero=False, frozen=False):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return (
        reg.add(name + ".w", w, frozen=frozen),
        reg.add(name + ".b", np.zeros(fan_out), frozen=frozen),
    )


@dataclass
class TaskEncoderParams:
    w1: nc.DiffArray
    b1: nc.DiffArray
    w2: nc.DiffArray
    b2: nc.DiffArray


def init_task_encoder(reg, rng, d_tau):
    w1, b1 = _linear(reg, rng, "task_enc.l1", BOW_BUCKETS, BOW_BUCKETS)
    w2, b2 = _linear(reg, rng, "task_enc.l2", BOW_BUCKETS, d_tau)
    return TaskEncoderParams(w1, b1, w2, b2)


def task_embedding(params, prompts):
    """Encode prompts -> unit-norm task embeddings [n, d_tau]."""
    bows = nc.constant(np.stack([bow_vector(p) for p in prompts]))
    hid = nc.gelu(nc.affine(bows, params.w1, params.b1))
    return nc.l2_normalize(nc.affine(hid, params.w2, params.b2))


@dataclass
class SemanticEncoderParams:
    w0: nc.DiffArray  # frozen backbone stand-in
    b0: nc.DiffArray
    w1: nc.DiffArray
    b1: nc.DiffArray
    w2: nc.DiffArray
    b2: nc.DiffArray


def init_semantic_encoder(reg, rng, window, obs_dim, d_m, hidden=128):
    w0, b0 = _linear(reg, rng, "sem_enc.frozen", window * obs_dim, hidden, frozen=True)
    w1, b1 = _linear(reg, rng, "sem_enc.l1", hidden, hidden)
    w2, b2 = _linear(reg, rng, "sem_enc.l2", hidden, d_m)
    return SemanticEncoderParams(w0, b0, w1, b1, w2, b2)


def semantic_embed(params, flat_windows):
    """Embed flattened observation windows [n, window*obs_dim] -> [n, d_m]."""
    if flat_windows.values.shape[-1] != params.w0.values.shape[0]:
        raise nc.ShapeError(
            "window size %d does not match encoder input %d"
            % (flat_windows.values.shape[-1], params.w0.values.shape[0])
        )
    h = nc.gelu(nc.affine(flat_windows, params.w0, params.b0))
    h = nc.gelu(nc.affine(h, params.w1, params.b1))
    return nc.affine(h, params.w2, params.b2)


def make_windows(observations, window):
    """[B, L, obs_dim] -> [B, L, window*obs_dim]; the window ending at each
    step, edge-padded with the first row at the sequence start."""
    b, length, obs_dim = observations.shape
    pad = np.concatenate(
        [np.repeat(observations[:, :1], window - 1, axis=1), observations], axis=1
    )
    out = np.empty((b, length, window * obs_dim))
    for k in range(window):
        out[:, :, k * obs_dim : (k + 1) * obs_dim] = pad[:, k : k + length]
    return out


@dataclass
class TaskToLatentParams:
    w: nc.DiffArray
    b: nc.DiffArray


def init_task_to_latent(reg, rng, d_tau, d_z):
    # zero init: untrained task anchors are exactly degenerate (reward 0 with a
    # flag) instead of pointing in an arbitrary random direction
    w, b = _linear(reg, rng, "task_to_latent", d_tau, d_z, zero=True)
    return TaskToLatentParams(w, b)


def task_to_latent(params, tau):
    return nc.affine(tau, params.w, params.b)


@dataclass
class TaskToSemanticParams:
    w1: nc.DiffArray
    b1: nc.DiffArray
    w2: nc.DiffArray
    b2: nc.DiffArray


def init_task_to_semantic(reg, rng, d_tau, d_m):
    w1, b1 = _linear(reg, rng, "task_to_sem.l1", d_tau, d_m)
    w2, b2 = _linear(reg, rng, "task_to_sem.l2", d_m, d_m)
    return TaskToSemanticParams(w1, b1, w2, b2)


def task_to_semantic(params, tau):
    return nc.affine(nc.gelu(nc.affine(tau, params.w1, params.b1)), params.w2, params.b2)


@dataclass
class DecoderParams:
    sem_w: nc.DiffArray
    sem_b: nc.DiffArray
    obs_w: nc.DiffArray
    obs_b: nc.DiffArray


def init_decoder(reg, rng, d_z, d_m, obs_dim):
    sem_w, sem_b = _linear(reg, rng, "decoder.sem", d_z, d_m)
    obs_w, obs_b = _linear(reg, rng, "decoder.obs", d_z, obs_dim)
    return DecoderParams(sem_w, sem_b, obs_w, obs_b)


def decode_semantic(params, z):
    return nc.affine(z, params.sem_w, params.sem_b)


def decode_observation(params, z):
    """Observation head; unit-variance Gaussian likelihood, so the negative
    log-likelihood reduces to squared error up to a constant."""
    return nc.affine(z, params.obs_w, params.obs_b)
