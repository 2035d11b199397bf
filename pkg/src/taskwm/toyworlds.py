"""Toy multi-embodiment locomotion environments and the offline replay dataset.

Dynamics are a damped point mass driven by the first action channel plus a
vector of spring-coupled posture joints driven by the rest.  Observations
encode position only through sin(position), so stand / walk / run are
distinguishable only by their velocity profile.

Dataset file format (byte-exact)
--------------------------------
Little-endian throughout.  One file per (embodiment, split):

    header: 5 x uint64  -> schema version (1), obs_dim, act_dim,
                           episode length T, episode count
    per episode, in collection order:
        uint64 payload length in bytes (everything below)
        uint64 name length, then embodiment name utf-8
        uint64 id length, then task id utf-8
        (T+1) * obs_dim float64  observation rows
        T * act_dim float64      action rows
        T float64                true rewards (evaluation only)

True rewards are stored for evaluation but never surfaced by the batch
sampler, so no training code path can read them.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numcore import Rng

SCHEMA_VERSION = 1
DT = 0.1
NOISE_STD = 0.01
V_MAX = 5.0
EPISODE_LEN = 100
POSTURE_RATE = 0.5
PROP_GAIN = 8.0
BANG_FLIP_PROB = 0.1

TARGET_SPEEDS = {"stand": 0.0, "walk": 1.0, "run": 3.0}
TASK_IDS = ("stand", "walk", "run")


@dataclass(frozen=True)
class Embodiment:
    """Dynamics preset; all shipped presets use posture_dim = 2 so that
    observation and action dimensions agree across embodiments."""

    name: str
    mass: float
    damping: float
    action_scale: float
    posture_dim: int = 2

    @property
    def obs_dim(self):
        return 3 + self.posture_dim

    @property
    def act_dim(self):
        return 1 + self.posture_dim


EMBODIMENTS = {
    "light": Embodiment("light", mass=1.0, damping=0.10, action_scale=1.0),
    "heavy": Embodiment("heavy", mass=2.5, damping=0.08, action_scale=1.2),
    "segmented": Embodiment("segmented", mass=1.2, damping=0.05, action_scale=1.1),
    "springy": Embodiment("springy", mass=0.7, damping=0.04, action_scale=0.8),
}


@dataclass(frozen=True)
class Task:
    id: str
    prompt: str
    target_speed: float


def make_task(task_id, prompt):
    if task_id not in TARGET_SPEEDS:
        raise ValueError("unknown task id %r (expected one of %s)" % (task_id, list(TASK_IDS)))
    return Task(task_id, prompt, TARGET_SPEEDS[task_id])


@dataclass
class EnvState:
    position: float
    velocity: float
    posture: np.ndarray
    step_count: int = 0


def initial_state(embodiment, rng=None):
    """Start at rest; with an rng, jitter phase, velocity and posture slightly."""
    if rng is None:
        return EnvState(0.0, 0.0, np.zeros(embodiment.posture_dim))
    return EnvState(
        position=float(rng.uniform(-np.pi, np.pi)),
        velocity=float(0.1 * rng.normal()),
        posture=0.1 * rng.normal((embodiment.posture_dim,)),
    )


def observe(state):
    return np.concatenate(
        [
            [np.sin(state.position), state.velocity, state.posture.mean()],
            state.posture,
        ]
    )


def env_step(state, action, embodiment, rng=None, noise=True):
    """Advance one step; returns (new state, observation of the new state).

    velocity' = (1 - damping) * velocity + (action_scale / mass) * a0 * dt
                + noise_std * eps
    posture'  = posture + 0.5 * (a[1:] - posture) * dt
    position' = position + velocity' * dt
    """
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (embodiment.act_dim,):
        raise ValueError(
            "action shape %s != (%d,)" % (list(action.shape), embodiment.act_dim)
        )
    if not np.isfinite(action).all():
        raise ValueError("non-finite action: %s" % action)
    action = np.clip(action, -1.0, 1.0)
    eps = rng.normal() if (noise and rng is not None) else 0.0
    velocity = (
        (1.0 - embodiment.damping) * state.velocity
        + (embodiment.action_scale / embodiment.mass) * action[0] * DT
        + NOISE_STD * eps
    )
    velocity = float(np.clip(velocity, -V_MAX, V_MAX))
    posture = state.posture + POSTURE_RATE * (action[1:] - state.posture) * DT
    position = state.position + velocity * DT
    new = EnvState(position, velocity, posture, state.step_count + 1)
    return new, observe(new)


def true_reward(state, task):
    """Evaluation-only reward in (0, 1], peaked at the target speed with an
    upright (zero) posture.  Training never sees this value."""
    dim = len(state.posture)
    speed_term = np.exp(-((state.velocity - task.target_speed) ** 2))
    posture_term = np.exp(-float(state.posture @ state.posture) / dim)
    return float(speed_term * posture_term)


# ---------------------------------------------------------------------------
# scripted controllers (data collection stand-ins for a learned explorer)


def random_controller(rng, act_dim):
    def act(state, t):
        return rng.uniform(-1.0, 1.0, (act_dim,))

    return act


def bangbang_controller(rng, act_dim):
    signs = rng.choice_sign((act_dim,))

    def act(state, t):
        flips = rng.uniform(0.0, 1.0, (act_dim,)) < BANG_FLIP_PROB
        signs[flips] *= -1.0
        return signs.copy()

    return act


def proportional_controller(task, act_dim):
    """Drive velocity toward the task target and posture toward zero; doubles
    as the expert reference for score normalization."""

    def act(state, t):
        a = np.zeros(act_dim)
        a[0] = np.clip(PROP_GAIN * (task.target_speed - state.velocity), -1.0, 1.0)
        return a

    return act


@dataclass
class EpisodeRecord:
    embodiment: str
    task: str
    observations: np.ndarray  # [T+1, obs_dim]
    actions: np.ndarray  # [T, act_dim]
    true_rewards: np.ndarray  # [T], evaluation only


def run_episode(embodiment, controller, task, rng, length=EPISODE_LEN, noise=True):
    state = initial_state(embodiment, rng)
    obs = [observe(state)]
    actions = []
    rewards = []
    for t in range(length):
        a = np.clip(controller(state, t), -1.0, 1.0)
        state, o = env_step(state, a, embodiment, rng, noise=noise)
        obs.append(o)
        actions.append(a)
        rewards.append(true_reward(state, task))
    return EpisodeRecord(
        embodiment.name,
        task.id,
        np.asarray(obs),
        np.asarray(actions),
        np.asarray(rewards),
    )


def collect_offline(embodiment, tasks, n_episodes, rng, noise=True):
    """Scripted mixture: 50% uniform-random, 25% bang-bang exploration, 25%
    proportional control toward each task's target speed.

    Proportional episodes are tagged with the task whose controller produced
    them; random and bang-bang episodes are tagged round-robin.  Episode i
    uses the derived stream seed XOR i, so collection order is reproducible
    and parallelizable.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    records = []
    prop_counter = 0
    for idx in range(n_episodes):
        ep_rng = rng.for_episode(idx)
        kind = ("random", "prop", "random", "bang")[idx % 4]
        if kind == "prop":
            task = tasks[prop_counter % len(tasks)]
            prop_counter += 1
            controller = proportional_controller(task, embodiment.act_dim)
        else:
            task = tasks[idx % len(tasks)]
            if kind == "random":
                controller = random_controller(ep_rng, embodiment.act_dim)
            else:
                controller = bangbang_controller(ep_rng, embodiment.act_dim)
        records.append(run_episode(embodiment, controller, task, ep_rng, noise=noise))
    return records


# ---------------------------------------------------------------------------
# dataset serialization


def save_dataset(path, records):
    if not records:
        raise ValueError("refusing to write an empty dataset")
    t_plus_1, obs_dim = records[0].observations.shape
    t_len, act_dim = records[0].actions.shape
    with open(path, "wb") as f:
        f.write(
            struct.pack(
                "<5Q", SCHEMA_VERSION, obs_dim, act_dim, t_len, len(records)
            )
        )
        for rec in records:
            name = rec.embodiment.encode("utf-8")
            tid = rec.task.encode("utf-8")
            payload = b"".join(
                [
                    struct.pack("<Q", len(name)),
                    name,
                    struct.pack("<Q", len(tid)),
                    tid,
                    np.ascontiguousarray(rec.observations, dtype="<f8").tobytes(),
                    np.ascontiguousarray(rec.actions, dtype="<f8").tobytes(),
                    np.ascontiguousarray(rec.true_rewards, dtype="<f8").tobytes(),
                ]
            )
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


class DatasetError(ValueError):
    pass


def load_dataset(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 40:
        raise DatasetError("%s: truncated header (%d bytes)" % (path, len(data)))
    version, obs_dim, act_dim, t_len, count = struct.unpack_from("<5Q", data, 0)
    if version != SCHEMA_VERSION:
        raise DatasetError("%s: schema version %d, expected %d" % (path, version, SCHEMA_VERSION))
    off = 40
    records = []
    for i in range(count):
        if off + 8 > len(data):
            raise DatasetError("%s: truncated at episode %d (offset %d)" % (path, i, off))
        (plen,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + plen > len(data):
            raise DatasetError(
                "%s: episode %d payload overruns file (offset %d, need %d bytes)"
                % (path, i, off, plen)
            )
        end = off + plen
        (nlen,) = struct.unpack_from("<Q", data, off)
        off += 8
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (tlen,) = struct.unpack_from("<Q", data, off)
        off += 8
        tid = data[off : off + tlen].decode("utf-8")
        off += tlen
        n_obs = (t_len + 1) * obs_dim
        obs = np.frombuffer(data, dtype="<f8", count=n_obs, offset=off).reshape(
            t_len + 1, obs_dim
        )
        off += n_obs * 8
        n_act = t_len * act_dim
        acts = np.frombuffer(data, dtype="<f8", count=n_act, offset=off).reshape(
            t_len, act_dim
        )
        off += n_act * 8
        rew = np.frombuffer(data, dtype="<f8", count=t_len, offset=off)
        off += t_len * 8
        if off != end:
            raise DatasetError(
                "%s: episode %d payload length mismatch (offset %d != %d)"
                % (path, i, off, end)
            )
        records.append(EpisodeRecord(name, tid, obs.copy(), acts.copy(), rew.copy()))
    if off != len(data):
        raise DatasetError("%s: %d trailing bytes at offset %d" % (path, len(data) - off, off))
    return records


# ---------------------------------------------------------------------------
# batch sampling


@dataclass
class SequenceBatch:
    """Contiguous sub-sequences; deliberately carries no true rewards."""

    observations: np.ndarray  # [B, L, obs_dim]
    actions: np.ndarray  # [B, L-1, act_dim]
    task_ids: list = field(default_factory=list)
    embodiments: list = field(default_factory=list)


def sample_batch(records, batch, seq_len, rng):
    """Uniformly sample (episode, start offset) pairs; each sequence of
    seq_len observation rows stays inside a single episode."""
    n_rows = records[0].observations.shape[0]
    for rec in records:
        n_rows = min(n_rows, rec.observations.shape[0])
    if seq_len > n_rows:
        raise ValueError(
            "seq_len %d exceeds episode length %d (observation rows)" % (seq_len, n_rows)
        )
    ep_idx = rng.integers(0, len(records), (batch,))
    starts = rng.integers(0, n_rows - seq_len + 1, (batch,))
    obs = np.empty((batch, seq_len, records[0].observations.shape[1]))
    acts = np.empty((batch, seq_len - 1, records[0].actions.shape[1]))
    tasks = []
    embs = []
    for i, (e, s) in enumerate(zip(ep_idx, starts)):
        rec = records[e]
        obs[i] = rec.observations[s : s + seq_len]
        acts[i] = rec.actions[s : s + seq_len - 1]
        tasks.append(rec.task)
        embs.append(rec.embodiment)
    return SequenceBatch(obs, acts, tasks, embs)
