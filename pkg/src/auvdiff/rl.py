"""TD3 learner pieces and the value-guided selection over diffusion candidates."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    NetSpec,
    OptimState,
    ParamSet,
    adam_init,
    net_backward,
    net_eval,
    net_forward,
    net_init,
    opt_step,
    soft_update,
)
from .errors import ConfigError, LoadError, ShapeError, UsageError


def critic_spec(state_dim: int, act_dim: int, hidden: int = 128) -> NetSpec:
    return NetSpec.mlp([state_dim + act_dim, hidden, hidden, 1], hidden="relu", output="identity")


def actor_spec(state_dim: int, act_dim: int, hidden: int = 128) -> NetSpec:
    return NetSpec.mlp([state_dim, hidden, hidden, act_dim], hidden="relu", output="tanh")


@dataclass
class CriticPair:
    spec: NetSpec
    q1: ParamSet
    q2: ParamSet

    @classmethod
    def create(cls, state_dim: int, act_dim: int, hidden: int, seed: int) -> "CriticPair":
        spec = critic_spec(state_dim, act_dim, hidden)
        s1, s2 = np.random.SeedSequence(seed).generate_state(2)
        return cls(spec, net_init(spec, int(s1)), net_init(spec, int(s2)))

    def params(self, which: int) -> ParamSet:
        if which == 1:
            return self.q1
        if which == 2:
            return self.q2
        raise UsageError(f"critic index must be 1 or 2, got {which}")

    def copy(self) -> "CriticPair":
        return CriticPair(self.spec, self.q1.copy(), self.q2.copy())


@dataclass
class Actor:
    spec: NetSpec
    params: ParamSet

    @classmethod
    def create(cls, state_dim: int, act_dim: int, hidden: int, seed: int) -> "Actor":
        spec = actor_spec(state_dim, act_dim, hidden)
        return cls(spec, net_init(spec, seed))

    def __call__(self, s) -> np.ndarray:
        out = net_eval(self.params, self.spec, s)
        return out

    def copy(self) -> "Actor":
        return Actor(self.spec, self.params.copy())


def _sa(spec: NetSpec, s, a) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if s.shape[0] == 1 and a.shape[0] > 1:
        s = np.repeat(s, a.shape[0], axis=0)
    if s.shape[0] != a.shape[0]:
        raise ShapeError(f"batch sizes differ: {s.shape[0]} states, {a.shape[0]} actions")
    x = np.concatenate([s, a], axis=1)
    if x.shape[1] != spec.in_dim:
        raise ShapeError(f"state+action width {x.shape[1]} != critic input {spec.in_dim}")
    return x


def critic_q(critics: CriticPair, which: int, s, a):
    """Q-value of one (state, action) pair as a float, or a vector for a batch."""
    single = np.ndim(a) == 1
    out = net_eval(critics.params(which), critics.spec, _sa(critics.spec, s, a))
    q = out[:, 0]
    return float(q[0]) if single else q


def q_min(critics: CriticPair, s, a) -> np.ndarray:
    x = _sa(critics.spec, s, a)
    q1 = net_eval(critics.q1, critics.spec, x)
    q2 = net_eval(critics.q2, critics.spec, x)
    return np.minimum(q1[:, 0], q2[:, 0])


def select_action(critics: CriticPair, s, candidates):
    """Argmax of ``min(Q1, Q2)`` over the candidates; ties go to the lowest index.

    ``candidates`` is a CandidateSet or a (K, act_dim) array.
    """
    acts = getattr(candidates, "actions", candidates)
    acts = np.atleast_2d(np.asarray(acts, dtype=np.float64))
    if acts.shape[0] == 0 or acts.size == 0:
        raise UsageError("empty candidate set")
    q = q_min(critics, s, acts)
    k = int(np.argmax(q))
    return np.clip(acts[k], -1.0, 1.0), k, q


def target_noise(shape, sigma: float, c: float, rng: np.random.Generator) -> np.ndarray:
    """``clip(N(0, sigma^2), -c, c)``."""
    if c <= 0:
        raise ConfigError(f"noise clip c must be positive, got {c}", "noise_clip")
    if sigma == 0:
        return np.zeros(shape)
    return np.clip(rng.normal(0.0, sigma, size=shape), -c, c)


def td3_target(r, s_next, done, targets: CriticPair, target_actor: Actor, gamma: float,
               sigma: float, c: float, rng: np.random.Generator, noise=None, reduce: str = "min"):
    """Clipped double-Q target.

    ``y = r + (1 - done) * gamma * min_i Q'_i(s', clamp(pi'(s') + noise, -1, 1))``.
    Works on scalars or batches. ``noise`` overrides the sampled perturbation;
    ``reduce`` in {"min", "q1", "q2"} exists so tests can compare against the
    single-critic targets under the same draw.
    """
    if not (0.0 <= gamma <= 1.0):
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}", "gamma")
    scalar = np.ndim(r) == 0
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    done = np.atleast_1d(np.asarray(done, dtype=np.float64))
    s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
    a_next = target_actor(s_next)
    if noise is None:
        noise = target_noise(a_next.shape, sigma, c, rng)
    a_next = np.clip(a_next + noise, -1.0, 1.0)
    x = _sa(targets.spec, s_next, a_next)
    q1 = net_eval(targets.q1, targets.spec, x)
    q2 = net_eval(targets.q2, targets.spec, x)
    if reduce == "min":
        q = np.minimum(q1[:, 0], q2[:, 0])
    elif reduce == "q1":
        q = q1[:, 0]
    elif reduce == "q2":
        q = q2[:, 0]
    else:
        raise UsageError(f"unknown reduce {reduce!r}")
    y = r + (1.0 - done) * gamma * q
    return float(y[0]) if scalar else y


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    plan: np.ndarray | None = None  # stacked future actions for diffusion training

    def __len__(self) -> int:
        return self.s.shape[0]


def critic_loss_grads(critics: CriticPair, which: int, s, a, y):
    """MSE against fixed targets and its gradient for one critic."""
    x = _sa(critics.spec, s, a)
    q, cache = net_forward(critics.params(which), critics.spec, x)
    diff = q[:, 0] - y
    B = len(y)
    loss = float(np.mean(diff * diff))
    grads, _ = net_backward(cache, (2.0 * diff / B)[:, None])
    return loss, grads


def critic_update(critics: CriticPair, targets: CriticPair, target_actor: Actor, batch: Batch,
                  gamma: float, sigma: float, c: float, rng: np.random.Generator,
                  opt1: OptimState, opt2: OptimState):
    """One TD3 critic step against shared clipped double-Q targets.

    Returns ``(critics', opt1', opt2', loss1, loss2, (grads1, grads2))``.
    """
    if len(batch) == 0:
        raise UsageError("critic_update needs a non-empty batch")
    y = td3_target(batch.r, batch.s_next, batch.done, targets, target_actor, gamma, sigma, c, rng)
    l1, g1 = critic_loss_grads(critics, 1, batch.s, batch.a, y)
    l2, g2 = critic_loss_grads(critics, 2, batch.s, batch.a, y)
    q1, opt1 = opt_step(critics.q1, g1, opt1)
    q2, opt2 = opt_step(critics.q2, g2, opt2)
    return CriticPair(critics.spec, q1, q2), opt1, opt2, l1, l2, (g1, g2)


def actor_objective_grads(actor: Actor, critics: CriticPair, s):
    """Gradient of ``-mean Q1(s, pi(s))`` with respect to the actor parameters."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a, a_cache = net_forward(actor.params, actor.spec, s)
    x = np.concatenate([s, a], axis=1)
    q, q_cache = net_forward(critics.q1, critics.spec, x)
    B = s.shape[0]
    _, gx = net_backward(q_cache, np.full((B, 1), -1.0 / B))
    ga = gx[:, s.shape[1]:]
    grads, _ = net_backward(a_cache, ga)
    return float(-np.mean(q)), grads


def actor_update(actor: Actor, critics: CriticPair, batch_s, counter: int, opt: OptimState,
                 delay: int = 2):
    """Delayed policy step: ascend mean Q1 every ``delay``-th call, otherwise a no-op.

    Returns ``(actor', opt', grads or None)``.
    """
    if np.size(batch_s) == 0:
        raise UsageError("actor_update needs a non-empty batch")
    if counter % delay != 0:
        return actor, opt, None
    _, grads = actor_objective_grads(actor, critics, batch_s)
    params, opt = opt_step(actor.params, grads, opt)
    return Actor(actor.spec, params), opt, grads


def soft_update_pair(targets: CriticPair, live: CriticPair, tau: float) -> CriticPair:
    return CriticPair(targets.spec, soft_update(targets.q1, live.q1, tau),
                      soft_update(targets.q2, live.q2, tau))


def soft_update_actor(target: Actor, live: Actor, tau: float) -> Actor:
    return Actor(target.spec, soft_update(target.params, live.params, tau))


# ---------------------------------------------------------------------------
# replay


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


BUFFER_MAGIC = "auvdiff-replay/1"


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions stored in flat arrays.

    Every slot also records its episode id and global insertion number, which
    lets :meth:`plans` walk forward in time to build stacked action targets.
    """

    def __init__(self, capacity: int, state_dim: int, act_dim: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1", "buffer_capacity")
        self.capacity, self.state_dim, self.act_dim = capacity, state_dim, act_dim
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.seq = np.full(capacity, -1, dtype=np.int64)
        self.ptr = 0
        self.size = 0
        self.count = 0

    def __len__(self) -> int:
        return self.size

    def push(self, tr: Transition, episode: int = 0) -> None:
        s = np.asarray(tr.s, dtype=np.float64)
        a = np.asarray(tr.a, dtype=np.float64)
        if s.shape != (self.state_dim,) or a.shape != (self.act_dim,):
            raise ShapeError("transition widths do not match the buffer")
        if not np.isfinite(tr.r):
            raise UsageError("reward must be finite")
        i = self.ptr
        self.s[i], self.a[i], self.r[i] = s, a, tr.r
        self.s_next[i], self.done[i] = tr.s_next, float(tr.done)
        self.episode[i], self.seq[i] = episode, self.count
        self.count += 1
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise UsageError("cannot sample from an empty replay buffer")
        if n < 1 or n > self.size:
            raise UsageError(f"sample size {n} must lie in [1, {self.size}]")
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator, horizon: int = 1) -> Batch:
        """Uniform sample with replacement; ``horizon > 1`` also fills ``plan``."""
        idx = self.sample_indices(n, rng)
        plan = self.plans(idx, horizon) if horizon > 1 else self.a[idx].copy()
        return Batch(self.s[idx].copy(), self.a[idx].copy(), self.r[idx].copy(),
                     self.s_next[idx].copy(), self.done[idx].copy(), plan)

    def plans(self, idx, horizon: int) -> np.ndarray:
        """Actions ``a_i, a_{i+1}, ...`` of the same episode, repeating the last one when the episode ends."""
        d = self.act_dim
        cur = np.asarray(idx, dtype=np.int64)
        out = np.empty((len(cur), horizon * d))
        for h in range(horizon):
            out[:, h * d:(h + 1) * d] = self.a[cur]
            nxt = (cur + 1) % self.capacity
            ok = ((self.seq[nxt] == self.seq[cur] + 1) & (self.episode[nxt] == self.episode[cur])
                  & ~self.done[cur].astype(bool))
            cur = np.where(ok, nxt, cur)
        return out

    def _ordered(self) -> np.ndarray:
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.ptr) % self.capacity

    def save(self, path) -> None:
        """Persist as one JSON header line followed by little-endian float64 records.

        Record layout, oldest first:
        ``episode, seq, s[state_dim], a[act_dim], r, s_next[state_dim], done``.
        """
        order = self._ordered()
        rec = np.concatenate([
            self.episode[order, None].astype(np.float64), self.seq[order, None].astype(np.float64),
            self.s[order], self.a[order], self.r[order, None], self.s_next[order],
            self.done[order, None],
        ], axis=1)
        header = {"format": BUFFER_MAGIC, "capacity": self.capacity, "state_dim": self.state_dim,
                  "act_dim": self.act_dim, "records": int(len(order)), "count": self.count,
                  "record_width": int(rec.shape[1])}
        with open(path, "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode("ascii"))
            fh.write(rec.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        try:
            with open(path, "rb") as fh:
                header = json.loads(fh.readline().decode("ascii"))
                raw = fh.read()
        except (OSError, ValueError) as exc:
            raise LoadError(f"cannot read replay file {path}: {exc}") from exc
        if header.get("format") != BUFFER_MAGIC:
            raise LoadError(f"{path}: not a replay record file")
        buf = cls(header["capacity"], header["state_dim"], header["act_dim"])
        w = header["record_width"]
        rec = np.frombuffer(raw, dtype="<f8")
        if rec.size != w * header["records"]:
            raise LoadError(f"{path}: truncated record data")
        rec = rec.reshape(header["records"], w)
        sd, ad = buf.state_dim, buf.act_dim
        n = rec.shape[0]
        buf.episode[:n] = rec[:, 0].astype(np.int64)
        buf.seq[:n] = rec[:, 1].astype(np.int64)
        buf.s[:n] = rec[:, 2:2 + sd]
        buf.a[:n] = rec[:, 2 + sd:2 + sd + ad]
        buf.r[:n] = rec[:, 2 + sd + ad]
        buf.s_next[:n] = rec[:, 3 + sd + ad:3 + 2 * sd + ad]
        buf.done[:n] = rec[:, 3 + 2 * sd + ad]
        buf.size = n
        buf.ptr = n % buf.capacity
        buf.count = header["count"]
        return buf


def make_optimizers(params: list[ParamSet], lr: float) -> list[OptimState]:
    return [adam_init(p, lr) for p in params]
