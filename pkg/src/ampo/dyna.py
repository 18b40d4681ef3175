"""Replay buffers, the rollout-length schedule and branched model rollouts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError

REAL = "real"
SIMULATED = "simulated"


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: float
    done: bool = False
    source: str = REAL


@dataclass
class Batch:
    """Column-wise batch of transitions."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    done: np.ndarray
    source: np.ndarray

    def __len__(self):
        return len(self.r)

    def __getitem__(self, i):
        return Transition(self.s[i], self.a[i], self.s_next[i], float(self.r[i]),
                          bool(self.done[i]), str(self.source[i]))

    @staticmethod
    def concat(batches):
        return Batch(*(np.concatenate([getattr(b, f) for b in batches])
                       for f in ("s", "a", "s_next", "r", "done", "source")))


class ReplayBuffer:
    """Bounded FIFO of transitions stored column-wise."""

    def __init__(self, capacity, obs_dim, act_dim, source=REAL, seed=None):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.source = source
        self.rng = np.random.default_rng(seed)
        self._alloc(self.capacity)
        self.ptr = 0
        self.size = 0

    def _alloc(self, n):
        self.s = np.zeros((n, self.obs_dim))
        self.a = np.zeros((n, self.act_dim))
        self.s_next = np.zeros((n, self.obs_dim))
        self.r = np.zeros(n)
        self.done = np.zeros(n, dtype=bool)

    def __len__(self):
        return self.size

    def add(self, s, a, s_next, r, done=False):
        self.add_batch(np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(s_next),
                       np.atleast_1d(r), np.atleast_1d(done))

    def add_transition(self, t):
        self.add(t.s, t.a, t.s_next, t.r, t.done)

    def add_batch(self, s, a, s_next, r, done=None):
        n = len(r)
        if done is None:
            done = np.zeros(n, dtype=bool)
        if s.shape[1] != self.obs_dim or a.shape[1] != self.act_dim:
            raise UsageError("transition dimensions do not match the buffer")
        if not np.all(np.isfinite(r)):
            raise UsageError("non-finite reward")
        if n >= self.capacity:
            s, a, s_next, r, done = s[-self.capacity:], a[-self.capacity:], \
                s_next[-self.capacity:], r[-self.capacity:], done[-self.capacity:]
            n = self.capacity
        idx = (self.ptr + np.arange(n)) % self.capacity
        self.s[idx] = s
        self.a[idx] = a
        self.s_next[idx] = s_next
        self.r[idx] = r
        self.done[idx] = done
        self.ptr = (self.ptr + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def ordered_indices(self):
        """Storage indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.ptr + np.arange(self.capacity)) % self.capacity

    def take(self, idx):
        idx = np.asarray(idx)
        return Batch(self.s[idx], self.a[idx], self.s_next[idx], self.r[idx], self.done[idx],
                     np.full(len(idx), self.source))

    def all(self):
        return self.take(self.ordered_indices())

    def sample_indices(self, n, rng=None):
        if self.size == 0:
            raise UsageError(f"cannot sample from an empty {self.source} buffer")
        rng = self.rng if rng is None else rng
        return rng.integers(0, self.size, size=n)

    def sample(self, n, rng=None):
        return self.take(self.sample_indices(n, rng))

    def resize(self, capacity):
        """Change capacity keeping the newest transitions."""
        capacity = int(capacity)
        if capacity == self.capacity:
            return
        keep = self.all()
        self.capacity = capacity
        self._alloc(capacity)
        self.ptr = 0
        self.size = 0
        if len(keep):
            self.add_batch(keep.s, keep.a, keep.s_next, keep.r, keep.done)

    def clear(self):
        self.ptr = 0
        self.size = 0


@dataclass(frozen=True)
class RolloutSchedule:
    """Length that grows linearly from ``x`` at epoch ``a`` to ``y`` at epoch ``b``."""

    a: int
    b: int
    x: int
    y: int

    def __post_init__(self):
        if min(self.a, self.b) < 0 or min(self.x, self.y) < 0:
            raise ConfigurationError(f"schedule entries must be non-negative: {self}")
        if not self.a < self.b:
            raise ConfigurationError(f"schedule needs a < b: {self}")
        if self.x > self.y:
            raise ConfigurationError(f"schedule needs x <= y: {self}")

    def __call__(self, epoch):
        return schedule_eval(self, epoch)

    def __str__(self):
        return f"[{self.a},{self.b},{self.x},{self.y}]"

    @classmethod
    def constant(cls, k):
        return cls(0, 1, k, k)

    @classmethod
    def parse(cls, text):
        text = str(text).strip()
        if text.startswith("["):
            parts = [int(p) for p in text.strip("[]").split(",")]
            if len(parts) != 4:
                raise ConfigurationError(f"schedule needs four entries [a,b,x,y], got {text!r}")
            return cls(*parts)
        return cls.constant(int(text))

    def format(self):
        if self.x == self.y:
            return str(self.x)
        return str(self)


def schedule_eval(sched, epoch):
    if epoch < 0:
        raise UsageError("epoch must be non-negative")
    if isinstance(sched, int):
        return sched
    raw = sched.x + (epoch - sched.a) * (sched.y - sched.x) / (sched.b - sched.a)
    return int(min(max(math.floor(raw + 0.5), sched.x), sched.y))


def branched_rollout(model, policy, env_buffer, k, batch, rng, model_buffer=None):
    """Roll the policy ``k`` steps under the model from ``batch`` start states.

    ``model`` needs ``n_members`` and ``step(member_idx, s, a, rng)`` returning
    ``(s_next, r)``; members are drawn uniformly per transition.  ``policy`` maps
    a batch of observations to actions.  Returns the generated :class:`Batch`
    and the ``(k, batch)`` array of member indices.
    """
    if len(env_buffer) == 0:
        raise UsageError("branched rollouts need a non-empty environment buffer")
    s = env_buffer.sample(batch, rng).s
    chunks = []
    members = np.empty((k, batch), dtype=np.int64)
    for step in range(k):
        a = policy(s)
        idx = rng.integers(0, model.n_members, size=batch)
        members[step] = idx
        s_next, r = model.step(idx, s, a, rng)
        chunks.append(Batch(s, a, s_next, r, np.zeros(batch, dtype=bool),
                            np.full(batch, SIMULATED)))
        s = s_next
    out = Batch.concat(chunks)
    if model_buffer is not None:
        model_buffer.add_batch(out.s, out.a, out.s_next, out.r, out.done)
    return out, members


def sample_mixed(env_buffer, model_buffer, batch, real_ratio, rng):
    """``ceil(real_ratio * batch)`` real transitions plus simulated ones."""
    if not 0.0 <= real_ratio <= 1.0:
        raise ConfigurationError("real_ratio must lie in [0, 1]")
    n_real = int(math.ceil(real_ratio * batch - 1e-9))
    n_sim = batch - n_real
    parts = []
    if n_real:
        if len(env_buffer) == 0:
            raise UsageError("environment buffer is empty but real samples were requested")
        parts.append(env_buffer.sample(n_real, rng))
    if n_sim:
        if model_buffer is None or len(model_buffer) == 0:
            raise UsageError("model buffer is empty but simulated samples were requested")
        parts.append(model_buffer.sample(n_sim, rng))
    return Batch.concat(parts)
