"""Desk-scale continuous-control environments with known dynamics.

Both environments are deterministic simulators; ``step`` is a pure function of
``(state, action)``.  The vectorised :func:`transition` works directly on
observations, which is what the ground-truth model adapter and the
compounding-error probe use.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, InputError

log = logging.getLogger(__name__)

GRAVITY = 10.0
MASS = 1.0
LENGTH = 1.0
MAX_SPEED = 8.0
MAX_TORQUE = 2.0

GOAL = np.array([0.5, 0.5])
BOX = 1.0
MAX_FORCE = 1.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    action_low: tuple
    action_high: tuple
    horizon: int = 200
    dt: float = 0.05

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        lo, hi = np.asarray(self.action_low), np.asarray(self.action_high)
        if lo.shape != (self.act_dim,) or hi.shape != (self.act_dim,):
            raise ConfigurationError("action bounds must have one entry per action dimension")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ConfigurationError("action bounds must be finite with low < high")

    @property
    def low(self):
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self):
        return np.asarray(self.action_high, dtype=np.float64)

    @property
    def reward_bound(self):
        """Finite R with |r(s, a)| <= R for every reachable (s, a)."""
        if self.name == "pendulum":
            return np.pi ** 2 + 0.1 * MAX_SPEED ** 2 + 0.001 * MAX_TORQUE ** 2
        far = np.abs(GOAL) + BOX
        return float(far @ far + 0.01 * self.act_dim * MAX_FORCE ** 2)


def make_spec(name, horizon=200):
    if name == "pendulum":
        return EnvSpec("pendulum", 3, 1, (-MAX_TORQUE,), (MAX_TORQUE,), horizon, 0.05)
    if name == "pointmass2d":
        return EnvSpec("pointmass2d", 4, 2, (-MAX_FORCE,) * 2, (MAX_FORCE,) * 2, horizon, 0.1)
    raise ConfigurationError(f"unknown environment {name!r}; choose pendulum or pointmass2d")


@dataclass(frozen=True)
class EnvState:
    spec: EnvSpec
    internal: np.ndarray
    step_count: int = 0
    observation: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "observation", observe(self.spec, self.internal[None])[0])


def wrap_angle(theta):
    return (theta + np.pi) % (2 * np.pi) - np.pi


def observe(spec, internal):
    internal = np.atleast_2d(internal)
    if spec.name == "pendulum":
        th, thdot = internal[:, 0], internal[:, 1]
        return np.stack([np.cos(th), np.sin(th), thdot], axis=1)
    return internal.copy()


def internal_from_obs(spec, obs):
    obs = np.atleast_2d(obs)
    if spec.name == "pendulum":
        return np.stack([np.arctan2(obs[:, 1], obs[:, 0]), obs[:, 2]], axis=1)
    return obs.copy()


def _dynamics(spec, internal, action):
    """Return ``(next_internal, reward)`` for batched internal states."""
    if spec.name == "pendulum":
        th, thdot = internal[:, 0], internal[:, 1]
        u = action[:, 0]
        reward = -(wrap_angle(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)
        acc = 3 * GRAVITY / (2 * LENGTH) * np.sin(th) + 3.0 / (MASS * LENGTH ** 2) * u
        new_thdot = np.clip(thdot + acc * spec.dt, -MAX_SPEED, MAX_SPEED)
        new_th = th + new_thdot * spec.dt
        return np.stack([new_th, new_thdot], axis=1), reward
    pos, vel = internal[:, :2], internal[:, 2:]
    d = pos - GOAL
    reward = -(d * d).sum(axis=1) - 0.01 * (action * action).sum(axis=1)
    new_vel = vel + action * spec.dt
    new_pos = pos + new_vel * spec.dt
    hit = np.abs(new_pos) > BOX
    new_pos = np.clip(new_pos, -BOX, BOX)
    new_vel = np.where(hit, 0.0, new_vel)
    return np.concatenate([new_pos, new_vel], axis=1), reward


def transition(spec, obs, action):
    """Vectorised ground-truth step on observations: ``(next_obs, reward)``."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    action = np.clip(np.atleast_2d(np.asarray(action, dtype=np.float64)), spec.low, spec.high)
    nxt, reward = _dynamics(spec, internal_from_obs(spec, obs), action)
    return observe(spec, nxt), reward


def reset(spec, seed):
    rng = np.random.default_rng(seed)
    return reset_from(spec, rng)


def reset_from(spec, rng):
    if spec.name == "pendulum":
        internal = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])
    else:
        internal = np.concatenate([rng.uniform(-BOX, BOX, size=2), np.zeros(2)])
    return EnvState(spec, internal, 0)


def step(state, action):
    """Advance one step; returns ``(next_state, reward, done)``.

    ``done`` is raised only when the horizon is reached.
    """
    spec = state.spec
    action = np.asarray(action, dtype=np.float64).reshape(spec.act_dim)
    if np.any(np.isnan(action)):
        raise InputError("action contains NaN")
    clipped = np.clip(action, spec.low, spec.high)
    if np.any(clipped != action):
        log.debug("action %s clipped to %s", action, clipped)
    nxt, reward = _dynamics(spec, state.internal[None], clipped[None])
    count = state.step_count + 1
    nxt_state = replace(state, internal=nxt[0], step_count=count)
    return nxt_state, float(reward[0]), count >= spec.horizon
