"""Soft actor-critic: tanh-squashed Gaussian policy, twin Q-networks, learned temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import TrainingError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class SacConfig:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    policy_lr: float = 3e-4
    q_lr: float = 3e-4
    alpha_lr: float = 3e-4
    tau: float = 0.005
    gamma: float = 0.99
    batch_size: int = 256
    g3: int = 20
    target_entropy: float = None
    init_log_alpha: float = 0.0


class GaussianPolicy:
    def __init__(self, obs_dim, act_dim, low, high, hidden=(64, 64), activation="tanh", rng=None):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.spec = nc.MlpSpec.build(obs_dim, hidden, 2 * act_dim, activation)
        params = nc.init_mlp(self.spec, rng)
        last = self.spec.n_layers - 1
        params[f"W{last}"] *= 0.1
        self.params = nc.ParamStore(params)
        low, high = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
        self.center = ((high + low) / 2).reshape(1, -1)
        self.half = ((high - low) / 2).reshape(1, -1)

    def heads(self, s):
        out = nc.mlp_value(self.spec, self.params, s)
        d = self.act_dim
        return out[:, :d], np.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)

    def __call__(self, s, rng=None, deterministic=False):
        return sample_action(self, s, rng, deterministic)[0]


def _squash_correction(u):
    # log(1 - tanh(u)^2), written to stay finite for large |u|
    return 2.0 * (math.log(2.0) - u - nc.softplus_value(-2.0 * u))


def sample_action(policy, s, rng=None, deterministic=False):
    """Return ``(a, log_prob)``; ``a`` is the rescaled ``tanh(mu + sigma * xi)``."""
    s = np.atleast_2d(s)
    mu, log_std = policy.heads(s)
    if deterministic:
        xi = np.zeros_like(mu)
    else:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        xi = rng.standard_normal(mu.shape)
    u = mu + np.exp(log_std) * xi
    a = policy.center + policy.half * np.tanh(u)
    logp = (-0.5 * xi * xi - log_std - HALF_LOG_2PI - _squash_correction(u) - np.log(policy.half)).sum(axis=1)
    return a, logp


def log_prob_of_action(policy, s, a):
    """Density of the squashed policy at given in-bounds actions."""
    mu, log_std = policy.heads(np.atleast_2d(s))
    t = np.clip((np.atleast_2d(a) - policy.center) / policy.half, -1 + 1e-15, 1 - 1e-15)
    u = np.arctanh(t)
    xi = (u - mu) / np.exp(log_std)
    return (-0.5 * xi * xi - log_std - HALF_LOG_2PI - _squash_correction(u) - np.log(policy.half)).sum(axis=1)


def policy_graph(policy, pnodes, s, xi):
    """Reparameterised action and log-probability nodes for noise ``xi``."""
    d = policy.act_dim
    out = nc.mlp(policy.spec, pnodes, s)
    mu = nc.columns(out, 0, d)
    log_std = nc.clip(nc.columns(out, d, 2 * d), LOG_STD_MIN, LOG_STD_MAX)
    u = mu + nc.exp(log_std) * xi
    a = nc.tanh(u) * policy.half + policy.center
    correction = nc.scale(nc.scale(u, -1.0) + math.log(2.0) - nc.softplus(nc.scale(u, -2.0)), 2.0)
    per_dim = nc.scale(log_std, -1.0) - correction + (-0.5 * xi * xi - HALF_LOG_2PI - np.log(policy.half))
    return a, nc.sum(per_dim, axis=1)


class TwinQ:
    def __init__(self, obs_dim, act_dim, hidden=(64, 64), activation="tanh", tau=0.005, rng=None):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.spec = nc.MlpSpec.build(obs_dim + act_dim, hidden, 1, activation)
        self.q1 = nc.ParamStore(nc.init_mlp(self.spec, rng))
        self.q2 = nc.ParamStore(nc.init_mlp(self.spec, rng))
        self.q1_target = self.q1.fresh_copy()
        self.q2_target = self.q2.fresh_copy()
        self.tau = tau

    def value(self, params, s, a):
        return nc.mlp_value(self.spec, params, np.concatenate([s, a], axis=1))[:, 0]

    def target_min(self, s, a):
        return np.minimum(self.value(self.q1_target, s, a), self.value(self.q2_target, s, a))

    def min_q_graph(self, s, a):
        tape = s.tape
        x = nc.concat([s, a], axis=1)
        q1 = nc.mlp(self.spec, self.q1.nodes(tape, requires_grad=False), x)
        q2 = nc.mlp(self.spec, self.q2.nodes(tape, requires_grad=False), x)
        return nc.minimum(q1, q2)

    def soft_update(self, tau=None):
        tau = self.tau if tau is None else tau
        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            if tau == 1.0:
                target.flat[:] = online.flat
            else:
                target.flat *= 1.0 - tau
                target.flat += tau * online.flat


class Temperature:
    def __init__(self, act_dim, target_entropy=None, init_log_alpha=0.0):
        self.target_entropy = -float(act_dim) if target_entropy is None else float(target_entropy)
        self.params = nc.ParamStore({"log_alpha": np.array([[init_log_alpha]])})

    @property
    def log_alpha(self):
        return float(self.params["log_alpha"][0, 0])

    @property
    def alpha(self):
        return math.exp(self.log_alpha)


def bellman_target(twinq, policy, temperature, batch, gamma, rng):
    a_next, logp_next = sample_action(policy, batch.s_next, rng)
    soft_v = twinq.target_min(batch.s_next, a_next) - temperature.alpha * logp_next
    return batch.r + gamma * (1.0 - batch.done) * soft_v


def q_update(twinq, policy, temperature, batch, gamma, rng, lr=3e-4):
    """Regress both Q-networks onto the soft Bellman target, then soft-update targets."""
    y = bellman_target(twinq, policy, temperature, batch, gamma, rng)
    if not np.all(np.isfinite(y)):
        raise TrainingError("non-finite Bellman target")
    x = np.concatenate([batch.s, batch.a], axis=1)
    total = 0.0
    for params in (twinq.q1, twinq.q2):
        q, tape = nc.forward(twinq.spec, params, x)
        err = q[:, 0] - y
        total += float(np.mean(err * err))
        grads, _ = nc.backward(tape, (2.0 / len(y)) * err[:, None])
        nc.adam_step(params, grads, lr)
    twinq.soft_update()
    return total


def policy_loss_and_grads(policy, twinq, temperature, s, xi):
    tape = nc.Tape()
    p = policy.params.nodes(tape)
    a, logp = policy_graph(policy, p, tape.const(s), xi)
    min_q = twinq.min_q_graph(tape.const(s), a)
    loss = nc.mean(nc.scale(logp, temperature.alpha) - min_q)
    names = list(p)
    grads = tape.gradients(loss, [p[n] for n in names])
    return float(loss.value[0, 0]), dict(zip(names, grads)), logp.value[:, 0]


def policy_update(policy, twinq, temperature, batch, rng, lr=3e-4):
    """One step on ``E[alpha * log pi(a|s) - min Q(s, a)]``; returns ``(loss, log_probs)``."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    xi = rng.standard_normal((len(batch.s), policy.act_dim))
    loss, grads, logp = policy_loss_and_grads(policy, twinq, temperature, batch.s, xi)
    nc.adam_step(policy.params, grads, lr)
    return loss, logp


def temperature_grad(temperature, log_probs):
    """d/d(log_alpha) of ``-log_alpha * mean(log_pi + target_entropy)``."""
    return -float(np.mean(np.asarray(log_probs) + temperature.target_entropy))


def temperature_update(temperature, log_probs, lr=3e-4):
    g = temperature_grad(temperature, log_probs)
    nc.adam_step(temperature.params, {"log_alpha": np.array([[g]])}, lr)
    return temperature


@dataclass
class SacAgent:
    policy: GaussianPolicy
    twinq: TwinQ
    temperature: Temperature
    config: SacConfig

    @classmethod
    def create(cls, obs_dim, act_dim, low, high, config=None, rng=None):
        config = config or SacConfig()
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        policy = GaussianPolicy(obs_dim, act_dim, low, high, config.hidden, config.activation, rng)
        twinq = TwinQ(obs_dim, act_dim, config.hidden, config.activation, config.tau, rng)
        return cls(policy, twinq, Temperature(act_dim, config.target_entropy, config.init_log_alpha), config)

    def update(self, batch, rng):
        c = self.config
        q_loss = q_update(self.twinq, self.policy, self.temperature, batch, c.gamma, rng, c.q_lr)
        pi_loss, logp = policy_update(self.policy, self.twinq, self.temperature, batch, rng, c.policy_lr)
        temperature_update(self.temperature, logp, c.alpha_lr)
        return q_loss, pi_loss
