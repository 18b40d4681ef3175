"""Feature-distribution alignment between real and model-generated inputs.

A dynamics member's extractor is copied into a real-side and a simulated-side
extractor.  Alignment then alternates critic ascent on the Wasserstein-1 dual
objective (with a gradient penalty on random interpolates) and one descent step
on the extractors, or directly descends an unbiased MMD^2 estimate.  The
simulated-side weights are written back to the member when the event ends; the
decoder is never touched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .dyna import RolloutSchedule
from .errors import ConfigurationError, UsageError

log = logging.getLogger(__name__)

DIVERGENCES = ("wasserstein1", "mmd")
STRATEGIES = ("asymmetric", "shared_weights", "fixed_real")
DEFAULT_BANDWIDTHS = (0.001, 0.005, 0.01, 0.05, 0.1, 1.0, 5.0, 10.0)


@dataclass
class AdaptationConfig:
    divergence: str = "wasserstein1"
    strategy: str = "asymmetric"
    alpha: float = 10.0
    critic_steps: int = 5
    g2: object = 6
    adaptation_stop_epoch: int = 40
    mmd_bandwidths: tuple = DEFAULT_BANDWIDTHS
    batch_size: int = 64
    critic_hidden: tuple = (32, 32)
    critic_activation: str = "tanh"
    critic_lr: float = 1e-3
    extractor_lr: float = 1e-4
    shared_critic: bool = False

    def __post_init__(self):
        if self.divergence not in DIVERGENCES:
            raise ConfigurationError(f"divergence must be one of {DIVERGENCES}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        if self.alpha < 0:
            raise ConfigurationError("gradient-penalty coefficient must be >= 0")
        if self.critic_steps < 1:
            raise ConfigurationError("critic_steps must be >= 1")
        if any(b <= 0 for b in self.mmd_bandwidths):
            raise ConfigurationError("MMD bandwidths must be positive")
        if not isinstance(self.g2, (int, RolloutSchedule)):
            raise ConfigurationError("g2 must be an int or a schedule")


class Critic:
    """Scalar-output smooth MLP over feature vectors.

    The output layer starts at zero, so the critic is flat and its first update
    follows the dual objective alone.  With a random start the penalty pulls
    the slope to norm one in whatever direction it happens to point, which in
    one dimension can lock the critic onto the wrong sign.
    """

    def __init__(self, feature_dim, hidden=(32, 32), activation="tanh", rng=None):
        self.spec = nc.MlpSpec.build(feature_dim, hidden, 1, activation)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        params = nc.init_mlp(self.spec, rng)
        params[f"W{self.spec.n_layers - 1}"][:] = 0.0
        self.params = nc.ParamStore(params)

    @classmethod
    def from_params(cls, spec, params):
        c = object.__new__(cls)
        c.spec = spec
        c.params = params
        return c

    def __call__(self, h):
        return nc.mlp_value(self.spec, self.params, h)[:, 0]

    def copy(self):
        return Critic.from_params(self.spec, self.params.copy())


@dataclass
class AdaptationState:
    extractor_real: nc.ParamStore
    extractor_sim: nc.ParamStore
    critic: Critic
    strategy: str
    extractor_spec: nc.MlpSpec
    steps: int = 0
    aborted: bool = False
    history: list = field(default_factory=list)


@dataclass
class StepLog:
    l_wd: float
    l_gp: float
    loss: float
    aborted: bool = False


def begin_adaptation(member, config, critic=None, rng=None):
    """Copy the member's extractor into the two sides and attach a critic."""
    if config.strategy == "shared_weights":
        real = sim = member.extractor.fresh_copy()
    else:
        real = member.extractor.fresh_copy()
        sim = member.extractor.fresh_copy()
    if critic is None:
        critic = Critic(member.feature_dim, config.critic_hidden, config.critic_activation, rng)
    return AdaptationState(real, sim, critic, config.strategy, member.extractor_spec)


def finish_adaptation(state, member):
    """Write the simulated-side extractor back into ``member`` (decoder untouched)."""
    if state.aborted:
        log.warning("adaptation aborted; member left unadapted")
        return member
    member.extractor.load(state.extractor_sim)
    return member


def critic_objective(critic, h_e, h_m):
    """Mean critic score on real features minus mean on simulated features."""
    if len(h_e) == 0 or len(h_m) == 0:
        raise UsageError("critic objective needs non-empty batches")
    return float(critic(h_e).mean() - critic(h_m).mean())


def estimate_w1_metric(critic, h_e, h_m):
    """Dual-objective value at a trained critic, reported as the W1 estimate."""
    return critic_objective(critic, h_e, h_m)


def interpolate(h_e, h_m, rng):
    """Pair shuffled rows by index and mix each pair with a Uniform(0, 1) weight."""
    n = min(len(h_e), len(h_m))
    he = h_e[rng.permutation(len(h_e))[:n]]
    hm = h_m[rng.permutation(len(h_m))[:n]]
    u = rng.uniform(size=(n, 1))
    return u * he + (1.0 - u) * hm


def gradient_penalty(critic, h_e, h_m, rng):
    """``mean((||grad f_c(h_hat)|| - 1)^2)`` at random interpolates and its parameter gradient."""
    if h_e.shape[1] != h_m.shape[1]:
        raise UsageError("feature dimensions differ")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    h_hat = interpolate(h_e, h_m, rng)
    _, penalty, grads = nc.input_gradient_norm_grad(critic.spec, critic.params, h_hat)
    return penalty, grads


def _wd_critic_grads(critic, h_e, h_m):
    tape = nc.Tape()
    p = critic.params.nodes(tape)
    f_e = nc.mlp(critic.spec, p, tape.const(h_e))
    f_m = nc.mlp(critic.spec, p, tape.const(h_m))
    wd = nc.mean(f_e) - nc.mean(f_m)
    names = list(p)
    grads = tape.gradients(wd, [p[n] for n in names])
    return float(wd.value[0, 0]), dict(zip(names, grads))


def critic_step(critic, h_e, h_m, alpha, lr, rng):
    """One ascent step on ``L_WD - alpha * L_gp``; returns ``(L_WD, L_gp)``."""
    wd, g_wd = _wd_critic_grads(critic, h_e, h_m)
    gp, g_gp = gradient_penalty(critic, h_e, h_m, rng)
    grads = {n: alpha * g_gp[n] - g_wd[n] for n in g_wd}
    nc.adam_step(critic.params, grads, lr)
    return wd, gp


def train_critic(critic, h_e, h_m, steps, alpha=10.0, lr=1e-3, batch=None, rng=None):
    """Fit the critic to fixed feature samples; returns the final ``(L_WD, L_gp)``."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    wd = gp = float("nan")
    for _ in range(steps):
        if batch is None:
            be, bm = h_e, h_m
        else:
            be = h_e[rng.integers(0, len(h_e), batch)]
            bm = h_m[rng.integers(0, len(h_m), batch)]
        wd, gp = critic_step(critic, be, bm, alpha, lr, rng)
    return wd, gp


# --- MMD ----------------------------------------------------------------------


def _check_mmd_sizes(n_e, n_m):
    if n_e < 2 or n_m < 2:
        raise UsageError("unbiased MMD^2 needs at least two samples on each side")


def _kernel_graph(sq_dist, bandwidths):
    k = None
    for bw in bandwidths:
        term = nc.exp(nc.scale(sq_dist, -1.0 / bw))
        k = term if k is None else k + term
    return k


def _sq_dist_graph(x, y):
    sx = nc.sum(nc.square(x), axis=1)
    sy = nc.sum(nc.square(y), axis=1)
    return sx + nc.transpose(sy) - nc.scale(nc.matmul(x, nc.transpose(y)), 2.0)


def mmd2_graph(h_e, h_m, bandwidths=DEFAULT_BANDWIDTHS):
    """Record the unbiased MMD^2 estimate between two feature nodes."""
    n_e, n_m = h_e.value.shape[0], h_m.value.shape[0]
    _check_mmd_sizes(n_e, n_m)
    off_e = 1.0 - np.eye(n_e)
    off_m = 1.0 - np.eye(n_m)
    k_ee = nc.sum(nc.mul(_kernel_graph(_sq_dist_graph(h_e, h_e), bandwidths), off_e))
    k_mm = nc.sum(nc.mul(_kernel_graph(_sq_dist_graph(h_m, h_m), bandwidths), off_m))
    k_em = nc.sum(_kernel_graph(_sq_dist_graph(h_e, h_m), bandwidths))
    return (nc.scale(k_ee, 1.0 / (n_e * (n_e - 1))) + nc.scale(k_mm, 1.0 / (n_m * (n_m - 1)))
            - nc.scale(k_em, 2.0 / (n_e * n_m)))


def mmd2_unbiased(h_e, h_m, bandwidths=DEFAULT_BANDWIDTHS):
    h_e, h_m = np.atleast_2d(h_e), np.atleast_2d(h_m)
    _check_mmd_sizes(len(h_e), len(h_m))
    tape = nc.Tape()
    return float(mmd2_graph(tape.const(h_e), tape.const(h_m), bandwidths).value[0, 0])


# --- the alternating step -----------------------------------------------------


def _extractor_step(state, x_e, x_m, config):
    """One descent step on the alignment loss over the extractors the strategy allows."""
    tape = nc.Tape()
    spec = state.extractor_spec
    shared = state.extractor_real is state.extractor_sim
    freeze_real = state.strategy == "fixed_real"
    sim_nodes = state.extractor_sim.nodes(tape)
    real_nodes = sim_nodes if shared else state.extractor_real.nodes(tape, requires_grad=not freeze_real)
    h_e = nc.mlp(spec, real_nodes, tape.const(x_e))
    h_m = nc.mlp(spec, sim_nodes, tape.const(x_m))
    if config.divergence == "mmd":
        loss = mmd2_graph(h_e, h_m, config.mmd_bandwidths)
    else:
        cp = state.critic.params.nodes(tape, requires_grad=False)
        loss = nc.mean(nc.mlp(state.critic.spec, cp, h_e)) - nc.mean(nc.mlp(state.critic.spec, cp, h_m))
    value = float(loss.value[0, 0])
    if not math.isfinite(value):
        return value
    names = list(sim_nodes)
    if shared or freeze_real:
        grads = tape.gradients(loss, [sim_nodes[n] for n in names])
        nc.adam_step(state.extractor_sim, dict(zip(names, grads)), config.extractor_lr)
    else:
        grads = tape.gradients(loss, [sim_nodes[n] for n in names] + [real_nodes[n] for n in names])
        nc.adam_step(state.extractor_sim, dict(zip(names, grads[:len(names)])), config.extractor_lr)
        nc.adam_step(state.extractor_real, dict(zip(names, grads[len(names):])), config.extractor_lr)
    return value


def adapt_on_inputs(state, x_e, x_m, config, rng):
    """One adaptation update from normalised real inputs ``x_e`` and simulated ``x_m``."""
    if state.aborted:
        return StepLog(float("nan"), float("nan"), float("nan"), True)
    spec = state.extractor_spec
    wd = gp = float("nan")
    try:
        if config.divergence == "wasserstein1":
            h_e = nc.mlp_value(spec, state.extractor_real, x_e)
            h_m = nc.mlp_value(spec, state.extractor_sim, x_m)
            for _ in range(config.critic_steps):
                wd, gp = critic_step(state.critic, h_e, h_m, config.alpha, config.critic_lr, rng)
        loss = _extractor_step(state, x_e, x_m, config)
    except (FloatingPointError, ArithmeticError) as exc:
        log.warning("adaptation diverged: %s", exc)
        loss = float("nan")
    if not (math.isfinite(loss) and (config.divergence == "mmd" or math.isfinite(wd + gp))):
        log.warning("adaptation loss became non-finite; aborting this event")
        state.aborted = True
        return StepLog(wd, gp, loss, True)
    state.steps += 1
    entry = StepLog(wd if config.divergence == "wasserstein1" else loss, gp, loss)
    state.history.append(entry)
    return entry


def adapt_step(state, ensemble, env_buffer, model_buffer, config, rng):
    """Sample real and simulated ``(s, a)`` batches and run one adaptation update."""
    if len(env_buffer) == 0 or len(model_buffer) == 0:
        raise UsageError("adaptation needs both buffers non-empty")
    real = env_buffer.sample(config.batch_size, rng)
    sim = model_buffer.sample(config.batch_size, rng)
    return adapt_on_inputs(state, ensemble.normalize(real.s, real.a),
                           ensemble.normalize(sim.s, sim.a), config, rng)


def features(state, x, side):
    params = state.extractor_real if side == "real" else state.extractor_sim
    return nc.mlp_value(state.extractor_spec, params, x)
