"""Bootstrapped ensemble of Gaussian dynamics models split into extractor and decoder.

Each member predicts a diagonal Gaussian over ``(s' - s, r)`` given a
normalised ``(s, a)``.  Targets are standardised with buffer statistics too, so
that the tiny state deltas do not drown the reward in the shared features;
:func:`predict` maps heads back to raw units.  The hidden layers form the feature extractor; the single
output layer (mean and log-variance heads) is the decoder.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import TrainingError, UsageError

log = logging.getLogger(__name__)


@dataclass
class GaussianHead:
    """Diagonal Gaussian over ``(delta_state, reward)`` for a batch of inputs."""

    mean: np.ndarray
    logvar: np.ndarray
    state: np.ndarray

    @property
    def var(self):
        return np.exp(self.logvar)

    @property
    def next_state_mean(self):
        d = self.state.shape[1]
        return self.state + self.mean[:, :d]

    @property
    def reward_mean(self):
        return self.mean[:, -1]


@dataclass
class ModelConfig:
    ensemble_size: int = 5
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    logvar_min: float = -10.0
    logvar_max: float = 0.5
    lr: float = 1e-3
    batch_size: int = 256
    patience: int = 5
    max_steps: int = 500
    validation_fraction: float = 0.1
    max_validation: int = 1000
    min_samples: int = 32
    weight_decay: float = 0.0


class SplitNetwork:
    """One ensemble member: ``decoder(extractor(x))``."""

    def __init__(self, in_dim, target_dim, config, rng):
        hidden = tuple(config.hidden)
        self.target_dim = target_dim
        self.extractor_spec = nc.MlpSpec((in_dim,) + hidden, (config.activation,) * (len(hidden) - 1),
                                         output_activation=config.activation)
        self.decoder_spec = nc.MlpSpec((hidden[-1], 2 * target_dim), ())
        self.extractor = nc.ParamStore(nc.init_mlp(self.extractor_spec, rng))
        dec = nc.init_mlp(self.decoder_spec, rng)
        dec["max_logvar"] = np.full((1, target_dim), config.logvar_max)
        dec["min_logvar"] = np.full((1, target_dim), config.logvar_min)
        self.decoder = nc.ParamStore(dec)

    @property
    def feature_dim(self):
        return self.extractor_spec.out_dim

    def copy(self):
        new = object.__new__(SplitNetwork)
        new.target_dim = self.target_dim
        new.extractor_spec = self.extractor_spec
        new.decoder_spec = self.decoder_spec
        new.extractor = self.extractor.copy()
        new.decoder = self.decoder.copy()
        return new


def soft_clamp(raw, lo, hi):
    """Smoothly squash ``raw`` into ``[lo, hi]``.

    The two softplus walls leave ``log1p(exp(lo - hi))`` of overshoot at the
    top, which the final ``min`` removes.
    """
    out = hi - nc.softplus_value(hi - raw)
    return np.minimum(lo + nc.softplus_value(out - lo), hi)


def soft_clamp_graph(raw, lo, hi):
    out = hi - nc.softplus(hi - raw)
    return nc.minimum(lo + nc.softplus(out - lo), hi)


def decode(member, h):
    """Apply the decoder to features ``h``: ``(mean, logvar)``."""
    d = member.target_dim
    dec = member.decoder
    out = h @ dec["W0"] + dec["b0"]
    logvar = soft_clamp(out[:, d:], dec["min_logvar"], dec["max_logvar"])
    return out[:, :d], logvar


def decode_graph(member, dec_nodes, h):
    d = member.target_dim
    out = nc.dense(h, dec_nodes["W0"], dec_nodes["b0"])
    mean = nc.columns(out, 0, d)
    logvar = soft_clamp_graph(nc.columns(out, d, 2 * d), dec_nodes["min_logvar"], dec_nodes["max_logvar"])
    return mean, logvar


def nll_value(mean, logvar, target):
    """Per-sample Gaussian NLL without constants: Mahalanobis term plus log det."""
    diff = mean - target
    return (diff * diff * np.exp(-logvar) + logvar).sum(axis=1)


def nll_graph(mean, logvar, target):
    diff = mean - target
    per = nc.sum(nc.square(diff) * nc.exp(-logvar) + logvar, axis=1)
    return nc.mean(per)


def _moments(x, what):
    mu = x.mean(axis=0, keepdims=True)
    sd = x.std(axis=0, keepdims=True)
    flat = sd[0] < 1e-12
    if np.any(flat):
        log.warning("zero spread in %s dimensions %s; left unnormalized", what, np.flatnonzero(flat))
        mu[:, flat] = 0.0
        sd[:, flat] = 1.0
    return mu, sd


class DynamicsEnsemble:
    def __init__(self, obs_dim, act_dim, config=None, seed=0):
        self.config = config or ModelConfig()
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.target_dim = obs_dim + 1
        ss = np.random.SeedSequence(seed)
        self.members = [SplitNetwork(obs_dim + act_dim, self.target_dim, self.config,
                                     np.random.default_rng(child))
                        for child in ss.spawn(self.config.ensemble_size)]
        self.input_mean = np.zeros((1, obs_dim + act_dim))
        self.input_std = np.ones((1, obs_dim + act_dim))
        self.target_mean = np.zeros((1, self.target_dim))
        self.target_std = np.ones((1, self.target_dim))
        self.bootstrap_assignments = [None] * len(self.members)
        self.trained = False

    @property
    def n_members(self):
        return len(self.members)

    def normalize(self, s, a):
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
        return (x - self.input_mean) / self.input_std

    def scale_targets(self, y):
        return (y - self.target_mean) / self.target_std

    def refresh_normalization(self, s, a, y=None):
        self.input_mean, self.input_std = _moments(np.concatenate([s, a], axis=1), "input")
        if y is not None:
            self.target_mean, self.target_std = _moments(y, "target")

    def _member(self, i):
        if not 0 <= i < len(self.members):
            raise UsageError(f"member index {i} outside [0, {len(self.members)})")
        return self.members[i]

    # -- prediction -------------------------------------------------------

    def step(self, member_idx, s, a, rng):
        """Sample ``(s_next, r)``; ``member_idx`` gives the member per row."""
        member_idx = np.broadcast_to(np.asarray(member_idx), (len(s),))
        s_next = np.empty_like(s)
        r = np.empty(len(s))
        for m in np.unique(member_idx):
            rows = member_idx == m
            head = predict(self, int(m), s[rows], a[rows])
            s_next[rows], r[rows] = sample_next(head, rng)
        return s_next, r

    def mean_next(self, s, a):
        """Ensemble mean of member mean predictions: ``(s_next, r)``."""
        means = [predict(self, i, s, a).mean for i in range(self.n_members)]
        avg = np.mean(means, axis=0)
        return np.atleast_2d(s) + avg[:, :self.obs_dim], avg[:, -1]


class GroundTruthModel:
    """Adapter exposing an environment's exact dynamics through the model interface."""

    n_members = 1

    def __init__(self, spec, n_members=1):
        from . import envs
        self.spec = spec
        self._transition = envs.transition
        self.n_members = n_members

    def step(self, member_idx, s, a, rng):
        return self._transition(self.spec, s, a)

    def mean_next(self, s, a):
        return self._transition(self.spec, s, a)


def extract_features(member, s, a, ensemble=None, extractor=None):
    """Extractor output for ``(s, a)``; ``extractor`` overrides the member's weights."""
    x = ensemble.normalize(s, a) if ensemble is not None else np.concatenate(
        [np.atleast_2d(s), np.atleast_2d(a)], axis=1)
    params = member.extractor if extractor is None else extractor
    return nc.mlp_value(member.extractor_spec, params, x)


def predict(ensemble, member_index, s, a):
    member = ensemble._member(member_index)
    s = np.atleast_2d(s)
    h = extract_features(member, s, a, ensemble)
    mean, logvar = decode(member, h)
    mean = mean * ensemble.target_std + ensemble.target_mean
    logvar = logvar + 2.0 * np.log(ensemble.target_std)
    return GaussianHead(mean, logvar, s)


def sample_next(head, rng):
    """Draw ``(s_next, r)`` from the head; ``rng`` may be a seed or a Generator."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    noise = rng.standard_normal(head.mean.shape)
    draw = head.mean + np.exp(0.5 * head.logvar) * noise
    d = head.state.shape[1]
    return head.state + draw[:, :d], draw[:, d]


def targets(s, a, s_next, r):
    return np.concatenate([s_next - s, np.asarray(r).reshape(-1, 1)], axis=1)


def nll_loss(member, x, target, with_grads=True):
    """Mean NLL over a normalised batch and its gradients.

    Returns ``(loss, extractor_grads, decoder_grads)``; gradients are ``None``
    when ``with_grads`` is false.
    """
    if not with_grads:
        mean, logvar = decode(member, nc.mlp_value(member.extractor_spec, member.extractor, x))
        loss = float(nll_value(mean, logvar, target).mean())
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite model loss on batch of {len(x)}")
        return loss, None, None
    tape = nc.Tape()
    ext = member.extractor.nodes(tape)
    dec = member.decoder.nodes(tape)
    h = nc.mlp(member.extractor_spec, ext, tape.const(x))
    mean, logvar = decode_graph(member, dec, h)
    loss = nll_graph(mean, logvar, tape.const(target))
    value = float(loss.value[0, 0])
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite model loss on batch of {len(x)}; |x|max={np.abs(x).max():.3g}, "
            f"|target|max={np.abs(target).max():.3g}")
    # keep the learnable log-variance bounds from drifting apart
    bound_reg = 0.01 * (nc.sum(dec["max_logvar"]) - nc.sum(dec["min_logvar"]))
    total = loss + bound_reg
    names_e, names_d = list(ext), list(dec)
    grads = tape.gradients(total, [ext[n] for n in names_e] + [dec[n] for n in names_d])
    return value, dict(zip(names_e, grads[:len(names_e)])), dict(zip(names_d, grads[len(names_e):]))


@dataclass
class MemberReport:
    steps: int
    train_loss: float
    val_loss_before: float
    val_loss: float
    val_mse: float
    best_step: int
    regressed: bool = False


@dataclass
class TrainReport:
    members: list = field(default_factory=list)
    n_train: int = 0
    n_val: int = 0

    @property
    def train_loss(self):
        return float(np.mean([m.train_loss for m in self.members]))

    @property
    def val_loss(self):
        return float(np.mean([m.val_loss for m in self.members]))

    @property
    def val_mse(self):
        return float(np.mean([m.val_mse for m in self.members]))

    @property
    def steps(self):
        return int(np.sum([m.steps for m in self.members]))


def train_ensemble(ensemble, env_buffer, validation_fraction=None, rng=None):
    """Fit every member on its own bootstrap resample with validation early stopping."""
    cfg = ensemble.config
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    frac = cfg.validation_fraction if validation_fraction is None else validation_fraction
    data = env_buffer.all()
    n = len(data)
    if n < cfg.min_samples:
        raise UsageError(f"model training needs at least {cfg.min_samples} samples, buffer has {n}")
    y_raw = targets(data.s, data.a, data.s_next, data.r)
    ensemble.refresh_normalization(data.s, data.a, y_raw)
    x_all = ensemble.normalize(data.s, data.a)
    y_all = ensemble.scale_targets(y_raw)

    n_val = min(max(1, int(math.ceil(frac * n))), cfg.max_validation, n - 1)
    perm = rng.permutation(n)
    val_idx, pool = perm[:n_val], perm[n_val:]
    x_val, y_val = x_all[val_idx], y_all[val_idx]
    report = TrainReport(n_train=len(pool), n_val=n_val)

    for i, member in enumerate(ensemble.members):
        boot = pool[rng.integers(0, len(pool), size=len(pool))]
        ensemble.bootstrap_assignments[i] = boot
        report.members.append(_train_member(member, x_all[boot], y_all[boot], x_val, y_val, cfg, rng))
    ensemble.trained = True
    return report


def _train_member(member, x, y, x_val, y_val, cfg, rng):
    before, _, _ = nll_loss(member, x_val, y_val, with_grads=False)
    best = before
    best_step = 0
    best_ext, best_dec = member.extractor.flat.copy(), member.decoder.flat.copy()
    bs = min(cfg.batch_size, len(x))
    order = rng.permutation(len(x))
    cursor = 0
    step = 0
    while step < cfg.max_steps:
        if cursor + bs > len(order):
            order = rng.permutation(len(x))
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        _, g_ext, g_dec = nll_loss(member, x[idx], y[idx])
        nc.adam_step(member.extractor, g_ext, cfg.lr)
        nc.adam_step(member.decoder, g_dec, cfg.lr)
        step += 1
        val, _, _ = nll_loss(member, x_val, y_val, with_grads=False)
        if val < best:
            best, best_step = val, step
            best_ext[:] = member.extractor.flat
            best_dec[:] = member.decoder.flat
        elif step - best_step >= cfg.patience:
            break
    member.extractor.flat[:] = best_ext
    member.decoder.flat[:] = best_dec
    train_loss, _, _ = nll_loss(member, x, y, with_grads=False)
    mean, _ = decode(member, nc.mlp_value(member.extractor_spec, member.extractor, x_val))
    mse = float(((mean - y_val) ** 2).mean())
    regressed = best > before
    if regressed:
        log.warning("validation loss regressed: %.4g -> %.4g", before, best)
    return MemberReport(step, train_loss, before, best, mse, best_step, regressed)
