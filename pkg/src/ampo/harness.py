"""Run configuration, the Dyna training loop with model adaptation, metrics and sweeps.

Where each step of the loop lives:

    _Run.__init__          policy, ensemble, both buffers
    _Run.act               one real step with the current policy into D_e
    _Run.loop              the outer loop; every E real steps it runs the next three
    _Run.train_model       validation-stopped ensemble fit
    _Run.rollouts          F branched k-step rollouts into D_m
    _Run.adapt             G2 feature-alignment updates per member
    _Run.policy_updates    G3 SAC steps on mixed batches
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import envs
from .adapt import AdaptationConfig, adapt_step, begin_adaptation, estimate_w1_metric, features, finish_adaptation
from .dyna import REAL, SIMULATED, ReplayBuffer, RolloutSchedule, branched_rollout, sample_mixed, schedule_eval
from .dynamics import DynamicsEnsemble, GroundTruthModel, ModelConfig, train_ensemble
from .errors import AmpoError, ConfigurationError
from .sac import SacAgent, SacConfig, sample_action

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "AMPO_OUTPUT_DIR"
COMPOUNDING_HORIZONS = (5, 10, 20)


@dataclass
class RunConfig:
    env: str = "pendulum"
    horizon: int = 200
    seeds: tuple = (0,)
    total_real_steps: int = 30000
    pretrain_random_steps: int = 1000
    model_train_interval: int = 250
    rollout_batch: int = 400
    rollout_schedule: object = 1
    real_ratio: float = 0.05
    env_buffer_capacity: int = 1000000
    retain_epochs: int = 1
    adaptation_enabled: bool = True
    log_interval: int = 1000
    eval_episodes: int = 5
    compounding_starts: int = 10
    record_timing: bool = False
    true_dynamics: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        envs.make_spec(self.env, self.horizon)
        positive = ("horizon", "model_train_interval", "rollout_batch", "env_buffer_capacity",
                    "retain_epochs", "log_interval", "eval_episodes", "compounding_starts")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("total_real_steps", "pretrain_random_steps"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ConfigurationError("real_ratio must lie in [0, 1]")
        if not isinstance(self.rollout_schedule, (int, RolloutSchedule)) or \
                (isinstance(self.rollout_schedule, int) and self.rollout_schedule < 1):
            raise ConfigurationError("rollout_schedule must be a positive int or a schedule")
        if self.pretrain_random_steps < self.model.min_samples:
            raise ConfigurationError(
                f"pretrain_random_steps must cover the model's min_samples ({self.model.min_samples})")
        if self.sac.g3 < 0:
            raise ConfigurationError("G3 must be non-negative")

    # -- text format ---------------------------------------------------------

    def to_text(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {f.name: _format(getattr(self, f.name)) for f in fields(self) if f.name not in _SECTIONS}
        for section in _SECTIONS:
            sub = getattr(self, section)
            cp[section] = {f.name: _format(getattr(sub, f.name)) for f in fields(sub)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        unknown = set(cp.sections()) - {"run", *_SECTIONS}
        if unknown:
            raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
        subs = {}
        for section, sub_cls in _SECTIONS.items():
            values = dict(cp[section]) if cp.has_section(section) else {}
            subs[section] = _build(sub_cls, values, section)
        top = dict(cp["run"]) if cp.has_section("run") else {}
        return _build(cls, top, "run", **subs)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def replace(self, **changes):
        """Copy with changes; dotted keys (``adaptation.g2``) reach into sections."""
        cfg = dataclasses.replace(self, model=dataclasses.replace(self.model), sac=dataclasses.replace(self.sac),
                                  adaptation=dataclasses.replace(self.adaptation))
        for key, value in changes.items():
            section, name = _resolve_axis(key)
            target = cfg if section == "run" else getattr(cfg, section)
            setattr(target, name, value)
        if "adaptation" in {(_resolve_axis(k)[0]) for k in changes}:
            cfg.adaptation.__post_init__()
        cfg.validate()
        return cfg


_SECTIONS = {"model": ModelConfig, "sac": SacConfig, "adaptation": AdaptationConfig}

AXIS_ALIASES = {
    "E": ("run", "model_train_interval"),
    "F": ("run", "rollout_batch"),
    "k": ("run", "rollout_schedule"),
    "B": ("model", "ensemble_size"),
    "G2": ("adaptation", "g2"),
    "G3": ("sac", "g3"),
}


def valid_axes():
    axes = list(AXIS_ALIASES)
    axes += [f.name for f in fields(RunConfig) if f.name not in _SECTIONS]
    for section, sub_cls in _SECTIONS.items():
        axes += [f"{section}.{f.name}" for f in fields(sub_cls)]
        axes += [f.name for f in fields(sub_cls)]
    return list(dict.fromkeys(axes))


def _resolve_axis(axis):
    if axis in AXIS_ALIASES:
        return AXIS_ALIASES[axis]
    if "." in axis:
        section, name = axis.split(".", 1)
        if section in _SECTIONS and name in {f.name for f in fields(_SECTIONS[section])}:
            return section, name
    elif axis in {f.name for f in fields(RunConfig)} and axis not in _SECTIONS:
        return "run", axis
    else:
        owners = [s for s, c in _SECTIONS.items() if axis in {f.name for f in fields(c)}]
        if len(owners) == 1:
            return owners[0], axis
    raise ConfigurationError(f"invalid axis {axis!r}; valid axes: {', '.join(valid_axes())}")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, RolloutSchedule):
        return value.format()
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text):
    text = text.strip()
    if re.fullmatch(r"[+-]?\d+", text):
        return int(text)
    return float(text)


def _parse_like(default, text, name):
    text = text.strip()
    try:
        if name in ("rollout_schedule", "g2"):
            sched = RolloutSchedule.parse(text)
            return sched.x if sched.x == sched.y else sched
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if default is None:
            return None if text.lower() == "none" else float(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(_parse_scalar(p) for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {name} = {text!r}") from exc


def _build(cls, values, section, **extra):
    defaults = cls(**extra) if extra else cls()
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    kwargs = dict(extra)
    for key, text in values.items():
        kwargs[key] = _parse_like(getattr(defaults, key), text, key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def parse_axis_value(axis, text):
    section, name = _resolve_axis(axis)
    base = RunConfig()
    owner = base if section == "run" else getattr(base, section)
    return _parse_like(getattr(owner, name), text, name)


# --- metrics ----------------------------------------------------------------


@dataclass
class MetricsRecord:
    real_step: int
    epoch: int
    episodic_return: float
    model_train_loss: float
    model_val_loss: float
    compounding_error_5: float
    compounding_error_10: float
    compounding_error_20: float
    w1_estimate: float
    l_gp: float
    adaptation_steps: int
    wall_clock_seconds: float
    phase: str = "train"


CSV_COLUMNS = [f.name for f in fields(MetricsRecord)]


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow([_csv_value(getattr(rec, c)) for c in CSV_COLUMNS])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def compounding_error(model, spec, start_state, actions):
    """Mean squared open-loop error over ``len(actions)`` steps against the true simulator.

    The model is rolled with its ensemble-mean prediction; ``start_state`` is an
    observation and ``actions`` an ``(h, act_dim)`` array.
    """
    actions = np.atleast_2d(actions)
    h = len(actions)
    if h < 1:
        raise ConfigurationError("compounding error needs h >= 1")
    s_true = np.atleast_2d(start_state).astype(np.float64)
    s_model = s_true.copy()
    total = 0.0
    for i in range(h):
        a = actions[i:i + 1]
        s_true, _ = envs.transition(spec, s_true, a)
        s_model, _ = model.mean_next(s_model, a)
        d = s_model - s_true
        total += float((d * d).sum())
    return total / h


def evaluate_policy(policy, spec, episodes, rng):
    """Average undiscounted return of the deterministic policy over parallel episodes."""
    internal = np.stack([envs.reset_from(spec, rng).internal for _ in range(episodes)])
    obs = envs.observe(spec, internal)
    ret = np.zeros(episodes)
    for _ in range(spec.horizon):
        a, _ = sample_action(policy, obs, deterministic=True)
        obs, r = envs.transition(spec, obs, a)
        ret += r
    return float(ret.mean())


class _Run:
    def __init__(self, config, seed):
        self.cfg = config
        self.seed = seed
        self.spec = envs.make_spec(config.env, config.horizon)
        streams = np.random.SeedSequence(seed).spawn(9)
        (self.env_rng, self.act_rng, self.train_rng, self.rollout_rng, self.sac_rng,
         self.adapt_rng, self.eval_rng, self.probe_rng, init_rng) = [np.random.default_rng(s) for s in streams]
        obs_dim, act_dim = self.spec.obs_dim, self.spec.act_dim
        self.env_buffer = ReplayBuffer(config.env_buffer_capacity, obs_dim, act_dim, REAL)
        self.model_buffer = ReplayBuffer(self._model_capacity(0), obs_dim, act_dim, SIMULATED)
        self.ensemble = DynamicsEnsemble(obs_dim, act_dim, config.model, seed=init_rng.integers(2 ** 63))
        self.model = GroundTruthModel(self.spec, config.model.ensemble_size) if config.true_dynamics \
            else self.ensemble
        self.agent = SacAgent.create(obs_dim, act_dim, self.spec.low, self.spec.high, config.sac, init_rng)
        self.critic_init_rng = init_rng
        self.critics = {}
        self.state = envs.reset_from(self.spec, self.env_rng)
        self.episode_obs = [self.state.observation]
        self.episode_act = []
        self.episodes = []
        self.records = []
        self.last_report = None
        self.last_w1 = math.nan
        self.last_gp = math.nan
        self.adaptation_steps = 0
        self.real_steps = 0
        self.t0 = time.perf_counter()

    def _model_capacity(self, epoch):
        k = schedule_eval(self.cfg.rollout_schedule, epoch)
        return self.cfg.retain_epochs * self.cfg.rollout_batch * k

    # -- algorithm lines ----------------------------------------------------

    def act(self, action):
        prev = self.state
        self.state, reward, done = envs.step(prev, action)
        # the horizon is a time limit, not a terminal state
        self.env_buffer.add(prev.observation, action, self.state.observation, reward, False)
        self.episode_obs.append(self.state.observation)
        self.episode_act.append(np.asarray(action, dtype=np.float64).reshape(-1))
        self.real_steps += 1
        if done:
            self.episodes.append((np.array(self.episode_obs), np.array(self.episode_act)))
            self.episodes = self.episodes[-5:]
            self.state = envs.reset_from(self.spec, self.env_rng)
            self.episode_obs = [self.state.observation]
            self.episode_act = []

    def train_model(self):
        if self.cfg.true_dynamics:
            return
        self.last_report = train_ensemble(self.ensemble, self.env_buffer, rng=self.train_rng)

    def rollouts(self, epoch):
        k = schedule_eval(self.cfg.rollout_schedule, epoch)
        self.model_buffer.resize(self._model_capacity(epoch))
        policy = lambda s: sample_action(self.agent.policy, s, self.rollout_rng)[0]  # noqa: E731
        branched_rollout(self.model, policy, self.env_buffer, k, self.cfg.rollout_batch,
                         self.rollout_rng, self.model_buffer)

    def adapt(self, epoch):
        acfg = self.cfg.adaptation
        if not self.cfg.adaptation_enabled or self.cfg.true_dynamics or epoch >= acfg.adaptation_stop_epoch:
            return
        g2 = schedule_eval(acfg.g2, epoch)
        if g2 <= 0:
            return
        w1s, gps = [], []
        for i, member in enumerate(self.ensemble.members):
            key = "shared" if acfg.shared_critic else i
            state = begin_adaptation(member, acfg, self.critics.get(key), self.critic_init_rng)
            for _ in range(g2):
                entry = adapt_step(state, self.ensemble, self.env_buffer, self.model_buffer, acfg, self.adapt_rng)
            finish_adaptation(state, member)
            self.critics[key] = state.critic
            self.adaptation_steps += state.steps
            if acfg.divergence == "wasserstein1" and not state.aborted:
                real = self.env_buffer.sample(acfg.batch_size, self.probe_rng)
                sim = self.model_buffer.sample(acfg.batch_size, self.probe_rng)
                h_e = features(state, self.ensemble.normalize(real.s, real.a), "real")
                h_m = features(state, self.ensemble.normalize(sim.s, sim.a), "sim")
                w1s.append(estimate_w1_metric(state.critic, h_e, h_m))
                gps.append(entry.l_gp)
            elif not state.aborted:
                w1s.append(entry.l_wd)
                gps.append(math.nan)
        self.last_w1 = float(np.mean(w1s)) if w1s else math.nan
        self.last_gp = float(np.mean(gps)) if gps else math.nan

    def policy_updates(self):
        c = self.cfg
        for _ in range(c.sac.g3):
            ratio = c.real_ratio if len(self.model_buffer) else 1.0
            batch = sample_mixed(self.env_buffer, self.model_buffer, c.sac.batch_size, ratio, self.sac_rng)
            self.agent.update(batch, self.sac_rng)

    # -- metrics -------------------------------------------------------------

    def compounding(self):
        out = {}
        for h in COMPOUNDING_HORIZONS:
            candidates = [(obs, act) for obs, act in self.episodes if len(act) >= h]
            if not candidates:
                out[h] = math.nan
                continue
            errs = []
            for _ in range(self.cfg.compounding_starts):
                obs, act = candidates[self.probe_rng.integers(len(candidates))]
                i = int(self.probe_rng.integers(0, len(act) - h + 1))
                errs.append(compounding_error(self.model, self.spec, obs[i], act[i:i + h]))
            out[h] = float(np.mean(errs))
        return out

    def record(self, epoch, phase):
        rep = self.last_report
        ce = self.compounding()
        eval_rng = np.random.default_rng([self.seed, self.real_steps])
        rec = MetricsRecord(
            real_step=self.real_steps,
            epoch=epoch,
            episodic_return=evaluate_policy(self.agent.policy, self.spec, self.cfg.eval_episodes, eval_rng),
            model_train_loss=rep.train_loss if rep else math.nan,
            model_val_loss=rep.val_loss if rep else math.nan,
            compounding_error_5=ce[5],
            compounding_error_10=ce[10],
            compounding_error_20=ce[20],
            w1_estimate=self.last_w1,
            l_gp=self.last_gp,
            adaptation_steps=self.adaptation_steps,
            wall_clock_seconds=(time.perf_counter() - self.t0) if self.cfg.record_timing else 0.0,
            phase=phase,
        )
        self.records.append(rec)
        log.info("step %d return %.1f val %.4g w1 %.4g", rec.real_step, rec.episodic_return,
                 rec.model_val_loss, rec.w1_estimate)
        return rec

    # -- driver ----------------------------------------------------------------

    def pretrain(self):
        lo, hi = self.spec.low, self.spec.high
        for _ in range(self.cfg.pretrain_random_steps):
            self.act(self.act_rng.uniform(lo, hi))
        if self.cfg.pretrain_random_steps:
            self.train_model()
        self.record(0, "pretrain")

    def loop(self):
        c = self.cfg
        for t in range(c.total_real_steps):
            epoch = t // c.model_train_interval
            a, _ = sample_action(self.agent.policy, self.state.observation, self.act_rng)
            self.act(a[0])
            if t % c.model_train_interval == 0:
                self.train_model()
                self.rollouts(epoch)
                self.adapt(epoch)
            self.policy_updates()
            if (t + 1) % c.log_interval == 0:
                self.record(epoch, "train")


def run(config, seed=None, out_path=None):
    """Execute one full training run; returns its metrics and writes the CSV if asked.

    On failure the partial CSV is written with an ``error:<Class>`` row appended
    and the exception is re-raised.
    """
    seed = config.seeds[0] if seed is None else seed
    r = _Run(config, seed)
    try:
        r.pretrain()
        r.loop()
    except Exception as exc:
        nan = math.nan
        r.records.append(MetricsRecord(r.real_steps, -1, nan, nan, nan, nan, nan, nan, nan, nan,
                                       r.adaptation_steps, 0.0, f"error:{type(exc).__name__}"))
        if out_path is not None:
            write_csv(r.records, out_path)
        raise
    if out_path is not None:
        write_csv(r.records, out_path)
    return r.records


def output_dir(default="runs"):
    path = os.environ.get(OUTPUT_DIR_ENV, default)
    os.makedirs(path, exist_ok=True)
    return path


def _slug(value):
    text = _format(value)
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", text).strip("_")


def sweep(base, axis, values, out_dir=None):
    """Run every ``value x seed`` cell; returns the manifest ``{cell: csv_path}``."""
    section, name = _resolve_axis(axis)
    out_dir = out_dir or output_dir()
    os.makedirs(out_dir, exist_ok=True)
    manifest = {}
    for value in values:
        cfg = base.replace(**{f"{section}.{name}" if section != "run" else name: value})
        for seed in cfg.seeds:
            cell = f"{name}={_slug(value)}/seed={seed}"
            path = os.path.join(out_dir, f"{name}-{_slug(value)}-seed{seed}.csv")
            run(cfg, seed, path)
            manifest[cell] = path
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump({"axis": axis, "cells": manifest}, fh, indent=2)
    return manifest


def train_all_seeds(config, out_dir=None):
    out_dir = out_dir or output_dir()
    paths = []
    for seed in config.seeds:
        path = os.path.join(out_dir, f"{config.env}-seed{seed}.csv")
        run(config, seed, path)
        paths.append(path)
    return paths


__all__ = ["RunConfig", "MetricsRecord", "run", "sweep", "compounding_error", "evaluate_policy",
           "write_csv", "read_csv", "valid_axes", "parse_axis_value", "AmpoError"]
