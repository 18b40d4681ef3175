import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ampo import envs
from ampo.errors import ConfigurationError, InputError

PENDULUM = envs.make_spec("pendulum")
POINT = envs.make_spec("pointmass2d")


def test_reset_is_deterministic():
    a, b = envs.reset(PENDULUM, 11), envs.reset(PENDULUM, 11)
    assert np.array_equal(a.internal, b.internal) and np.array_equal(a.observation, b.observation)


def test_pendulum_reset_ranges():
    for seed in range(200):
        th, thdot = envs.reset(PENDULUM, seed).internal
        assert -math.pi <= th <= math.pi and -1.0 <= thdot <= 1.0


def test_pendulum_reset_angle_mean_is_zero():
    rng = np.random.default_rng(0)
    th = np.array([envs.reset_from(PENDULUM, rng).internal[0] for _ in range(10_000)])
    se = (2 * math.pi / math.sqrt(12)) / math.sqrt(len(th))
    assert abs(th.mean()) < 3 * se


def test_upright_equilibrium_is_fixed_point():
    s = envs.EnvState(PENDULUM, np.array([0.0, 0.0]))
    nxt, r, done = envs.step(s, [0.0])
    assert np.array_equal(nxt.internal, [0.0, 0.0]) and r == 0.0 and not done


def test_pointmass_origin_at_rest_stays():
    s = envs.EnvState(POINT, np.zeros(4))
    nxt, _, _ = envs.step(s, [0.0, 0.0])
    assert np.array_equal(nxt.internal, np.zeros(4))


def test_pendulum_step_matches_hand_euler():
    s = envs.EnvState(PENDULUM, np.array([math.pi / 2, 0.0]))
    nxt, r, _ = envs.step(s, [0.0])
    # hand calculation: acc = 3*10/2 * sin(pi/2) = 15; thdot = 0.75; th = pi/2 + 0.0375
    assert nxt.internal[1] == pytest.approx(0.75, abs=1e-15)
    assert nxt.internal[0] == pytest.approx(math.pi / 2 + 0.0375, abs=1e-15)
    assert r == pytest.approx(-(math.pi / 2) ** 2, abs=1e-15)
    np.testing.assert_allclose(nxt.observation, [math.cos(math.pi / 2 + 0.0375), math.sin(math.pi / 2 + 0.0375), 0.75])


def test_nan_action_rejected():
    with pytest.raises(InputError):
        envs.step(envs.reset(PENDULUM, 0), [float("nan")])


def test_out_of_bounds_action_is_clipped_and_logged(caplog):
    s = envs.reset(PENDULUM, 0)
    with caplog.at_level(logging.DEBUG, logger="ampo.envs"):
        a, ra, _ = envs.step(s, [5.0])
    b, rb, _ = envs.step(s, [2.0])
    assert np.array_equal(a.internal, b.internal) and ra == rb
    assert any("clipped" in r.message for r in caplog.records)


def test_done_exactly_at_horizon():
    spec = envs.make_spec("pointmass2d", horizon=3)
    s = envs.reset(spec, 0)
    dones = []
    for _ in range(3):
        s, _, d = envs.step(s, [0.1, 0.1])
        dones.append(d)
    assert dones == [False, False, True] and s.step_count == 3


def test_bad_names_and_horizons():
    with pytest.raises(ConfigurationError):
        envs.make_spec("hopper")
    with pytest.raises(ConfigurationError):
        envs.make_spec("pendulum", horizon=0)


@pytest.mark.parametrize("spec", [PENDULUM, POINT], ids=lambda s: s.name)
def test_vectorised_transition_matches_step(spec):
    rng = np.random.default_rng(3)
    s = envs.reset(spec, 3)
    for _ in range(30):
        a = rng.uniform(spec.low, spec.high)
        nxt, r, _ = envs.step(s, a)
        obs, rv = envs.transition(spec, s.observation, a)
        np.testing.assert_allclose(obs[0], nxt.observation, atol=1e-12)
        assert rv[0] == pytest.approx(r, abs=1e-12)
        s = nxt


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(-10, 10), min_size=20, max_size=20), st.sampled_from(["pendulum", "pointmass2d"]))
def test_rewards_bounded_and_observations_finite(seed, actions, name):
    spec = envs.make_spec(name)
    s = envs.reset(spec, seed)
    for u in actions:
        s, r, _ = envs.step(s, np.full(spec.act_dim, u))
        assert abs(r) <= spec.reward_bound
        assert np.all(np.isfinite(s.observation))
        assert s.step_count <= spec.horizon


def test_step_is_pure():
    s = envs.reset(POINT, 5)
    a = envs.step(s, [0.3, -0.2])
    b = envs.step(s, [0.3, -0.2])
    assert np.array_equal(a[0].internal, b[0].internal) and a[1] == b[1]
