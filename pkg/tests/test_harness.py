import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ampo import cli, envs, harness
from ampo.dyna import RolloutSchedule
from ampo.dynamics import GroundTruthModel, ModelConfig
from ampo.adapt import AdaptationConfig
from ampo.errors import ConfigurationError
from ampo.harness import CSV_COLUMNS, RunConfig, compounding_error
from ampo.sac import SacConfig


def tiny(**changes):
    cfg = RunConfig(
        horizon=20, total_real_steps=60, pretrain_random_steps=64, model_train_interval=30, rollout_batch=20,
        log_interval=30, eval_episodes=2, compounding_starts=2,
        model=ModelConfig(ensemble_size=2, hidden=(8, 8), max_steps=20, batch_size=32),
        sac=SacConfig(hidden=(8, 8), batch_size=16, g3=1),
        adaptation=AdaptationConfig(g2=2, critic_hidden=(8,), batch_size=16),
    )
    return cfg.replace(**changes) if changes else cfg


def tiny_text(**changes):
    return tiny(**changes).to_text()


# --- configuration ----------------------------------------------------------


def test_default_config_round_trips():
    cfg = RunConfig()
    assert RunConfig.from_text(cfg.to_text()) == cfg


@settings(max_examples=40, deadline=None)
@given(E=st.integers(1, 1000), F=st.integers(1, 5000), ratio=st.floats(0, 1),
       k=st.one_of(st.integers(1, 30), st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(1, 10),
                                                 st.integers(1, 10))),
       g2=st.integers(0, 20), lr=st.floats(1e-6, 1.0), hidden=st.lists(st.integers(1, 128), min_size=1, max_size=3),
       strategy=st.sampled_from(["asymmetric", "shared_weights", "fixed_real"]), enabled=st.booleans())
def test_config_round_trips_losslessly(E, F, ratio, k, g2, lr, hidden, strategy, enabled):
    if isinstance(k, tuple):
        a, b, x, y = k
        if a == b:
            b = a + 1
        k = RolloutSchedule(min(a, b), max(a, b), min(x, y), max(x, y)) if x != y else x
    cfg = RunConfig(model_train_interval=E, rollout_batch=F, real_ratio=ratio, rollout_schedule=k,
                    adaptation_enabled=enabled, model=ModelConfig(hidden=tuple(hidden), lr=lr),
                    adaptation=AdaptationConfig(g2=g2, strategy=strategy))
    assert RunConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("change", [
    {"model_train_interval": 0}, {"rollout_batch": -1}, {"real_ratio": 1.5}, {"rollout_schedule": 0},
    {"env": "cartpole"}, {"pretrain_random_steps": 4}, {"G3": -1}, {"adaptation.strategy": "nope"},
])
def test_invalid_configs_rejected(change):
    with pytest.raises(ConfigurationError):
        tiny(**change)


def test_config_text_errors():
    with pytest.raises(ConfigurationError):
        RunConfig.from_text("[run]\nbogus = 1\n")
    with pytest.raises(ConfigurationError):
        RunConfig.from_text("[extra]\nx = 1\n")
    with pytest.raises(ConfigurationError):
        RunConfig.from_text("[run]\nrollout_batch = many\n")


def test_schedule_text_in_config():
    cfg = RunConfig.from_text("[run]\nrollout_schedule = [20, 100, 1, 5]\n[adaptation]\ng2 = [0, 10, 2, 8]\n")
    assert cfg.rollout_schedule == RolloutSchedule(20, 100, 1, 5)
    assert cfg.adaptation.g2 == RolloutSchedule(0, 10, 2, 8)


def test_axis_resolution():
    assert harness.parse_axis_value("G2", "[0, 10, 1, 3]") == RolloutSchedule(0, 10, 1, 3)
    assert harness.parse_axis_value("strategy", "fixed_real") == "fixed_real"
    assert harness.parse_axis_value("F", "7") == 7
    with pytest.raises(ConfigurationError, match="valid axes"):
        harness.parse_axis_value("warp_speed", "9")


# --- compounding error --------------------------------------------------------


def test_compounding_error_is_zero_for_true_dynamics():
    spec = envs.make_spec("pendulum")
    rng = np.random.default_rng(0)
    s0 = envs.reset_from(spec, rng).observation
    acts = rng.uniform(-2, 2, size=(20, 1))
    for h in (1, 5, 20):
        assert compounding_error(GroundTruthModel(spec), spec, s0, acts[:h]) == 0.0


class Shifted:
    def __init__(self, spec, bias):
        self.spec, self.bias = spec, np.asarray(bias)

    def mean_next(self, s, a):
        s2, r = envs.transition(self.spec, s, a)
        return s2 + self.bias, r


def test_one_step_compounding_error_is_squared_error():
    spec = envs.make_spec("pointmass2d")
    s0 = envs.reset_from(spec, np.random.default_rng(1)).observation
    bias = np.array([0.1, -0.2, 0.0, 0.3])
    assert compounding_error(Shifted(spec, bias), spec, s0, [[0.5, -0.5]]) == pytest.approx((bias ** 2).sum(), abs=1e-14)


def test_compounding_error_matches_linear_bias_oracle(monkeypatch):
    A = np.array([[1.0, 0.1], [-0.2, 0.9]])
    Bm = np.array([[0.0], [0.1]])
    b = np.array([0.05, -0.02])
    monkeypatch.setattr(harness.envs, "transition", lambda spec, s, a: (s @ A.T + a @ Bm.T, np.zeros(len(s))))

    class Biased:
        def mean_next(self, s, a):
            return s @ A.T + a @ Bm.T + b, None

    h = 12
    acts = np.random.default_rng(0).normal(size=(h, 1))
    # error obeys e_{i+1} = A e_i + b from e_0 = 0
    e, want = np.zeros(2), 0.0
    for _ in range(h):
        e = A @ e + b
        want += e @ e
    assert compounding_error(Biased(), None, np.array([0.3, -0.1]), acts) == pytest.approx(want / h, rel=1e-12)


def test_compounding_error_needs_a_step():
    with pytest.raises(ConfigurationError):
        compounding_error(None, None, np.zeros(3), np.zeros((0, 1)))


# --- runs ---------------------------------------------------------------------


def test_empty_loop_records_only_pretraining(tmp_path):
    path = tmp_path / "run.csv"
    recs = harness.run(tiny(total_real_steps=0), out_path=path)
    assert [r.phase for r in recs] == ["pretrain"]
    rows = harness.read_csv(path)
    assert len(rows) == 1 and list(rows[0]) == CSV_COLUMNS
    assert math.isfinite(float(rows[0]["model_val_loss"]))


def test_run_records_and_baseline_schema(tmp_path):
    recs = harness.run(tiny(), out_path=tmp_path / "ampo.csv")
    base = harness.run(tiny(adaptation_enabled=False), out_path=tmp_path / "base.csv")
    assert [r.real_step for r in recs] == [64, 94, 124]
    assert recs[-1].adaptation_steps > 0 and base[-1].adaptation_steps == 0
    assert math.isfinite(recs[-1].w1_estimate) and math.isnan(base[-1].w1_estimate)
    heads = [(tmp_path / n).read_text().splitlines()[0] for n in ("ampo.csv", "base.csv")]
    assert heads[0] == heads[1] == ",".join(CSV_COLUMNS)


def test_runs_are_bit_identical(tmp_path):
    harness.run(tiny(), out_path=tmp_path / "a.csv")
    harness.run(tiny(), out_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    harness.run(tiny(), seed=1, out_path=tmp_path / "c.csv")
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_failed_run_flushes_an_error_row(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise harness.AmpoError("synthetic failure")

    monkeypatch.setattr(harness._Run, "rollouts", boom)
    with pytest.raises(harness.AmpoError):
        harness.run(tiny(), out_path=tmp_path / "x.csv")
    rows = harness.read_csv(tmp_path / "x.csv")
    assert rows[0]["phase"] == "pretrain" and rows[-1]["phase"] == "error:AmpoError"


def test_true_dynamics_option_skips_model_fitting():
    recs = harness.run(tiny(true_dynamics=True))
    assert recs[-1].compounding_error_5 == 0.0 and math.isnan(recs[-1].model_val_loss)


def test_sweep_writes_manifest_and_matches_single_run(tmp_path):
    cfg = tiny(total_real_steps=30)
    manifest = harness.sweep(cfg, "G2", [0, 3], tmp_path)
    assert len(manifest) == 2
    saved = json.loads((tmp_path / "manifest.json").read_text())
    assert saved["axis"] == "G2" and saved["cells"] == {k: str(v) for k, v in manifest.items()}
    single = harness.sweep(cfg, "G2", [cfg.adaptation.g2], tmp_path / "one")
    harness.run(cfg, out_path=tmp_path / "plain.csv")
    (path,) = single.values()
    assert open(path, "rb").read() == (tmp_path / "plain.csv").read_bytes()
    with pytest.raises(ConfigurationError, match="valid axes"):
        harness.sweep(cfg, "nonsense", [1], tmp_path)


# --- command line ---------------------------------------------------------------


def test_cli_version(capsys):
    assert cli.main(["version"]) == 0
    assert capsys.readouterr().out.strip() == "0.1.0"


def test_cli_theory_check(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert cli.main(["theory-check", "--instances", "30", "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("PASS 30/30")
    assert out.exists()


def test_cli_train_uses_output_dir_env(tmp_path, monkeypatch):
    cfg = tmp_path / "c.ini"
    cfg.write_text(tiny_text(total_real_steps=30))
    monkeypatch.setenv(harness.OUTPUT_DIR_ENV, str(tmp_path / "outs"))
    assert cli.main(["train", str(cfg)]) == 0
    assert (tmp_path / "outs" / "pendulum-seed0.csv").exists()


def test_cli_sweep_with_schedule_values(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(tiny_text(total_real_steps=30))
    assert cli.main(["sweep", str(cfg), "--axis", "k", "--values", "1,[0,2,1,2]", "--out", str(tmp_path)]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 2


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nrollout_batch = 0\n")
    assert cli.main(["train", str(bad)]) == 2
    assert cli.main(["train", str(tmp_path / "missing.ini")]) == 1
    good = tmp_path / "good.ini"
    good.write_text(tiny_text())
    assert cli.main(["sweep", str(good), "--axis", "bogus", "--values", "1"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code != 0


def test_split_values_keeps_schedules_whole():
    assert cli.split_values("1, [0, 10, 1, 5],3") == ["1", "[0, 10, 1, 5]", "3"]
