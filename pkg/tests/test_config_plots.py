"""Profile/config loading and figure rendering."""

import math

import pytest

from ilq.agent import ConfigurationError
from ilq.config import PROFILES, TASK_PROFILES, load_run_config
from ilq.plots import render_audit_figure, render_training_figure


def test_profiles_have_both_scales():
    assert set(PROFILES) == {"desk", "paper"}
    assert PROFILES["paper"]["agent"]["train_steps"] == 1_000_000
    assert PROFILES["paper"]["agent"]["hidden"] == (256, 256, 256)
    assert PROFILES["desk"]["agent"]["train_steps"] == 50_000


def test_task_profiles_ship_published_pairs():
    assert TASK_PROFILES["halfcheetah-m"] == (0.95, 1.0)
    assert TASK_PROFILES["hopper-mr"] == (0.8, -0.5)
    assert TASK_PROFILES["hopper-me"] == (0.4, -0.5)
    assert TASK_PROFILES["maze2d-u"] == (0.95, -0.5)
    assert TASK_PROFILES["pen-human"] == (0.8, -1.0)
    for eta, _ in TASK_PROFILES.values():
        assert 0.0 <= eta <= 1.0


def test_load_run_config_defaults():
    cfg = load_run_config(None, "desk")
    agent = cfg.agent_config()
    assert agent.eta == 0.9
    assert agent.batch_size == 256
    assert agent.gamma == 0.99
    assert agent.tau == 0.005
    assert agent.m_samples == 10


def test_load_run_config_rejects_unknown_profile():
    with pytest.raises(ConfigurationError):
        load_run_config(None, "warehouse")


def test_yaml_overrides_and_path_validation(tmp_path):
    data = tmp_path / "d.ilqd"
    data.write_bytes(b"ILQD")
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(f"profile: desk\ndata: {data}\nagent:\n  eta: 0.6\n")
    cfg = load_run_config(cfg_path, "desk")
    assert cfg.agent_config().eta == 0.6
    assert cfg.data == str(data)

    cfg_path.write_text("profile: desk\ndata: /does/not/exist.ilqd\n")
    with pytest.raises(ConfigurationError, match="data"):
        load_run_config(cfg_path, "desk")


def test_training_figure_tolerates_nan_columns(tmp_path):
    rows = [
        {"step": 1000, "critic_loss": 0.5, "actor_loss": -0.1, "q_in_mean": 1.0,
         "q_ood_mean": math.nan, "y_img_mean": math.nan, "y_lmt_mean": math.nan,
         "frac_lmt": math.nan, "eval_return": -20.0, "normalized_score": 40.0},
        {"step": 2000, "critic_loss": 0.4, "actor_loss": -0.2, "q_in_mean": 1.5,
         "q_ood_mean": math.nan, "y_img_mean": math.nan, "y_lmt_mean": math.nan,
         "frac_lmt": math.nan, "eval_return": -10.0, "normalized_score": 60.0},
    ]
    out = render_training_figure(rows, tmp_path / "m.png", q_bound=800.0)
    assert out.exists() and out.stat().st_size > 0


def test_audit_figure_renders(tmp_path):
    records = [
        {"lhs_thm2": 0.1, "rhs_thm2": 10.0, "lhs_thm3": 0.0, "rhs_thm3": 5.0,
         "lhs_thm4": 0.2, "rhs_thm4": 100.0},
        {"lhs_thm2": 0.0, "rhs_thm2": 0.0, "lhs_thm3": 0.01, "rhs_thm3": 1.0,
         "lhs_thm4": 0.05, "rhs_thm4": 50.0},
    ]
    out = render_audit_figure(records, tmp_path / "a.png")
    assert out.exists() and out.stat().st_size > 0
