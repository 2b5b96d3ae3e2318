import json

import pytest

from anomagent.config import KEYS, UsageError, read_env, read_file, resolve
from anomagent.tools import BackendKind


def test_defaults():
    s = resolve({}, env={})
    assert s["theta"] == 0.8 and s["kr_trigger"] == 0.5 and s["t_max"] == 12 and s["max_generations"] == 3
    assert s["epsilon"] == 0.2 and s["kl_beta"] == 0.04 and s["filter_zero_advantage"] is True
    assert s["beta"] == 0.5  # reward weight, unrelated to kl_beta
    assert set(s.sources.values()) == {"default"}


def test_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# weights\ntheta = 0.7\nalpha = 2.0  # inline comment\nseed = 5\n")
    env = {"ANOMAGENT_THETA": "0.75", "ANOMAGENT_SEED": "9", "UNRELATED": "x"}
    s = resolve({"theta": "0.9", "jobs": None}, env=env, path=cfg)
    assert s["theta"] == 0.9 and s.sources["theta"] == "cli"
    assert s["seed"] == 9 and s.sources["seed"] == "env"
    assert s["alpha"] == 2.0 and s.sources["alpha"] == "file"
    assert s["jobs"] == 1 and s.sources["jobs"] == "default"


def test_typed_cli_values_pass_through():
    assert resolve({"seed": 42, "filter_zero_advantage": False}, env={})["filter_zero_advantage"] is False


@pytest.mark.parametrize(
    "cli",
    [
        {"thetta": "0.8"},
        {"theta": "high"},
        {"filter_zero_advantage": "maybe"},
        {"backend": "cloud"},
        {"backend": "remote"},
        {"policy": "chat"},
        {"policy": "random"},
        {"jobs": "0"},
        {"theta": "0.3", "kr_trigger": "0.5"},
        {"alpha": "-1"},
        {"epsilon": "0"},
        {"transition_penalty": "1"},
    ],
)
def test_usage_errors(cli):
    with pytest.raises(UsageError):
        resolve(cli, env={})


def test_unknown_key_in_file(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("Theta = 0.8\n")
    with pytest.raises(UsageError, match="Theta"):
        resolve({}, env={}, path=cfg)
    with pytest.raises(UsageError):
        read_file(tmp_path / "missing.cfg")


def test_env_endpoint_enables_remote():
    s = resolve({"backend": "remote"}, env={"ANOMAGENT_ENDPOINT": "http://h/v1", "ANOMAGENT_API_KEY": "tok"})
    cfg = s.backend_config()
    assert cfg.kind is BackendKind.REMOTE and cfg.endpoint == "http://h/v1" and cfg.api_key == "tok"
    assert s.snapshot()["api_key"] == "***"
    assert "tok" not in json.dumps(s.snapshot())


def test_chat_policy_uses_endpoint():
    assert resolve({"policy": "chat", "endpoint": "http://h"}, env={})["policy"] == "chat"


def test_read_env_ignores_unknown():
    assert read_env({"ANOMAGENT_NOPE": "1", "ANOMAGENT_T_MAX": "20"}) == {"t_max": "20"}


def test_derived_configs():
    s = resolve({"theta": "0.7", "t_max": "20", "alpha": "2", "kl_beta": "0", "transition_penalty": "-0.5"}, env={})
    assert s.loop_config().theta == 0.7 and s.loop_config().t_max == 20
    assert s.reward_weights().alpha == 2.0 and s.reward_weights().t_max == 20
    assert s.grpo_config().kl_beta == 0.0
    assert s.transition_table().penalty == -0.5


def test_simulated_backend_and_script(tmp_path):
    script = tmp_path / "script.json"
    script.write_text(json.dumps({"qe_score_sequence": [0.3, 0.9]}))
    s = resolve({"script": str(script), "seed": "7", "qe_jitter": "1"}, env={})
    cfg = s.backend_config()
    assert cfg.kind is BackendKind.SIMULATED and cfg.seed == 7
    assert cfg.script.qe_jitter == 1 and cfg.script.verdict(0).score == 0.3
    assert s.backend_config(seed=3).seed == 3
    bad = resolve({"script": str(tmp_path / "none.json")}, env={})
    with pytest.raises(UsageError):
        bad.backend_config()


def test_every_key_documented():
    assert all(k.help for k in KEYS.values())
    assert [k for k, v in KEYS.items() if v.secret] == ["api_key"]
