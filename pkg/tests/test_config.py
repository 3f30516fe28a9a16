import pytest

from auvdiff.config import (RunConfig, dump_config, load_config, parse_config, parse_profile,
                            parse_stage_list)
from auvdiff.errors import ConfigError


def test_empty_gives_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("")
    assert load_config(p) == RunConfig()
    assert parse_config("# only a comment\n\n") == RunConfig()


def test_defaults_match_table():
    c = RunConfig()
    assert (c.T, c.L, c.gamma, c.tau_soft, c.policy_delay, c.batch_size) == (1000, 10, 0.99, 0.005, 2, 256)
    assert (c.beta_start, c.beta_end, c.v_max, c.omega_max, c.rpm_max) == (1e-4, 0.02, 2.3, 0.26, 1525.0)


def test_unknown_key_named():
    with pytest.raises(ConfigError) as e:
        parse_config("foo = 1")
    assert "foo" in str(e.value) and e.value.key == "foo"


def test_unknown_override():
    with pytest.raises(ConfigError):
        RunConfig().with_(bar=2)


@pytest.mark.parametrize("line,key", [("T = ten", "T"), ("gamma = x", "gamma"),
                                      ("log_decisions = maybe", "log_decisions")])
def test_type_error(line, key):
    with pytest.raises(ConfigError) as e:
        parse_config(line)
    assert e.value.key == key


@pytest.mark.parametrize("line", ["T = 1", "K = 0", "gamma = 1.5", "beta_start = 0.5",
                                  "sample_steps = 2000", "policy = greedy", "sea = storm",
                                  "controller = lqr", "n_auv = 3", "time_raw = 7",
                                  "w_rate = 0\nw_energy = 0\nw_collision = 0\nw_serve = 0"])
def test_invalid_values(line):
    with pytest.raises(ConfigError):
        parse_config(line)


def test_missing_equals():
    with pytest.raises(ConfigError):
        parse_config("T 10")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_round_trip():
    c = RunConfig().with_(seed=7, lr_rl=1.5e-3, log_decisions=True, policy="vanilla", sea="ves")
    assert parse_config(dump_config(c)) == c


def test_bool_forms():
    assert parse_config("log_decisions = yes").log_decisions
    assert not parse_config("diffusion_continual = FALSE").diffusion_continual


def test_profile():
    assert parse_profile("5:1,2;0:0,3") == [(0.0, 0.0, 3.0), (5.0, 1.0, 2.0)]
    with pytest.raises(ConfigError):
        parse_profile("1:0,3")
    with pytest.raises(ConfigError):
        parse_profile("0:a,b")


def test_stage_list():
    assert parse_stage_list("1, 5,9") == [1, 5, 9]
    with pytest.raises(ConfigError):
        parse_stage_list("0,2")
