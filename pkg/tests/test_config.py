"""Scenario parsing tests: defaults, typed overrides, strict unknown-key
errors, environment variables, and the echo round trip.
"""

import pytest

from lbmpc.config import (ConfigError, Scenario, echo_scenario, load_scenario,
                          parse_scenario)


EMPTY_ENV = {}


class TestDefaults:
    def test_empty_text_gives_defaults(self):
        s = parse_scenario("", environ=EMPTY_ENV)
        assert s.controller.N == 10
        assert s.oracle.kind == "dnn"
        assert s.run.steps == 500
        assert s.run.x0 == (-0.12, 0.06, 0.0, 0.0)
        assert s.plant.w_region == (0.7, 0.8, 0.5, 0.25, 0.5)

    def test_partial_section_keeps_other_defaults(self):
        s = parse_scenario("[run]\nsteps = 7\n", environ=EMPTY_ENV)
        assert s.run.steps == 7
        assert s.run.band == 0.02


class TestParsing:
    def test_typed_values(self):
        text = """
[oracle]
kind = l2nw
hidden = 8 4
gamma = 0.25
[schedule]
deterministic = false
seed = 3
[run]
x0 = -0.1, 0.05, 0, 0
"""
        s = parse_scenario(text, environ=EMPTY_ENV)
        assert s.oracle.kind == "l2nw"
        assert s.oracle.hidden == (8, 4)
        assert s.oracle.gamma == 0.25
        assert s.schedule.deterministic is False
        assert s.schedule.seed == 3
        assert s.run.x0 == (-0.1, 0.05, 0.0, 0.0)

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError):
            parse_scenario("[solver]\nrho = 0.1\n", environ=EMPTY_ENV)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_scenario("[run]\nstep_count = 10\n", environ=EMPTY_ENV)

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_scenario("[run]\nsteps = many\n", environ=EMPTY_ENV)

    def test_bad_boolean_rejected(self):
        with pytest.raises(ConfigError):
            parse_scenario("[schedule]\ndeterministic = maybe\n",
                           environ=EMPTY_ENV)


class TestValidation:
    def test_bad_oracle_kind(self):
        with pytest.raises(ConfigError):
            parse_scenario("[oracle]\nkind = gp\n", environ=EMPTY_ENV)

    def test_gamma_out_of_range(self):
        with pytest.raises(ConfigError):
            parse_scenario("[oracle]\ngamma = 1.5\n", environ=EMPTY_ENV)

    def test_x0_needs_four_entries(self):
        with pytest.raises(ConfigError):
            parse_scenario("[run]\nx0 = 1 2 3\n", environ=EMPTY_ENV)

    def test_band_range(self):
        with pytest.raises(ConfigError):
            parse_scenario("[run]\nband = 0\n", environ=EMPTY_ENV)

    def test_w_region_entries(self):
        with pytest.raises(ConfigError):
            parse_scenario("[plant]\nw_region = 0.5 0.5\n", environ=EMPTY_ENV)


class TestEnvironment:
    def test_override_applies_last(self):
        env = {"LBMPC_RUN_STEPS": "123"}
        s = parse_scenario("[run]\nsteps = 7\n", environ=env)
        assert s.run.steps == 123

    def test_unknown_env_section_rejected(self):
        with pytest.raises(ConfigError):
            parse_scenario("", environ={"LBMPC_SOLVER_RHO": "1"})

    def test_unrelated_env_ignored(self):
        s = parse_scenario("", environ={"PATH": "/usr/bin"})
        assert s == Scenario()


class TestEcho:
    def test_round_trip_equality(self):
        text = """
[oracle]
kind = dnn
hidden = 16 8
[controller]
N = 6
[run]
steps = 50
x0 = -0.1 0.05 0 0
"""
        s = parse_scenario(text, environ=EMPTY_ENV)
        s2 = parse_scenario(echo_scenario(s), environ=EMPTY_ENV)
        assert s2 == s

    def test_defaults_round_trip(self):
        s = Scenario()
        assert parse_scenario(echo_scenario(s), environ=EMPTY_ENV) == s


class TestFiles:
    def test_load_names_after_basename(self, tmp_path):
        p = tmp_path / "myrun.ini"
        p.write_text("[run]\nsteps = 5\n")
        s = load_scenario(str(p), environ=EMPTY_ENV)
        assert s.name == "myrun"
        assert s.run.steps == 5

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scenario(str(tmp_path / "nope.ini"), environ=EMPTY_ENV)

    def test_bundled_scenarios_parse(self):
        import os
        import lbmpc.cli as cli
        for name in ("linear", "dnn", "l2nw"):
            s = load_scenario(os.path.join(cli.SCENARIO_DIR, "%s.ini" % name),
                              environ=EMPTY_ENV)
            assert s.run.steps == 500
