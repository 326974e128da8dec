"""Tests for the flat key=value run-configuration format."""

import pytest

from srcid import config
from srcid.config import ConfigError
from srcid.model import TrainConfig
from srcid.synthdata import GeneratorSpec


class TestParsing:
    def test_value_types(self):
        assert config.parse_value("3") == 3
        assert config.parse_value("3.5") == 3.5
        assert config.parse_value("true") is True
        assert config.parse_value("False") is False
        assert config.parse_value("adam") == "adam"
        assert config.parse_value("5,5,5") == (5, 5, 5)
        assert config.parse_value("1,2.5,x") == (1, 2.5, "x")

    def test_parse_lines_skips_comments_and_blanks(self):
        lines = ["# a comment", "", "train.lr=0.01", "  data.seed=4  "]
        out = config.parse_lines(lines)
        assert out == {"train.lr": 0.01, "data.seed": 4}

    def test_missing_equals_reports_line(self):
        with pytest.raises(ConfigError, match=":2:"):
            config.parse_lines(["train.lr=1", "oops"])

    def test_missing_section_prefix_rejected(self):
        with pytest.raises(ConfigError):
            config.parse_lines(["lr=0.01"])

    def test_load_round_trip(self, tmp_path):
        cfg = {"train.lr": 0.001, "train.optimizer": "sgd",
               "train.fsq_levels": (3, 3, 5), "data.seed": 7,
               "run.tasks": "eval"}
        path = tmp_path / "run.cfg"
        config.write_snapshot(cfg, path)
        back = config.load_config(path)
        assert back == cfg

    def test_overrides_win(self):
        base = {"train.lr": 0.01, "data.seed": 1}
        out = config.apply_overrides(base, ["train.lr=0.5", "run.out=x"])
        assert out["train.lr"] == 0.5
        assert out["data.seed"] == 1
        assert out["run.out"] == "x"
        assert base["train.lr"] == 0.01  # input untouched


class TestBuildTrainConfig:
    def test_defaults_when_empty(self):
        assert config.build_train_config({}) == TrainConfig()

    def test_fields_applied(self):
        tc = config.build_train_config(
            {"train.lr": 0.5, "train.quantizer": "rvq-4", "train.epochs": 7})
        assert tc.lr == 0.5 and tc.quantizer == "rvq-4" and tc.epochs == 7

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            config.build_train_config({"train.learning_rate": 0.5})

    def test_scalar_tuple_fields_promoted(self):
        tc = config.build_train_config({"train.club_disable_layers": 2})
        assert tc.club_disable_layers == (2,)
        tc = config.build_train_config({"train.fsq_levels": (3, 3)})
        assert tc.fsq_levels == (3, 3)

    def test_invalid_values_caught_by_validation(self):
        with pytest.raises(Exception):
            config.build_train_config({"train.quantizer": "nope"})


class TestBuildGeneratorSpec:
    def test_defaults_when_empty(self):
        assert config.build_generator_spec({}) == GeneratorSpec()

    def test_modality_dims_from_dim_keys(self):
        spec = config.build_generator_spec(
            {"data.dim_a": 10, "data.dim_b": 8, "data.dim_c": 6, "data.seed": 2})
        assert spec.modality_dims == {"a": 10, "b": 8, "c": 6}
        assert spec.seed == 2

    def test_runner_keys_ignored(self):
        spec = config.build_generator_spec(
            {"data.n_samples": 500, "data.fractions": (0.8, 0.1, 0.1)})
        assert spec == GeneratorSpec()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="sigma"):
            config.build_generator_spec({"data.sigma": 0.5})


class TestFormatting:
    def test_format_is_sorted_and_parseable(self):
        cfg = {"z.last": 1, "a.first": True, "m.mid": (1, 2)}
        text = config.format_config(cfg)
        lines = text.strip().split("\n")
        assert lines == sorted(lines)
        assert config.parse_lines(lines) == cfg
