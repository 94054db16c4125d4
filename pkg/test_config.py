"""
Configuration loading tests
"""

import os

import pytest

from src.config.config_loader import RunConfig, load_config, parse_region
from src.utils.errors import ConfigError


def test_load_config_reads_yaml(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("K: 12\nqs: [0.8, 0.6]\nlevels: 2\n")
    config = load_config(str(path))
    assert config == {"K": 12, "qs": [0.8, 0.6], "levels": 2}


def test_load_config_empty_and_missing(tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(str(empty)) == {}
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "nope.yaml"))


def test_repository_config_is_valid():
    config = RunConfig.from_sources(load_config(os.path.join(os.path.dirname(__file__), "config.yaml"))).validate()
    assert config.levels == len(config.qs) == 3
    assert (config.window, config.overlap) == (300, 50)


def test_overrides_win_and_none_is_ignored():
    config = RunConfig.from_sources({"K": 12, "tol": 1e-4}, {"K": 20, "tol": None})
    assert config.K == 20
    assert config.tol == 1e-4


def test_unknown_field_is_rejected():
    with pytest.raises(ConfigError, match="unknown configuration field"):
        RunConfig.from_sources({"bogus": 1})


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("TADLP_THREADS", "4")
    assert RunConfig.from_sources({"threads": 1}).threads == 4
    monkeypatch.setenv("TADLP_THREADS", "many")
    with pytest.raises(ConfigError):
        RunConfig.from_sources()


@pytest.mark.parametrize("changes, field_name", [
    ({"levels": 2}, "qs"),
    ({"qs": [0.9, 1.2, 0.5]}, "qs"),
    ({"beta0": 1.0}, "beta0"),
    ({"overlap": 300}, "overlap"),
    ({"specific_j": 1.5}, "specific_j"),
    ({"region": "chr1:5000-20000"}, "region"),
    ({"matrices": ["a.tsv"]}, "beds"),
])
def test_validate_names_the_field(monkeypatch, changes, field_name):
    monkeypatch.delenv("TADLP_THREADS", raising=False)
    with pytest.raises(ConfigError, match=field_name):
        RunConfig.from_sources(changes).validate()


def test_parse_region():
    assert parse_region("chr21:1,000,000-2,000,000") == ("chr21", 1000000, 2000000)
    with pytest.raises(ConfigError):
        parse_region("chr21")


def test_cell_labels_default_to_file_names():
    config = RunConfig.from_sources({"matrices": ["data/gm12878.tsv", "k562.txt"], "beds": ["a.bed", "b.bed"]})
    assert config.cell_labels() == ["gm12878", "k562"]


def test_beds_optional_when_not_calling(monkeypatch):
    monkeypatch.delenv("TADLP_THREADS", raising=False)
    config = RunConfig.from_sources({"matrices": ["a.tsv"]})
    assert config.validate(require_beds=False).beds == []
    with pytest.raises(ConfigError, match="beds"):
        config.validate()
