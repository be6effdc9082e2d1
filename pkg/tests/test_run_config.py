import os

import pytest
import yaml

from ildm import run_config
from ildm.errors import ConfigError, ContainerIOError

test_dir = os.path.dirname(os.path.abspath(__file__))
default_parameters = os.path.normpath(os.path.join(test_dir, "..", "model_parameters", "default.yml"))


def _write(tmp_path, document):
    path = os.path.join(tmp_path, "params.yml")
    with open(path, "w") as f:
        yaml.safe_dump(document, f)
    return path


def test_defaults_only():
    config = run_config.resolve("train-ildm")
    assert config["lam"] == 4.0
    assert config["base"] is None
    with pytest.raises(ConfigError):
        run_config.resolve("launch-rockets")


def test_file_then_flags(tmp_path):
    path = _write(tmp_path, {"train-ildm": {"lam": 2.0, "steps": 10}, "sample": {"cfg": 3.0}})
    config = run_config.resolve("train-ildm", path, {"steps": 5, "lr": None})
    assert config["lam"] == 2.0  # from the file
    assert config["steps"] == 5  # flag wins
    assert config["lr"] == 2e-4  # a flag that was not given leaves the default alone


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError) as e:
        run_config.resolve("sample", _write(tmp_path, {"sample": {"guidance": 3.0}}))
    assert e.value.key == "guidance"
    with pytest.raises(ConfigError):
        run_config.resolve("sample", _write(tmp_path, {"painting": {}}))
    with pytest.raises(ConfigError):
        run_config.resolve("sample", overrides={"guidance": 1.0})


def test_bad_files(tmp_path):
    with pytest.raises(ContainerIOError):
        run_config.read_parameters_file(os.path.join(tmp_path, "missing.yml"))
    path = os.path.join(tmp_path, "broken.yml")
    with open(path, "w") as f:
        f.write("sample: [1, 2\n")
    with pytest.raises(ConfigError):
        run_config.read_parameters_file(path)


def test_require():
    with pytest.raises(ConfigError) as e:
        run_config.require(run_config.resolve("train-ildm"), "data", "base")
    assert e.value.key == "base"
    assert "category=config key=base" in e.value.envelope()


def test_write_resolved(tmp_path):
    config = run_config.resolve("verify-pgm", overrides={"instances": 3})
    path = run_config.write_resolved(config, os.path.join(tmp_path, "out"), "verify-pgm")
    with open(path) as f:
        assert yaml.safe_load(f) == {"verify-pgm": config}


def test_shipped_parameters_file_matches_defaults():
    """The documented parameters file must name every key, with the built-in default values"""
    parameters = run_config.read_parameters_file(default_parameters)
    assert set(parameters) == set(run_config.COMMAND_DEFAULTS)
    for command, section in parameters.items():
        assert section == run_config.defaults(command), command
