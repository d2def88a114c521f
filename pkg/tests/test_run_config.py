import os

import numpy as np
import pytest
import yaml

from constants.config import EFFECTIVE_CONFIG_NAME
from utils.errors import ConfigError
from utils.run_config import config_from_dict, config_to_dict, load_config, save_effective_config
from utils.seeding import STREAMS, child_seed, substream, torch_generator


def test_defaults_validate():
    config = load_config()
    assert config.preset == "desk"
    assert config.data_seed == config.seed


def test_long_schedule_preset():
    config = load_config(preset="paper")
    assert config.preset == "paper"
    assert config.proto.n_prototypes == 30
    assert config.pretrain.epochs == 30
    assert config.finetune.freeze_epochs == 15
    assert config.encoder.conv_channels == [32] * 7


def test_unknown_key_reports_dotted_path():
    with pytest.raises(ConfigError, match=r"encoder\.depth"):
        load_config(overrides={"encoder": {"depth": 3}})


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load_config(preset="huge")


@pytest.mark.parametrize(
    "overrides",
    [
        {"eval": {"median_window": 4}},
        {"mask": {"ratio": 0.0}},
        {"mask": {"ratio": 1.5}},
        {"loss": {"tau": 0.0}},
        {"proto": {"kind": "dbscan"}},
        {"encoder": {"n_heads": 3}},
        {"finetune": {"freeze_epochs": 50}},
        {"data": {"n_classes": 2, "n_strong": 0, "n_weak": 0, "n_unlabeled": 0, "n_frames": 10,
                  "min_duration": 1, "max_duration": 5}},
    ],
)
def test_invalid_settings_rejected(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


@pytest.mark.parametrize(
    "overrides, dotted",
    [
        ({"mask": {"ratio": "0.75"}}, r"mask\.ratio"),
        ({"pretrain": {"epochs": 2.5}}, r"pretrain\.epochs"),
        ({"mask": {"enabled": "yes"}}, r"mask\.enabled"),
        ({"seed": True}, r"seed"),
        ({"encoder": {"conv_channels": [32, "32"]}}, r"encoder\.conv_channels\[1\]"),
        ({"experiment": {"seeds": 0}}, r"experiment\.seeds"),
        ({"proto": {"kind": 3}}, r"proto\.kind"),
    ],
)
def test_mistyped_values_rejected(overrides, dotted):
    with pytest.raises(ConfigError, match=dotted):
        load_config(overrides=overrides)


def test_integers_accepted_for_float_settings():
    config = load_config(overrides={"loss": {"tau": 1}, "data": {"seed": None}})
    assert config.loss.tau == 1.0 and isinstance(config.loss.tau, float)
    assert config.data.seed is None


def test_yaml_file_then_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 5, "pretrain": {"epochs": 3}}))
    config = load_config(str(path), overrides={"pretrain": {"epochs": 4}})
    assert config.seed == 5
    assert config.pretrain.epochs == 4


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_effective_config_echo_reloads(tmp_path, tiny_config):
    path = save_effective_config(tiny_config, str(tmp_path))
    assert os.path.basename(path) == EFFECTIVE_CONFIG_NAME
    with open(path, encoding="utf-8") as f:
        echoed = yaml.safe_load(f)
    assert config_to_dict(config_from_dict(echoed)) == config_to_dict(tiny_config)


def test_substreams_are_reproducible_and_independent():
    a = substream(3, "data", 7).normal(size=5)
    assert np.array_equal(a, substream(3, "data", 7).normal(size=5))
    assert not np.array_equal(a, substream(3, "data", 8).normal(size=5))
    assert not np.array_equal(a, substream(3, "mask", 7).normal(size=5))
    assert not np.array_equal(a, substream(4, "data", 7).normal(size=5))


def test_unknown_stream_name():
    assert "finetune" in STREAMS
    with pytest.raises(ValueError):
        substream(0, "weather")


def test_torch_generator_and_child_seed():
    first = torch_generator(1, "init").initial_seed()
    assert first == torch_generator(1, "init").initial_seed()
    assert first != torch_generator(1, "head").initial_seed()
    seed = child_seed(substream(0, "proto"))
    assert 0 <= seed < 2**31 - 1
