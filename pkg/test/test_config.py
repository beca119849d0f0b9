import pytest

from ept.config import AblationConfig, CliConfig, ProtocolSpec
from ept.errors import ConfigError, EptError


def test_defaults():
    config = CliConfig().validate()
    assert config.nep.lambda_reg == 0.3
    assert config.train.lambda_inter == 0.1
    assert config.pool.alpha == 0.001
    assert config.pool.d_h == 4
    assert (config.train.base_epochs, config.train.inc_epochs, config.train.batch_size) == (100, 60, 64)


def test_round_trip():
    config = CliConfig.from_dict({"protocol": {"stages": 3}, "pool": {"sharing": "per_task"}, "threads": 2})
    assert CliConfig.from_dict(config.to_dict()) == config
    assert config.threads == 2
    assert "threads" not in config.to_dict() and "verbose" not in config.to_dict()


def test_calibration_radius():
    assert CliConfig().train.calibration_radius == 0.5
    assert CliConfig.from_dict({"train": {"calibration_radius": None}}).train.calibration_radius is None


@pytest.mark.parametrize("data", [{"learning": {}}, {"train": {"epochs": 3}}, {"train": 5}])
def test_rejects_unknown_keys(data):
    with pytest.raises(ConfigError):
        CliConfig.from_dict(data)


def test_rejects_bad_values():
    with pytest.raises(ConfigError):
        CliConfig.from_dict({"nep": {"lambda_reg": 0}})
    with pytest.raises(ConfigError):
        CliConfig.from_dict({"train": {"train_logits": "softmax"}})
    with pytest.raises(ConfigError):
        CliConfig.from_dict({"train": {"calibration_radius": -0.1}})


def test_presets():
    assert ProtocolSpec.preset("vtab") == ProtocolSpec(base_classes=14, stages=9, ways=4, shots=5)
    config = CliConfig.from_dict({"preset": "imagenet_r", "protocol": {"shots": 1}})
    assert config.pool.d_h == 8
    assert config.protocol.shots == 1
    assert CliConfig.from_dict({"preset": "cub200"}).pool.d_h == 4
    with pytest.raises(ConfigError):
        ProtocolSpec.preset("mnist")


def test_ablation_flags():
    assert AblationConfig.from_flags("nep-only") == AblationConfig(cs_offset=False, ta_offset=False)
    no_nep = AblationConfig.from_flags("no-nep, no-cs")
    assert no_nep.classifier == "euclidean" and not no_nep.cs_offset
    assert not AblationConfig.from_flags("base-model").incremental_training
    with pytest.raises(ConfigError):
        AblationConfig.from_flags("no-backbone")


def test_environment_defaults(monkeypatch):
    monkeypatch.setenv("EPT_THREADS", "3")
    monkeypatch.setenv("EPT_VERBOSE", "0")
    config = CliConfig()
    assert config.threads == 3
    assert config.verbose is False


def test_error_message_names_module():
    error = ConfigError("bad")
    assert isinstance(error, EptError)
    assert str(error) == "[config] bad"
