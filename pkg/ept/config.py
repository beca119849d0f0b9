"""Run configuration.

The JSON config file mirrors `CliConfig.to_dict()`, plus the runtime switches
`threads` and `verbose`. Every section is optional;
missing keys take the defaults below, unknown keys are rejected. Defaults follow
the published training setup (lambda_reg=0.3, lambda_inter=0.1, alpha=0.001,
d_h=4, 100 base epochs, 60 incremental epochs, batch size 64).
"""
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Union

from dotenv import load_dotenv

from ept.errors import ConfigError

load_dotenv()

# (base_classes, stages, ways, shots)
PROTOCOL_PRESETS = {
    "cub200": (100, 10, 10, 5),
    "imagenet_r": (100, 10, 10, 5),
    "imagenet_a": (100, 10, 10, 5),
    "vtab": (14, 9, 4, 5),
}
HIDDEN_DIM_PRESETS = {"imagenet_r": 8}

TRAIN_LOGITS = ("nep", "distance")
METRICS = ("nep", "euclidean", "squared_euclidean", "cosine")
SHARING_MODES = ("per_class", "per_task")
DTYPES = ("float64", "float32")
RUNTIME_KEYS = ("threads", "verbose")


@dataclass(frozen=True)
class ProtocolSpec:
    base_classes: int = 100
    stages: int = 10
    ways: int = 10
    shots: int = 5
    test_per_class: Union[int, str] = "all"
    base_test_fraction: float = 0.2

    @classmethod
    def preset(cls, name: str) -> "ProtocolSpec":
        if name not in PROTOCOL_PRESETS:
            raise ConfigError(f"unknown protocol preset '{name}' (choose from {sorted(PROTOCOL_PRESETS)})")
        base, stages, ways, shots = PROTOCOL_PRESETS[name]
        return cls(base_classes=base, stages=stages, ways=ways, shots=shots)

    def validate(self):
        if self.base_classes < 1 or self.stages < 0:
            raise ConfigError("protocol needs base_classes >= 1 and stages >= 0")
        if self.ways < 1 or self.shots < 1:
            raise ConfigError("protocol needs ways >= 1 and shots >= 1")
        if isinstance(self.test_per_class, str):
            if self.test_per_class != "all":
                raise ConfigError(f"test_per_class must be an integer or 'all', got '{self.test_per_class}'")
        elif self.test_per_class < 1:
            raise ConfigError("test_per_class must be >= 1")
        if not 0.0 < self.base_test_fraction < 1.0:
            raise ConfigError("base_test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    base_epochs: int = 100
    inc_epochs: int = 60
    batch_size: int = 64
    lambda_inter: float = 0.1
    temperature: float = 1.0
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    train_logits: str = "nep"
    dtype: str = "float64"
    seed: int = 0
    # a live prototype stays within calibration_radius * ||raw|| / sqrt(n_support) of its raw mean; None lifts the bound
    calibration_radius: Optional[float] = 0.5

    def validate(self):
        if self.base_epochs < 1 or self.inc_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lambda_inter < 0:
            raise ConfigError("lambda_inter must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be > 0")
        if self.train_logits not in TRAIN_LOGITS:
            raise ConfigError(f"train_logits must be one of {TRAIN_LOGITS}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}")
        if self.calibration_radius is not None and self.calibration_radius < 0:
            raise ConfigError("calibration_radius must be >= 0 or null")


@dataclass(frozen=True)
class NepConfig:
    lambda_reg: float = 0.3
    epsilon: float = 1e-8

    def validate(self):
        if self.lambda_reg <= 0:
            raise ConfigError("lambda_reg must be > 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")


@dataclass(frozen=True)
class PoolConfig:
    d_t: Optional[int] = None  # None: same as the embedding dimension
    d_h: int = 4
    alpha: float = 0.001
    sharing: str = "per_class"

    def validate(self):
        if self.d_t is not None and self.d_t < 1:
            raise ConfigError("d_t must be >= 1")
        if self.d_h < 1:
            raise ConfigError("d_h must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"sharing must be one of {SHARING_MODES}")


@dataclass(frozen=True)
class AblationConfig:
    nep: bool = True
    cs_offset: bool = True
    ta_offset: bool = True
    incremental_training: bool = True
    metric: str = "euclidean"  # classifier used when nep is off

    @property
    def classifier(self) -> str:
        return "nep" if self.nep else self.metric

    @classmethod
    def from_flags(cls, flags: str, base: "AblationConfig" = None) -> "AblationConfig":
        """Parse the CLI form: comma separated `full`, `no-nep`, `no-cs`, `no-ta`, `nep-only`, `base-model`."""
        ablation = base or cls()
        for flag in filter(None, (f.strip() for f in flags.split(","))):
            if flag == "full":
                ablation = replace(ablation, nep=True, cs_offset=True, ta_offset=True)
            elif flag == "no-nep":
                ablation = replace(ablation, nep=False)
            elif flag == "no-cs":
                ablation = replace(ablation, cs_offset=False)
            elif flag == "no-ta":
                ablation = replace(ablation, ta_offset=False)
            elif flag == "nep-only":
                ablation = replace(ablation, nep=True, cs_offset=False, ta_offset=False)
            elif flag == "base-model":
                ablation = replace(ablation, incremental_training=False)
            else:
                raise ConfigError(f"unknown ablation flag '{flag}'")
        return ablation

    def validate(self):
        if self.metric not in METRICS or self.metric == "nep":
            raise ConfigError(f"ablation metric must be one of {METRICS[1:]}")


@dataclass(frozen=True)
class OutputConfig:
    report: Optional[str] = None
    checkpoint_dir: Optional[str] = None


def _env_flag(name, default):
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() not in ("0", "false", "no", "off", "")


@dataclass(frozen=True)
class CliConfig:
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    nep: NepConfig = field(default_factory=NepConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    # runtime switches: accepted in config files but neither compared nor echoed into reports
    threads: int = field(default_factory=lambda: int(os.getenv("EPT_THREADS", "1")), compare=False)
    verbose: bool = field(default_factory=lambda: _env_flag("EPT_VERBOSE", True), compare=False)

    SECTIONS = {
        "protocol": ProtocolSpec,
        "train": TrainConfig,
        "nep": NepConfig,
        "pool": PoolConfig,
        "ablation": AblationConfig,
        "output": OutputConfig,
    }

    @property
    def seed(self) -> int:
        return self.train.seed

    def validate(self) -> "CliConfig":
        for name in self.SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "validate"):
                section.validate()
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in RUNTIME_KEYS:
            data.pop(key)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CliConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        kwargs = {}
        for key, value in data.items():
            if key in cls.SECTIONS:
                kwargs[key] = _section_from_dict(cls.SECTIONS[key], key, value)
            elif key in RUNTIME_KEYS:
                kwargs[key] = value
            elif key == "preset":
                continue
            else:
                raise ConfigError(f"unknown config key '{key}'")

        preset = data.get("preset")
        if preset is not None:
            protocol = ProtocolSpec.preset(preset)
            overrides = data.get("protocol", {})
            kwargs["protocol"] = replace(protocol, **overrides)
            if "d_h" not in data.get("pool", {}):
                kwargs["pool"] = replace(kwargs.get("pool", PoolConfig()), d_h=HIDDEN_DIM_PRESETS.get(preset, 4))
        return cls(**kwargs).validate()


def _section_from_dict(section_cls, name, values):
    if not isinstance(values, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    known = {f.name for f in fields(section_cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    return section_cls(**values)
