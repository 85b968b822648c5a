"""Run configuration: a flat key=value file format plus flag overrides.

Config files are plain text, one `key = value` pair per line, `#` comments.
Values are parsed as bool/int/float/string by shape. Every artifact a run
produces embeds the full serialized RunConfig for provenance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration file or field value."""


@dataclass
class RunConfig:
    dataset: str = "mnist"            # mnist | cifar10
    data_dir: str = ""                # empty -> BLRNET_DATA_DIR
    train_subset: int = 10000         # 0 -> full training set
    val_size: int = 5000
    arch: str = "32C3-MP2-64C3-MP2-512FC-SM10"
    # objective
    objective: str = "variance-regularized"
    beta_var: float = 1e-6
    wd_softmax: float = 1e-4
    tau: float = 1.0
    # optimizer
    lr: float = 1e-2
    lr_factor: float = 0.1
    lr_patience: int = 10
    lr_min_delta: float = 1e-4
    lr_floor: float = 1e-5
    batch_size: int = 128
    epochs: int = 20
    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-3
    seed: int = 0
    # preprocessing / augmentation
    augment: bool = False
    zca: bool = False
    zca_eps: float = 1e-2
    batchnorm: bool = True
    init: str = "transfer"            # transfer | xavier
    output_dir: str = "runs"

    def validate(self):
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.objective not in ("variance-regularized", "variational-bound"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.init not in ("transfer", "xavier"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        for name in ("lr", "pretrain_lr", "lr_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("batch_size", "epochs", "pretrain_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.train_subset < 0 or self.val_size < 0:
            raise ConfigError("subset sizes must be >= 0")
        return self


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    ftype = _FIELDS[key]
    if ftype == "bool" or ftype is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if ftype == "int" or ftype is int:
            return int(text)
        if ftype == "float" or ftype is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text.strip().strip('"').strip("'")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, value.strip()))
    return cfg


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text()).validate()


def serialize_config(cfg: RunConfig) -> str:
    """Key-value text that parse_config_text maps back to the same config."""
    return "\n".join(f"{k} = {v}" for k, v in asdict(cfg).items())


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply non-None flag values on top of a file-loaded config."""
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()
