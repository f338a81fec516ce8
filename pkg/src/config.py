"""
Run configuration: dataclass defaults < SFN_* environment (.env) < YAML file < command-line flags
"""
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml
from dotenv import load_dotenv

from .exceptions import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "SFN_"
DEFAULT_PROFILE = "tiny"
SPLITS = ("kfold", "ratio", "fixed", "none")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

INT_KEYS = {
    "input_size", "patch_size", "embed_dim", "window", "out_channels",
    "epochs", "batch_size", "seed", "max_steps", "prefetch",
    "fold", "folds", "n_train", "workers",
}
FLOAT_KEYS = {"mlp_ratio", "lr", "weight_decay", "eps", "grad_clip"}
BOOL_KEYS = {"use_catm", "use_afb", "deterministic"}
SEQUENCE_KEYS = {"depths": int, "heads": int, "betas": float, "ratios": int}
NULLABLE_KEYS = {
    "max_steps", "grad_clip", "image_dir", "mask_dir", "val_image_dir", "val_mask_dir", "resume",
}
# YAML files may group keys the way training configs usually do
SECTIONS = ("model", "training", "train", "data", "run")


@dataclass
class RunConfig:
    """Model and training configuration plus the data and output locations of a run"""

    model: ModelConfig = field(default_factory=lambda: ModelConfig.from_profile(DEFAULT_PROFILE))
    train: TrainConfig = field(default_factory=TrainConfig)
    image_dir: Optional[str] = None
    mask_dir: Optional[str] = None
    val_image_dir: Optional[str] = None
    val_mask_dir: Optional[str] = None
    split: str = "kfold"
    fold: int = 0
    folds: int = 5
    ratios: Tuple[int, ...] = (8, 1, 1)
    n_train: int = 900
    run_dir: str = "runs/default"
    resume: Optional[str] = None
    workers: int = 4
    log_level: str = "INFO"

    def validate(self, require_data: bool = False) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        if self.split not in SPLITS:
            raise ConfigError("split", f"unknown split '{self.split}', expected one of {', '.join(SPLITS)}")
        if self.folds < 2:
            raise ConfigError("folds", f"need at least 2 folds, got {self.folds}")
        if not 0 <= self.fold < self.folds:
            raise ConfigError("fold", f"must be in [0, {self.folds}), got {self.fold}")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or sum(self.ratios) == 0:
            raise ConfigError("ratios", f"expected three non-negative integers, got {self.ratios}")
        if self.n_train < 1:
            raise ConfigError("n_train", f"must be >= 1, got {self.n_train}")
        if self.workers < 1:
            raise ConfigError("workers", f"must be >= 1, got {self.workers}")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError("log_level", f"unknown level '{self.log_level}'")
        if (self.val_image_dir is None) != (self.val_mask_dir is None):
            raise ConfigError("val_mask_dir", "val_image_dir and val_mask_dir must be given together")
        if require_data:
            for key in ("image_dir", "mask_dir"):
                path = getattr(self, key)
                if path is None:
                    raise ConfigError(key, "is required")
                if not os.path.isdir(path):
                    raise ConfigError(key, f"directory {path} does not exist")
        return self

    def to_dict(self) -> Dict[str, Any]:
        """Flat mapping of every key, as accepted by from_values"""
        values = self.model.to_dict()
        values.update(self.train.to_dict())
        for f in fields(self):
            if f.name not in ("model", "train"):
                values[f.name] = getattr(self, f.name)
        values["ratios"] = list(self.ratios)
        return values

    @classmethod
    def from_values(cls, values: Mapping[str, Any]) -> "RunConfig":
        """
        Build from a flat mapping; 'profile' picks the model preset and
        explicit model keys override it

        Raises:
            ConfigError: Unknown key or a value of the wrong type
        """
        model_keys = {f.name for f in fields(ModelConfig)}
        train_keys = {f.name for f in fields(TrainConfig)}
        run_keys = {f.name for f in fields(cls)} - {"model", "train"}

        model_values, train_values, run_values = {}, {}, {}
        for key, raw in values.items():
            value = coerce(key, raw)
            if key in model_keys:
                model_values[key] = value
            elif key in train_keys:
                train_values[key] = value
            elif key in run_keys:
                run_values[key] = value
            else:
                raise ConfigError(key, "unknown configuration key")

        profile = model_values.pop("profile", DEFAULT_PROFILE)
        model = ModelConfig.from_profile(profile, **model_values)
        return cls(model=model, train=TrainConfig(**train_values), **run_values)


def coerce(key: str, value: Any) -> Any:
    """Convert a raw value (string from the environment, YAML scalar, CLI value) to the key's type"""
    if key in NULLABLE_KEYS and (value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null"))):
        return None
    try:
        if key in BOOL_KEYS:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if key in INT_KEYS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if key in FLOAT_KEYS:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if key in SEQUENCE_KEYS:
            item_type = SEQUENCE_KEYS[key]
            items = value.split(",") if isinstance(value, str) else list(value)
            return tuple(item_type(str(v).strip()) if isinstance(v, str) else item_type(v) for v in items)
    except (TypeError, ValueError) as e:
        raise ConfigError(key, f"invalid value {value!r}") from e
    return value


def env_values(environ: Optional[Mapping[str, str]] = None, dotenv_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Configuration keys taken from SFN_* variables

    A .env file is loaded first (without overriding variables already set)
    unless an explicit environment mapping is passed.
    """
    if environ is None:
        load_dotenv(dotenv_path)
        environ = os.environ
    return {name[len(ENV_PREFIX):].lower(): value for name, value in environ.items() if name.startswith(ENV_PREFIX)}


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Flat key mapping from a YAML file; model/training/data/run sections are flattened"""
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError("config", f"{path} is not valid YAML: {e}") from e
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError("config", f"{path} must contain a mapping of keys")

    values: Dict[str, Any] = {}
    for key, value in loaded.items():
        if key in SECTIONS and isinstance(value, dict):
            values.update(value)
        else:
            values[key] = value
    logger.debug(f"Loaded {len(values)} keys from {path}")
    return values


def parse_and_validate(
    args: Optional[Mapping[str, Any]] = None,
    config_file: Optional[str] = None,
    environ: Optional[Mapping[str, str]] = None,
    require_data: bool = False,
) -> RunConfig:
    """
    Merge every configuration layer and validate the result

    Args:
        args: Command-line values; None entries mean "not given"
        config_file: Optional YAML file
        environ: Environment mapping, defaults to os.environ plus .env
        require_data: Fail unless image_dir and mask_dir exist

    Returns:
        The validated RunConfig, echoed to the log
    """
    values: Dict[str, Any] = {}
    values.update(env_values(environ))
    values.update(load_config_file(config_file))
    values.update({k: v for k, v in (args or {}).items() if v is not None})

    run = RunConfig.from_values(values).validate(require_data=require_data)
    logger.info("Validated configuration:")
    for key, value in run.to_dict().items():
        logger.info(f"  {key}: {value}")
    return run
