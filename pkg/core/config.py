import json
import logging
import os
from typing import Any, Mapping, Optional

import yaml

from core.data import validate_dataset_spec
from core.errors import ConfigError
from core.train import validate_train_config
from models.data_classes import DatasetSpec, ExperimentConfig, OrthoPolicy, Solver, TrainConfig, Variant

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
GLOBAL_CONFIG_PATH = "/etc/orthocond/config.yaml"
SEED_OVERRIDE_ENV = "ORTHOCOND_SEED_OVERRIDE"

DEFAULTS: dict[str, Any] = {
    "variant": "decorr_bn",
    "d": 16,
    "batch_size": 64,
    "classes": 3,
    "epochs": 20,
    "lr": 0.1,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "lr_milestones": [],
    "lr_decay": 0.1,
    "policy": "none",
    "ol_weight": 0.01,
    "solver": "svd",
    "ns_iters": 20,
    "eps": None,
    "reg": None,
    "bn_momentum": 0.1,
    "input_dim": None,
    "samples_per_class": 200,
    "spread": 0.5,
    "anisotropy": 1.0,
    "points_per_sample": 1,
    "val_fraction": 0.2,
    "seeds": [0, 1, 2, 3, 4],
    "output_dir": "runs/default",
    "trace_interval": 10,
    "final_epochs": 5,
    "log_level": "INFO",
    "log_file": None,
}


def find_config_path() -> str:
    """Local ./config.yaml first, then the system-wide file."""
    local_config_path = os.path.join(os.getcwd(), "config.yaml")
    if os.path.exists(local_config_path):
        logger.info("Loading config from %s", local_config_path)
        return local_config_path
    if os.path.exists(GLOBAL_CONFIG_PATH):
        logger.info("Loading config from %s", GLOBAL_CONFIG_PATH)
        return GLOBAL_CONFIG_PATH
    raise ConfigError(f"config file not found in ./config.yaml or {GLOBAL_CONFIG_PATH}")


def read_config(path: Optional[str] = None) -> dict[str, Any]:
    """Raw key-value mapping from a YAML (or JSON) config file.

    Raises:
        ConfigError: missing file, unparsable content or a non-mapping document.
    """
    config_path = path or find_config_path()
    try:
        with open(config_path, "r") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {config_path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {config_path}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{config_path} must contain a key-value mapping")
    return raw


def parse_seed_override(value: str) -> tuple[int, ...]:
    """Seeds from "1,2,3" or "[1, 2, 3]"."""
    text = value.strip()
    try:
        if text.startswith("["):
            seeds = json.loads(text)
        else:
            seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{SEED_OVERRIDE_ENV} is not an integer list: {value!r}") from None
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError(f"{SEED_OVERRIDE_ENV} is not a non-empty integer list: {value!r}")
    return tuple(seeds)


def _typed(raw: dict[str, Any], key: str, kind: type) -> Any:
    value = raw[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or (isinstance(value, bool) and kind is not bool):
        raise ConfigError(f"{key} must be of type {kind.__name__}, got {value!r}")
    return value


def _optional_float(raw: dict[str, Any], key: str) -> Optional[float]:
    return None if raw[key] is None else _typed(raw, key, float)


def _int_list(raw: dict[str, Any], key: str) -> tuple[int, ...]:
    value = raw[key]
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{key} must be a list of integers, got {value!r}")
    return tuple(value)


def build_config(raw: dict[str, Any], env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Validate a raw mapping into an ExperimentConfig.

    Args:
        raw: Keys as documented in config.yaml; schema_version is required.
        env: Environment consulted for the seed override (os.environ if None).

    Raises:
        ConfigError: missing or wrong schema_version, unknown keys, bad types
            or values, invalid policies.
    """
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    unknown = sorted(set(raw) - set(DEFAULTS) - {"schema_version"})
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    values = {**DEFAULTS, **raw}

    try:
        variant = Variant(values["variant"])
        solver = Solver(values["solver"])
    except ValueError as e:
        raise ConfigError(str(e)) from None

    d = _typed(values, "d", int)
    lr = _typed(values, "lr", float)
    ol_weight = _typed(values, "ol_weight", float)
    labels = values["policy"]
    if isinstance(labels, str):
        labels = [labels]
    if not isinstance(labels, list) or not labels or not all(isinstance(label, str) for label in labels):
        raise ConfigError(f"policy must be a label or a non-empty list of labels, got {values['policy']!r}")
    policies = tuple(OrthoPolicy.from_label(label, ol_weight=ol_weight, fallback_lr=lr) for label in labels)
    if len({p.label for p in policies}) != len(policies):
        raise ConfigError(f"duplicate policies in {labels}")

    input_dim = d if values["input_dim"] is None else _typed(values, "input_dim", int)
    dataset = DatasetSpec(
        classes=_typed(values, "classes", int),
        input_dim=input_dim,
        samples_per_class=_typed(values, "samples_per_class", int),
        spread=_typed(values, "spread", float),
        points_per_sample=_typed(values, "points_per_sample", int),
        anisotropy=_typed(values, "anisotropy", float),
        val_fraction=_typed(values, "val_fraction", float),
    )
    train = TrainConfig(
        variant=variant,
        d=d,
        batch_size=_typed(values, "batch_size", int),
        epochs=_typed(values, "epochs", int),
        lr=lr,
        momentum=_typed(values, "momentum", float),
        weight_decay=_typed(values, "weight_decay", float),
        policy=policies[0],
        dataset=dataset,
        solver=solver,
        ns_iters=_typed(values, "ns_iters", int),
        eps=_optional_float(values, "eps"),
        reg=_optional_float(values, "reg"),
        lr_milestones=_int_list(values, "lr_milestones"),
        lr_decay=_typed(values, "lr_decay", float),
        bn_momentum=_typed(values, "bn_momentum", float),
        trace_interval=_typed(values, "trace_interval", int),
        final_epochs=_typed(values, "final_epochs", int),
    )

    environment: Mapping[str, str] = os.environ if env is None else env
    override = environment.get(SEED_OVERRIDE_ENV)
    if override:
        seeds = parse_seed_override(override)
        logger.info("Seed list overridden by %s: %s", SEED_OVERRIDE_ENV, list(seeds))
    else:
        seeds = _int_list(values, "seeds")
    if not seeds:
        raise ConfigError("seeds must not be empty")

    validate_dataset_spec(dataset)
    validate_train_config(train)

    log_file = values["log_file"]
    if log_file is not None and not isinstance(log_file, str):
        raise ConfigError(f"log_file must be a path or null, got {log_file!r}")
    return ExperimentConfig(
        schema_version=SCHEMA_VERSION,
        train=train,
        policies=policies,
        seeds=seeds,
        output_dir=str(_typed(values, "output_dir", str)),
        log_level=str(_typed(values, "log_level", str)).upper(),
        log_file=log_file,
    )


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Read and validate the experiment configuration."""
    return build_config(read_config(path))
