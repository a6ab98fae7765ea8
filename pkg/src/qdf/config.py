"""Flat YAML run configuration.

Precedence, lowest first: shipped defaults, the file named by ``QDF_CONFIG``,
the file passed with ``--config``, command-line flags.  Unknown keys are
rejected.
"""

from __future__ import annotations

import os
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import Mapping

import yaml

from qdf.chem import TARGET_KINDS, DatasetConfig, PropertySchema
from qdf.trainer import TrainConfig

ENV_VAR = "QDF_CONFIG"

DATASET_KEYS = {"property_columns", "id_column", "target_kind", "target_properties",
                "atom_refs", "split_ratio", "min_atoms", "max_atoms", "basis_file"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
RUN_KEYS = {"deterministic", "strict"}
KNOWN_KEYS = DATASET_KEYS | TRAIN_KEYS | RUN_KEYS

TARGET_ALIASES = {"atomization": "atomization_energy_0K", "zpve": "zpve",
                  "enthalpy": "enthalpy_298K"}


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    text = resources.files("qdf").joinpath("data/qm9.yaml").read_text(encoding="utf-8")
    cfg = yaml.safe_load(text)
    cfg.setdefault("deterministic", False)
    cfg.setdefault("strict", False)
    cfg.setdefault("basis_file", None)
    return cfg


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    check_keys(data, str(path))
    return data


def check_keys(data: Mapping, where: str) -> None:
    unknown = sorted(set(data) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def resolve_config(config_path=None, overrides: Mapping | None = None,
                   env: Mapping[str, str] | None = None) -> dict:
    env = os.environ if env is None else env
    cfg = default_config()
    if env.get(ENV_VAR):
        cfg.update(load_config_file(env[ENV_VAR]))
    if config_path:
        cfg.update(load_config_file(config_path))
    if overrides:
        clean = {k: v for k, v in overrides.items() if v is not None}
        check_keys(clean, "command line")
        cfg.update(clean)
    kind = cfg.get("target_kind")
    cfg["target_kind"] = TARGET_ALIASES.get(kind, kind)
    if cfg["target_kind"] not in TARGET_KINDS:
        raise ConfigError(f"unknown target kind {kind!r}")
    try:
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def dataset_config(cfg: Mapping) -> DatasetConfig:
    columns = {int(k): str(v) for k, v in cfg["property_columns"].items()}
    return DatasetConfig(
        schema=PropertySchema(columns, id_column=int(cfg["id_column"])),
        target_kind=cfg["target_kind"],
        target_properties=dict(cfg["target_properties"]),
        atom_refs={k: float(v) for k, v in (cfg.get("atom_refs") or {}).items()},
        split_ratio=tuple(float(x) for x in cfg["split_ratio"]),
        seed=int(cfg["seed"]),
    )


def train_config(cfg: Mapping) -> TrainConfig:
    return TrainConfig.from_dict({k: cfg[k] for k in TRAIN_KEYS if k in cfg})
