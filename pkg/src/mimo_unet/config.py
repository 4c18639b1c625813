"""Strict JSON run configuration.

A run config has two sections, ``model`` and ``train``; every key is
checked against the corresponding dataclass and unknown keys are rejected
rather than ignored, so typos fail loudly before any training starts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .arch import ArchConfig
from .baselines import EnsembleConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_run_config", "load_run_config"]

MODEL_KINDS = ("mimo", "dropout", "ensemble")


class ConfigError(ValueError):
    """Invalid or malformed run configuration."""


def _build(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in {where}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    kind: str
    arch: ArchConfig
    train: TrainConfig
    ensemble: EnsembleConfig | None = None

    def to_json(self) -> str:
        payload = {
            "model": {"kind": self.kind, "arch": dataclasses.asdict(self.arch)},
            "train": dataclasses.asdict(self.train),
        }
        if self.ensemble is not None:
            payload["model"]["ensemble"] = {
                "size": self.ensemble.size,
                "seeds": list(self.ensemble.seeds),
            }
        return json.dumps(payload, indent=1, sort_keys=True)


def parse_run_config(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(payload) - {"model", "train"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    model = payload.get("model")
    if not isinstance(model, dict):
        raise ConfigError("missing or malformed 'model' section")
    unknown = sorted(set(model) - {"kind", "arch", "ensemble"})
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in model")
    kind = model.get("kind", "mimo")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {kind!r}")

    arch = _build(ArchConfig, model.get("arch", {}), "model.arch")
    train = _build(TrainConfig, payload.get("train", {}), "train")

    ensemble = None
    if kind == "ensemble":
        if "ensemble" not in model:
            raise ConfigError("model.kind 'ensemble' requires a model.ensemble section")
        ens = dict(model["ensemble"])
        if "seeds" in ens:
            ens["seeds"] = tuple(ens["seeds"])
        ensemble = _build(EnsembleConfig, ens, "model.ensemble")
        if arch.num_subnetworks != 1:
            raise ConfigError("ensemble members must use num_subnetworks = 1")
    elif "ensemble" in model:
        raise ConfigError("model.ensemble is only valid with kind 'ensemble'")

    if kind == "dropout":
        if arch.num_subnetworks != 1:
            raise ConfigError("dropout model must use num_subnetworks = 1")
        if arch.dropout_p <= 0:
            raise ConfigError("dropout model requires arch.dropout_p > 0")

    return RunConfig(kind=kind, arch=arch, train=train, ensemble=ensemble)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(payload)
