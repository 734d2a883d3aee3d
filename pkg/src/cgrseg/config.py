"""Structured JSON configuration.

A config file is a JSON object with up to two sections::

    {"model": {...ModelConfig fields...}, "train": {...TrainConfig fields...}}

Unknown sections or keys are rejected before any tensor is allocated, and
the dataclass validators run on construction, so a bad file can never
reach compute.  Every field is optional except ``model.num_classes``,
which defaults to 4 (the toy task).
"""

from __future__ import annotations

import dataclasses
import json

from .model import ModelConfig
from .train import TrainConfig

__all__ = ["default_model_config", "load_config", "parse_config"]

_LIST_FIELDS = {"stage_channels", "input_size"}


def default_model_config() -> ModelConfig:
    return ModelConfig(num_classes=4)


def _build(cls, section: dict, name: str, defaults):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ValueError(f"unknown {name} config keys: {', '.join(unknown)}")
    kwargs = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(cls)}
    for key, value in section.items():
        if key in _LIST_FIELDS:
            if not isinstance(value, list):
                raise ValueError(f"{name}.{key} must be a list")
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(tree, dict):
        raise ValueError("config root must be a JSON object")
    unknown = sorted(set(tree) - {"model", "train"})
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(unknown)}")
    for section in ("model", "train"):
        if section in tree and not isinstance(tree[section], dict):
            raise ValueError(f"config section {section!r} must be an object")
    model = _build(ModelConfig, tree.get("model", {}), "model",
                   default_model_config())
    train = _build(TrainConfig, tree.get("train", {}), "train", TrainConfig())
    return model, train


def load_config(path: str) -> tuple[ModelConfig, TrainConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
