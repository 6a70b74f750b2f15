"""YAML-backed construction of the dataclass configs.

Files carry two optional sections, ``network`` and ``train``; unknown keys in
either are rejected so typos fail loudly instead of silently training with a
default.  Sequence-valued fields are coerced to the tuple/frozenset types the
dataclasses expect.
"""

import dataclasses

import yaml

from .network import NetworkConfig
from .scene import SceneParams
from .training import TrainConfig

_TUPLE_FIELDS = {"image_size", "channels", "decay_steps"}
_SET_FIELDS = {"attention_layers"}


def _build(cls, data, what):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown {what} config keys: {', '.join(unknown)}")
    for key, value in data.items():
        if key in _TUPLE_FIELDS:
            data[key] = tuple(value)
        elif key in _SET_FIELDS:
            data[key] = frozenset(value)
    return cls(**data)


def network_config_from_dict(data):
    return _build(NetworkConfig, data, "network")


def train_config_from_dict(data):
    return _build(TrainConfig, data, "train")


def scene_params_from_dict(data):
    return _build(SceneParams, data, "scene")


def network_config_to_dict(config):
    out = dataclasses.asdict(config)
    out["image_size"] = list(config.image_size)
    out["channels"] = list(config.channels)
    out["attention_layers"] = sorted(config.attention_layers)
    return out


def load_train_file(path, network_overrides=None):
    """Parse a train config file; returns (network_dict, train_config)."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    unknown = sorted(set(raw) - {"network", "train"})
    if unknown:
        raise ValueError(f"{path}: unknown sections: {', '.join(unknown)}")
    network = dict(raw.get("network") or {})
    network.update(network_overrides or {})
    return network, train_config_from_dict(raw.get("train"))
