"""Declarative run configuration (YAML) with ``key=value`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import os

import yaml

from .errors import ConfigError
from .network import HDFormerConfig
from .training import LossConfig, OptimizerConfig

DATA_DEFAULTS = {
    "train": None,
    "val": None,
    "window_stride": None,
    "synthetic": {"sequences": 32, "frames": 96, "noise": 0.0, "seed": 0},
}

SYNTH_KEYS = set(DATA_DEFAULTS["synthetic"])


def _fields(cls):
    return {f.name: f.default for f in dataclasses.fields(cls)}


def defaults() -> dict:
    model = _fields(HDFormerConfig)
    model.pop("seed")
    model["channels"] = list(model["channels"])
    model["hoa_placement"] = list(model["hoa_placement"])
    optim = _fields(OptimizerConfig)
    optim["milestones"] = list(optim["milestones"])
    optim["betas"] = list(optim["betas"])
    loss = _fields(LossConfig)
    loss["intervals"] = list(loss["intervals"])
    return {
        "seed": 0,
        "out_dir": "runs/default",
        "model": model,
        "loss": loss,
        "optim": optim,
        "data": copy.deepcopy(DATA_DEFAULTS),
    }


def _merge(base, override, path=""):
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError("unknown key", key=where)
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError("expected a mapping", key=where)
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def _leaf_paths(d, prefix=()):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _leaf_paths(v, prefix + (k,))
        else:
            yield prefix + (k,)


def apply_override(cfg: dict, assignment: str):
    """Apply ``key=value``; ``key`` may be dotted or an unambiguous leaf name."""
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key = key.strip()
    parts = tuple(key.split("."))
    leaves = list(_leaf_paths(cfg))
    if parts in leaves:
        path = parts
    else:
        matches = [p for p in leaves if p[-len(parts):] == parts]
        if not matches:
            raise ConfigError("unknown key", key=key)
        if len(matches) > 1:
            opts = ", ".join(".".join(m) for m in matches)
            raise ConfigError(f"ambiguous key, could be: {opts}", key=key)
        path = matches[0]
    value = yaml.safe_load(raw) if raw.strip() else None
    node = cfg
    for p in path[:-1]:
        node = node[p]
    node[path[-1]] = value


@dataclasses.dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def out_dir(self):
        return self.raw["out_dir"]

    @property
    def data(self):
        return self.raw["data"]

    def model_config(self) -> HDFormerConfig:
        return HDFormerConfig.from_dict(dict(self.raw["model"], seed=self.seed))

    def optimizer_config(self) -> OptimizerConfig:
        try:
            return OptimizerConfig(**self.raw["optim"])
        except TypeError as exc:
            raise ConfigError(str(exc), key="optim") from None

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.raw["loss"])

    def validate(self):
        self.model_config()
        self.optimizer_config()
        self.loss_config()
        unknown = set(self.data.get("synthetic") or {}) - SYNTH_KEYS
        if unknown:
            raise ConfigError("unknown key", key="data.synthetic." + sorted(unknown)[0])
        return self

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=False)


def load_run_config(path=None, overrides=(), env=None) -> RunConfig:
    """Defaults <- config file <- ``--set`` overrides <- ``HDF_SEED``."""
    env = os.environ if env is None else env
    cfg = defaults()
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        user = dict(user)
        # allow the edge-count spelling of the order cap
        spd = (user.get("model") or {}).get("spd_edges")
        if spd is not None:
            user["model"] = dict(user["model"])
            user["model"].pop("spd_edges")
            user["model"]["order_joints"] = int(spd) + 1
        _merge(cfg, user)
    for o in overrides:
        if o.split("=", 1)[0].strip() in ("spd_edges", "model.spd_edges"):
            o = "model.order_joints=" + str(int(o.split("=", 1)[1]) + 1)
        apply_override(cfg, o)
    if env.get("HDF_SEED"):
        cfg["seed"] = int(env["HDF_SEED"])
    return RunConfig(cfg).validate()
