"""Run configuration: a YAML document with one section per pipeline stage.

Precedence is file < environment < command-line flag. Each top-level key
``k`` may be overridden by the variable ``EEGCOND_<K>`` whose value is parsed
as YAML (so ``EEGCOND_TRAIN='{max_epochs: 5}'`` patches one field and
``EEGCOND_SEED=3`` replaces the seed).
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .analysis import TsneConfig
from .dataset import EffectRule, SyntheticSpec
from .models import BACKBONES, ModelSpec
from .preprocess import PreprocessConfig
from .training import TrainConfig

ENV_PREFIX = "EEGCOND_"

# seeds live only at the top level; every stage derives its seed from it
_SEEDLESS = {"seed"}


class ConfigError(ValueError):
    """Schema or value problem; ``problems`` holds one line per bad field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _fields(cls, skip=()) -> dict:
    return {f.name: copy.deepcopy(getattr(cls(), f.name)) for f in fields(cls)
            if f.name not in skip}


def default_dict() -> dict:
    synthetic = _fields(SyntheticSpec, _SEEDLESS | {"effect"})
    synthetic["effect"] = asdict(EffectRule())
    model = _fields(ModelSpec)
    model["use_ids"] = True
    model["n_channels"] = None   # taken from the data
    model["n_times"] = None
    model["backbones"] = list(BACKBONES)
    analysis = _fields(TsneConfig, _SEEDLESS)
    analysis["min_size"] = 2
    return {
        "seed": 0,
        "output": "runs/default",
        "dataset": {"path": None, "synthetic": synthetic, "n_unseen": 4,
                    "within_test_fraction": 0.2},
        "preprocess": _fields(PreprocessConfig),
        "model": model,
        "train": _fields(TrainConfig, _SEEDLESS),
        "analysis": analysis,
    }


def _merge(base: dict, patch: Mapping, path: str, problems: list) -> dict:
    out = dict(base)
    for key, value in patch.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            problems.append(f"{where}: unknown key")
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                problems.append(f"{where}: expected a mapping, got {type(value).__name__}")
                continue
            out[key] = _merge(base[key], value, where, problems)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    """Resolved, validated configuration plus the typed per-stage objects."""

    raw: dict
    synthetic: SyntheticSpec
    preprocess: PreprocessConfig
    train: TrainConfig
    tsne: TsneConfig

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output(self) -> Path:
        return Path(self.raw["output"])

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def min_size(self) -> int:
        return self.raw["analysis"]["min_size"]

    def model_spec(self, n_channels: int, n_times: int, backbone: str | None = None,
                   use_ids: bool | None = None) -> ModelSpec:
        m = {k: v for k, v in self.model.items() if k != "backbones"}
        m["n_channels"] = m["n_channels"] or n_channels
        m["n_times"] = m["n_times"] or n_times
        if backbone is not None:
            m["backbone"] = backbone
        if use_ids is not None:
            m["use_ids"] = use_ids
        return ModelSpec.from_dict(m)

    def hash(self) -> str:
        """sha256 of the canonical JSON form; the output directory is excluded
        so identical runs in different places share a hash."""
        body = {k: v for k, v in self.raw.items() if k != "output"}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=False)


def _typed(cls, values: dict, where: str, problems: list):
    # reject wrong scalar types early so messages name the field
    defaults = cls()
    for f in fields(cls):
        if f.name not in values:
            continue
        v, d = values[f.name], getattr(defaults, f.name)
        if isinstance(d, bool) and not isinstance(v, bool):
            problems.append(f"{where}.{f.name}: expected true/false, got {v!r}")
            return None
        if isinstance(d, (int, float)) and not isinstance(d, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                problems.append(f"{where}.{f.name}: expected a number, got {v!r}")
                return None
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        problems.append(f"{where}: {err}")
        return None


def _validate(d: dict) -> RunConfig:
    problems: list[str] = []
    if isinstance(d["seed"], bool) or not isinstance(d["seed"], int) or d["seed"] < 0:
        problems.append(f"seed: expected a non-negative integer, got {d['seed']!r}")
    if not isinstance(d["output"], str) or not d["output"]:
        problems.append("output: expected a directory path")
    ds = d["dataset"]
    if ds["path"] is not None and not isinstance(ds["path"], str):
        problems.append("dataset.path: expected a path or null")
    if isinstance(ds["n_unseen"], bool) or not isinstance(ds["n_unseen"], int) \
            or ds["n_unseen"] < 0:
        problems.append("dataset.n_unseen: expected a non-negative integer")
    f = ds["within_test_fraction"]
    if not isinstance(f, (int, float)) or not 0 < f < 1:
        problems.append("dataset.within_test_fraction: must lie in (0, 1)")
    seed = d["seed"] if isinstance(d["seed"], int) else 0

    syn_d = dict(ds["synthetic"])
    effect = _typed(EffectRule, syn_d.pop("effect"), "dataset.synthetic.effect", problems)
    syn = _typed(SyntheticSpec, {**syn_d, "seed": seed, "effect": effect or EffectRule()},
                 "dataset.synthetic", problems)
    if syn is not None:
        names = {f.name for f in fields(SyntheticSpec)}
        for p in syn.problems():
            head = p.split()[0]
            where = f"dataset.synthetic.{head}" if head in names else "dataset.synthetic"
            problems.append(f"{where}: {p}")
    pre = _typed(PreprocessConfig, d["preprocess"], "preprocess", problems)
    train = _typed(TrainConfig, {**d["train"], "seed": seed}, "train", problems)
    analysis = dict(d["analysis"])
    min_size = analysis.pop("min_size")
    if isinstance(min_size, bool) or not isinstance(min_size, int) or min_size < 1:
        problems.append("analysis.min_size: expected a positive integer")
    tsne = _typed(TsneConfig, {**analysis, "seed": seed}, "analysis", problems)

    m = d["model"]
    backbones = m["backbones"]
    if not isinstance(backbones, list) or not backbones \
            or any(b not in BACKBONES for b in backbones):
        problems.append(f"model.backbones: expected a non-empty list drawn from {BACKBONES}")
    probe = {k: v for k, v in m.items() if k != "backbones"}
    probe["n_channels"] = probe["n_channels"] or 1
    probe["n_times"] = probe["n_times"] or 77
    _typed(ModelSpec, probe, "model", problems)
    if problems:
        raise ConfigError(problems)
    return RunConfig(d, syn, pre, train, tsne)


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError([f"expected a boolean, got {text!r}"])


def load_config(path, env: Mapping[str, str] | None = None,
                flags: Mapping[str, Any] | None = None) -> RunConfig:
    """Read, merge and validate. ``flags`` keys: seed, out, backbone, use_ids."""
    env = os.environ if env is None else env
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError([f"cannot read config file: {err}"]) from err
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigError([f"config file is not valid YAML: {err}"]) from err
    if not isinstance(doc, Mapping):
        raise ConfigError(["config file must hold a mapping of sections"])

    problems: list[str] = []
    resolved = _merge(default_dict(), doc, "", problems)
    for key in sorted(resolved):
        var = ENV_PREFIX + key.upper()
        if var not in env:
            continue
        try:
            value = yaml.safe_load(env[var])
        except yaml.YAMLError as err:
            problems.append(f"{var}: not valid YAML ({err})")
            continue
        if isinstance(resolved[key], dict):
            if not isinstance(value, Mapping):
                problems.append(f"{var}: expected a mapping")
                continue
            resolved[key] = _merge(resolved[key], value, key, problems)
        else:
            resolved[key] = value
    flags = dict(flags or {})
    if flags.get("seed") is not None:
        resolved["seed"] = flags["seed"]
    if flags.get("out") is not None:
        resolved["output"] = str(flags["out"])
    if flags.get("backbone") is not None:
        resolved["model"] = {**resolved["model"], "backbone": flags["backbone"],
                             "backbones": [flags["backbone"]]}
    if flags.get("use_ids") is not None:
        resolved["model"] = {**resolved["model"], "use_ids": parse_bool(flags["use_ids"])}
    if problems:
        raise ConfigError(problems)
    return _validate(resolved)


def echo_config(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.yaml"
    path.write_text(f"# config_hash: {cfg.hash()}\n" + cfg.to_yaml())
    return path
