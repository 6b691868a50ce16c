"""JSON experiment configuration with a closed schema.

Layout::

    {
      "dataset": {"kind": "spurious_blobs", "params": {...}, "seed": 0},
      "arch":    {"feature_dim": 32, "extractor_hidden": [64], "head_hidden": [32]},
      "train":   {"method": "xdomainmix", ... any TrainConfig field ...},
      "eval":    {"eval_interval": 100, "mmd_points": 480, "bandwidth": null},
      "out": "runs/example"
    }

``dataset.kind`` and ``train.method`` are required. ``dataset.seed`` defaults to
the run seed. Any key not listed here is rejected.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import data, models
from .training import EvalConfig, TrainConfig

SECTIONS = {"dataset", "arch", "train", "eval", "out"}
DATASET_KEYS = {"kind", "params", "seed"}
ARCH_KEYS = {"feature_dim", "extractor_hidden", "head_hidden"}


class ConfigError(ValueError):
    """Raised for malformed configs; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section: dict, allowed: set, prefix: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}", "unknown key")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(name, "must be an object")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_kind: str
    dataset_params: dict = field(default_factory=dict)
    dataset_seed: Optional[int] = None
    arch: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: Any) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        _reject_unknown(raw, SECTIONS, "")
        ds = _section(raw, "dataset")
        _reject_unknown(ds, DATASET_KEYS, "dataset.")
        if "kind" not in ds:
            raise ConfigError("dataset.kind", "missing required key")
        if ds["kind"] not in data.DATASETS:
            raise ConfigError("dataset.kind", f"unknown dataset {ds['kind']!r}")
        spec_cls = data.DATASETS[ds["kind"]][0]
        params = ds.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("dataset.params", "must be an object")
        _reject_unknown(params, _field_names(spec_cls), "dataset.params.")
        arch = _section(raw, "arch")
        _reject_unknown(arch, ARCH_KEYS, "arch.")
        train = _section(raw, "train")
        _reject_unknown(train, _field_names(TrainConfig), "train.")
        if "method" not in train:
            raise ConfigError("train.method", "missing required key")
        ev = _section(raw, "eval")
        _reject_unknown(ev, _field_names(EvalConfig), "eval.")
        out = raw.get("out")
        cfg = cls(ds["kind"], dict(params), ds.get("seed"), dict(arch), dict(train), dict(ev), out)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def validate(self) -> None:
        """Construct every typed object once so value errors surface at load time."""
        try:
            self.bundle_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError("dataset.params", str(exc)) from None
        try:
            self.train_config(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError("train", str(exc)) from None
        try:
            self.eval_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError("eval", str(exc)) from None

    def to_dict(self) -> dict:
        raw = {"dataset": {"kind": self.dataset_kind, "params": copy.deepcopy(self.dataset_params)},
               "arch": copy.deepcopy(self.arch), "train": copy.deepcopy(self.train),
               "eval": copy.deepcopy(self.eval)}
        if self.dataset_seed is not None:
            raw["dataset"]["seed"] = self.dataset_seed
        if self.out is not None:
            raw["out"] = self.out
        return raw

    def with_train(self, **overrides) -> "ExperimentConfig":
        return dataclasses.replace(self, train={**self.train, **overrides})

    def bundle_spec(self):
        spec_cls = data.DATASETS[self.dataset_kind][0]
        return spec_cls(**self.dataset_params)

    def make_bundle(self, seed: int) -> data.DatasetBundle:
        ds_seed = seed if self.dataset_seed is None else self.dataset_seed
        return data.make_dataset(self.dataset_kind, self.dataset_params, ds_seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**self.eval)

    def arch_config(self, bundle: data.DatasetBundle, seed: int) -> models.ArchConfig:
        extra = dict(self.arch)
        for key in ("extractor_hidden", "head_hidden"):
            if key in extra:
                extra[key] = tuple(extra[key])
        return models.ArchConfig(bundle.input_dim, bundle.num_classes, bundle.num_domains,
                                 init_seed=seed, **extra)

    def resolved(self, seed: int) -> dict:
        """Fully expanded settings for one seed, suitable for a manifest."""
        bundle_spec = dataclasses.asdict(self.bundle_spec())
        tc = self.train_config(seed)
        train = {f.name: getattr(tc, f.name) for f in dataclasses.fields(tc)}
        train["method"] = tc.method.value
        train["pairing_strategy"] = tc.pairing_strategy.value
        defaults = {f.name: f.default for f in dataclasses.fields(models.ArchConfig) if f.name in ARCH_KEYS}
        arch = {k: list(v) if isinstance(v, tuple) else v for k, v in {**defaults, **self.arch}.items()}
        return {
            "dataset": {"kind": self.dataset_kind, "params": bundle_spec,
                        "seed": seed if self.dataset_seed is None else self.dataset_seed},
            "arch": arch,
            "train": train,
            "eval": dataclasses.asdict(self.eval_config()),
        }
