"""Feature extractor f, class head c and domain head d as ReLU MLPs.

Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
ReLU sits between layers, never after the last one.

Checkpoint format (``.npz``): one array per parameter, named
``extractor.<i>.weight``, ``extractor.<i>.bias``, ``class_head.<i>.*`` and
``domain_head.<i>.*``, plus ``__arch__``, a 0-d unicode array holding the
architecture as JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad

GROUPS = ("extractor", "class_head", "domain_head")


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int
    num_classes: int
    num_domains: int
    feature_dim: int = 32
    extractor_hidden: tuple[int, ...] = (64,)
    head_hidden: tuple[int, ...] = (32,)
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extractor_hidden", tuple(self.extractor_hidden))
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
        widths = [self.input_dim, self.num_classes, self.num_domains, self.feature_dim]
        widths += list(self.extractor_hidden) + list(self.head_hidden)
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {self}")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")

    def layer_sizes(self, group: str) -> list[int]:
        if group == "extractor":
            return [self.input_dim, *self.extractor_hidden, self.feature_dim]
        out = self.num_classes if group == "class_head" else self.num_domains
        return [self.feature_dim, *self.head_hidden, out]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls(**json.loads(text))


@dataclass
class ModelParams:
    """Layer lists of ``(weight, bias)`` pairs.

    Entries are numpy arrays for stored parameters or :class:`~.autodiff.Tensor`
    after :meth:`bind`.
    """

    extractor: list
    class_head: list
    domain_head: list
    arch: Optional[ArchConfig] = field(default=None, compare=False)

    def group(self, name: str) -> list:
        return getattr(self, name)

    def named(self) -> dict:
        out = {}
        for g in GROUPS:
            for i, (w, b) in enumerate(self.group(g)):
                out[f"{g}.{i}.weight"] = w
                out[f"{g}.{i}.bias"] = b
        return out

    @classmethod
    def from_named(cls, named: dict, arch: Optional[ArchConfig] = None) -> "ModelParams":
        groups = {}
        for g in GROUPS:
            layers = []
            i = 0
            while f"{g}.{i}.weight" in named:
                layers.append((named[f"{g}.{i}.weight"], named[f"{g}.{i}.bias"]))
                i += 1
            groups[g] = layers
        return cls(arch=arch, **groups)

    def bind(self, graph: ad.Graph, trainable=GROUPS) -> "ModelParams":
        """Place parameters on ``graph``; groups not in ``trainable`` become constants."""
        bound = {}
        for g in GROUPS:
            leaf = graph.param if g in trainable else graph.constant
            bound[g] = [(leaf(w), leaf(b)) for w, b in self.group(g)]
        return ModelParams(arch=self.arch, **bound)

    def copy(self) -> "ModelParams":
        return ModelParams.from_named({k: np.array(v, copy=True) for k, v in self.named().items()}, self.arch)


def init(config: ArchConfig, rng: Optional[np.random.Generator] = None) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if rng is None:
        rng = np.random.default_rng(config.init_seed)
    groups = {}
    for g in GROUPS:
        sizes = config.layer_sizes(g)
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append((w, np.zeros(fan_out)))
        groups[g] = layers
    return ModelParams(arch=config, **groups)


def mlp(layers: list, x: ad.Tensor) -> ad.Tensor:
    h = x
    for k, (w, b) in enumerate(layers):
        if w.shape[0] != h.shape[1]:
            raise ad.ShapeError(f"layer {k} expects width {w.shape[0]}, got {h.shape[1]}")
        h = ad.add_bias(ad.matmul(h, w), b)
        if k < len(layers) - 1:
            h = ad.relu(h)
    return h


def extract(params: ModelParams, x: ad.Tensor) -> ad.Tensor:
    return mlp(params.extractor, x)


def classify(params: ModelParams, z: ad.Tensor) -> ad.Tensor:
    return mlp(params.class_head, z)


def domain_classify(params: ModelParams, z: ad.Tensor) -> ad.Tensor:
    return mlp(params.domain_head, z)


def head_layers(params: ModelParams, target: str) -> list:
    if target == "class":
        return params.class_head
    if target == "domain":
        return params.domain_head
    raise ValueError(f"unknown head {target!r}")


def forward_array(layers: list, x: np.ndarray) -> np.ndarray:
    """Graph-free forward pass over numpy parameters, for evaluation."""
    h = np.asarray(x, dtype=np.float64)
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def save_checkpoint(path, params: ModelParams) -> None:
    arrays = {k: np.asarray(v) for k, v in params.named().items()}
    if params.arch is not None:
        arrays["__arch__"] = np.array(params.arch.to_json())
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        named = {k: data[k].copy() for k in data.files if k != "__arch__"}
        arch = ArchConfig.from_json(str(data["__arch__"])) if "__arch__" in data.files else None
    return ModelParams.from_named(named, arch)
