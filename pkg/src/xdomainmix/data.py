"""Synthetic multi-domain datasets, splits and domain-balanced batching.

Training domains get ids ``0..N-1``; the held-out test domain gets id ``N``.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

VAL_FRACTION = 0.2


@dataclass(frozen=True)
class DatasetBundle:
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    split: np.ndarray  # "train" / "val" / "test" per row
    num_classes: int
    num_domains: int  # training domains only
    name: str = "dataset"

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def test_domain(self) -> int:
        return self.num_domains

    def select(self, split: str, domain: Optional[int] = None):
        """``(x, y, domain)`` rows of one split, optionally one domain."""
        keep = self.split == split
        if domain is not None:
            keep &= self.domain == domain
        return self.x[keep], self.y[keep], self.domain[keep]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x, self.y, self.domain):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("|".join(self.split.tolist()).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    index: np.ndarray  # rows of the bundle


@dataclass(frozen=True)
class SpuriousBlobsSpec:
    """Invariant Gaussian signal plus a domain-dependent, class-correlated nuisance.

    With probability ``p`` a sample's nuisance dims carry its own class pattern,
    otherwise another class's. Each domain scales the pattern and shifts it along
    the alternating-sign direction ``(1, -1, 1, ...)``, which makes the domains
    separable in the nuisance dims.
    """

    signal_dim: int = 2
    nuisance_dim: int = 2
    num_classes: int = 2
    signal_noise: float = 0.8
    spurious_p: tuple[float, ...] = (0.95, 0.90, 0.85)
    test_spurious_p: float = 0.10
    nuisance_offsets: tuple[float, ...] = (-2.0, 0.0, 2.0)
    test_nuisance_offset: float = 4.0
    nuisance_scales: tuple[float, ...] = (1.0, 1.5, 2.0)
    test_nuisance_scale: float = 1.0
    nuisance_noise: float = 0.3
    samples_per_domain: int = 2000

    def __post_init__(self):
        for name in ("spurious_p", "nuisance_offsets", "nuisance_scales"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        n = len(self.spurious_p)
        if n < 2:
            raise ValueError("need at least 2 training domains")
        if len(self.nuisance_offsets) != n or len(self.nuisance_scales) != n:
            raise ValueError("spurious_p, nuisance_offsets and nuisance_scales need one entry per domain")
        if not all(0.0 <= p <= 1.0 for p in (*self.spurious_p, self.test_spurious_p)):
            raise ValueError("agreement probabilities must lie in [0, 1]")
        if min(self.signal_dim, self.nuisance_dim, self.samples_per_domain) < 1 or self.num_classes < 2:
            raise ValueError("invalid dimensions or sample counts")
        if self.signal_noise < 0 or self.nuisance_noise < 0:
            raise ValueError("noise levels must be nonnegative")

    @property
    def num_domains(self) -> int:
        return len(self.spurious_p)


@dataclass(frozen=True)
class RotatedMoonsSpec:
    angles_deg: tuple[float, ...] = (0.0, 30.0, 60.0)
    test_angle_deg: float = 90.0
    noise: float = 0.1
    samples_per_domain: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "angles_deg", tuple(float(a) for a in self.angles_deg))
        all_angles = (*self.angles_deg, self.test_angle_deg)
        if len(self.angles_deg) < 1:
            raise ValueError("need at least 1 training domain")
        if len(set(a % 360.0 for a in all_angles)) != len(all_angles):
            raise ValueError("domain angles must be distinct")
        if self.noise < 0 or self.samples_per_domain < 2:
            raise ValueError("invalid noise or sample count")

    @property
    def num_domains(self) -> int:
        return len(self.angles_deg)


def _class_levels(num_classes: int) -> np.ndarray:
    # evenly spaced in [-1, 1]: two classes give -1 and +1
    return np.linspace(-1.0, 1.0, num_classes)


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    y = np.arange(n) % num_classes
    return rng.permutation(y)


def _blobs_domain(spec: SpuriousBlobsSpec, p: float, offset: float, scale: float, rng):
    n, c = spec.samples_per_domain, spec.num_classes
    levels = _class_levels(c)
    y = _balanced_labels(n, c, rng)
    signal = levels[y][:, None] + spec.signal_noise * rng.standard_normal((n, spec.signal_dim))
    agree = rng.random(n) < p
    # disagreeing samples take another class's pattern
    other = (y + rng.integers(1, c, size=n)) % c
    shown = np.where(agree, y, other)
    direction = np.where(np.arange(spec.nuisance_dim) % 2 == 0, 1.0, -1.0)
    nuisance = scale * levels[shown][:, None] + offset * direction[None, :]
    if spec.nuisance_noise > 0:
        nuisance = nuisance + spec.nuisance_noise * rng.standard_normal(nuisance.shape)
    return np.hstack([signal, nuisance]), y


def _assemble(parts, num_classes: int, num_domains: int, rng, name: str) -> DatasetBundle:
    """Stack per-domain ``(x, y)`` parts; last one is the test domain."""
    xs, ys, ds, ss = [], [], [], []
    for dom, (x, y) in enumerate(parts):
        split = np.full(len(y), "test" if dom == num_domains else "train", dtype=object)
        if dom < num_domains:
            for c in range(num_classes):
                rows = np.flatnonzero(y == c)
                n_val = int(round(VAL_FRACTION * len(rows)))
                split[rng.permutation(rows)[:n_val]] = "val"
        xs.append(x)
        ys.append(y)
        ds.append(np.full(len(y), dom, dtype=np.int64))
        ss.append(split)
    return DatasetBundle(
        x=np.vstack(xs).astype(np.float64),
        y=np.concatenate(ys).astype(np.int64),
        domain=np.concatenate(ds),
        split=np.concatenate(ss).astype(str),
        num_classes=num_classes,
        num_domains=num_domains,
        name=name,
    )


def _domain_streams(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    # one child stream per domain plus one for the split assignment
    return rng.spawn(count + 1)


def gen_spurious_blobs(spec: SpuriousBlobsSpec = SpuriousBlobsSpec(), rng=None) -> DatasetBundle:
    rng = np.random.default_rng(0) if rng is None else rng
    streams = _domain_streams(rng, spec.num_domains + 1)
    settings = list(zip(spec.spurious_p, spec.nuisance_offsets, spec.nuisance_scales))
    settings.append((spec.test_spurious_p, spec.test_nuisance_offset, spec.test_nuisance_scale))
    parts = [_blobs_domain(spec, p, o, s, streams[k]) for k, (p, o, s) in enumerate(settings)]
    return _assemble(parts, spec.num_classes, spec.num_domains, streams[-1], "spurious_blobs")


def canonical_moons(n: int, rng: np.random.Generator):
    """Two interleaved half circles, centred on the origin, before rotation and noise."""
    y = _balanced_labels(n, 2, rng)
    t = rng.uniform(0.0, math.pi, size=n)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    pts = np.where(y[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
    return pts, y


def rotation(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def gen_rotated_moons(spec: RotatedMoonsSpec = RotatedMoonsSpec(), rng=None) -> DatasetBundle:
    rng = np.random.default_rng(0) if rng is None else rng
    streams = _domain_streams(rng, spec.num_domains + 1)
    parts = []
    for k, angle in enumerate((*spec.angles_deg, spec.test_angle_deg)):
        pts, y = canonical_moons(spec.samples_per_domain, streams[k])
        pts = pts @ rotation(angle).T
        pts = pts + spec.noise * streams[k].standard_normal(pts.shape)
        parts.append((pts, y))
    return _assemble(parts, 2, spec.num_domains, streams[-1], "rotated_moons")


DATASETS = {
    "spurious_blobs": (SpuriousBlobsSpec, gen_spurious_blobs),
    "rotated_moons": (RotatedMoonsSpec, gen_rotated_moons),
}


def make_dataset(kind: str, params: Optional[dict] = None, seed: int = 0) -> DatasetBundle:
    if kind not in DATASETS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {sorted(DATASETS)}")
    spec_cls, gen = DATASETS[kind]
    return gen(spec_cls(**(params or {})), np.random.default_rng(seed))


def make_batches(bundle: DatasetBundle, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Endless stream of batches with ``batch_size / N`` training rows per domain.

    Each domain walks through its own shuffled order and reshuffles when it runs
    out, so every row is seen once per per-domain epoch.
    """
    n_dom = bundle.num_domains
    if batch_size % n_dom:
        raise ValueError(f"batch_size {batch_size} is not divisible by {n_dom} training domains")
    per = batch_size // n_dom
    pools = [np.flatnonzero((bundle.split == "train") & (bundle.domain == d)) for d in range(n_dom)]
    if any(len(p) < per for p in pools):
        raise ValueError("a training domain has fewer rows than its share of a batch")
    orders = [rng.permutation(p) for p in pools]
    cursors = [0] * n_dom
    while True:
        chunks = []
        for d in range(n_dom):
            if cursors[d] + per > len(orders[d]):
                orders[d] = rng.permutation(pools[d])
                cursors[d] = 0
            chunks.append(orders[d][cursors[d]:cursors[d] + per])
            cursors[d] += per
        idx = np.concatenate(chunks)
        yield Batch(bundle.x[idx], bundle.y[idx], bundle.domain[idx], idx)


def row_hashes(x: np.ndarray) -> set:
    x = np.ascontiguousarray(x, dtype=np.float64)
    return {hashlib.sha1(row.tobytes()).hexdigest() for row in x}


def check_no_leakage(bundle: DatasetBundle) -> bool:
    """True when no test-domain row also occurs among training or validation rows."""
    test = row_hashes(bundle.x[bundle.split == "test"])
    seen = row_hashes(bundle.x[bundle.split != "test"])
    return test.isdisjoint(seen)


def dump_csv(bundle: DatasetBundle, path) -> None:
    d = bundle.input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{k}" for k in range(d)] + ["y", "domain", "split"])
        for x, y, dom, s in zip(bundle.x, bundle.y, bundle.domain, bundle.split):
            w.writerow([repr(float(v)) for v in x] + [int(y), int(dom), s])


def load_csv(path, num_classes: Optional[int] = None, name: str = "csv") -> DatasetBundle:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xcols = [k for k, h in enumerate(header) if h.startswith("x_")]
    for col in ("y", "domain", "split"):
        if col not in header:
            raise ValueError(f"missing column {col!r}")
    iy, idom, isp = header.index("y"), header.index("domain"), header.index("split")
    x = np.array([[float(r[k]) for k in xcols] for r in body], dtype=np.float64)
    y = np.array([int(r[iy]) for r in body], dtype=np.int64)
    dom = np.array([int(r[idom]) for r in body], dtype=np.int64)
    split = np.array([r[isp] for r in body]).astype(str)
    n_dom = len(set(dom[split != "test"].tolist()))
    return DatasetBundle(x, y, dom, split, num_classes or int(y.max()) + 1, n_dom, name)
