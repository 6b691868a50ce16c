"""Accuracy, invariance, divergence and feature-removal measurements."""

from __future__ import annotations

import itertools
import math
import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels, models
from .decomposition import head_grads
from .optim import AdamState, optimizer_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsRecord:
    seed: int
    method: str
    step: int
    train_acc: float
    val_acc: float
    test_acc: float
    cov_distance: float
    risk_variance: float
    mmd_aug: float

    def __post_init__(self):
        for name in ("train_acc", "val_acc", "test_acc"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("cov_distance", "risk_variance", "mmd_aug"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> dict:
        return asdict(self)


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax matches; ties go to the lowest index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("accuracy needs a nonempty (rows, classes) matrix")
    if labels.shape != (logits.shape[0],):
        raise ValueError("one label per row required")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def per_row_cross_entropy(logits, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return log_norm - shifted[np.arange(len(labels)), labels]


def covariance_distance(z, classes, domains) -> float:
    """Mean over classes and unordered domain pairs of ``||C_i - C_j||_F^2``.

    ``C`` is the sample covariance (denominator ``m - 1``) of one class's
    representations in one domain; cells with fewer than two rows are skipped.
    """
    z = np.asarray(z, dtype=np.float64)
    classes = np.asarray(classes)
    domains = np.asarray(domains)
    terms = []
    for c in np.unique(classes):
        covs = {}
        for d in np.unique(domains):
            rows = z[(classes == c) & (domains == d)]
            if len(rows) < 2:
                logger.info("covariance_distance: skipping class %s domain %s (%d rows)", c, d, len(rows))
                continue
            covs[d] = np.cov(rows, rowvar=False, ddof=1).reshape(z.shape[1], z.shape[1])
        for a, b in itertools.combinations(sorted(covs), 2):
            terms.append(float(np.sum((covs[a] - covs[b]) ** 2)))
    if not terms:
        raise ValueError("no (class, domain pair) with enough rows")
    return float(np.mean(terms))


def risk_variance(risks: Sequence[float]) -> float:
    """Population variance of per-domain risks.

    Uses the pairwise form ``sum_{i<j} (r_i - r_j)^2 / N^2`` with exactly rounded
    summation: equal risks give exactly 0 and reordering never changes the bits.
    """
    risks = np.asarray(risks, dtype=np.float64).reshape(-1)
    n = risks.size
    if n < 2:
        raise ValueError("risk variance needs at least 2 domains")
    iu = np.triu_indices(n, k=1)
    diffs = (risks[:, None] - risks[None, :])[iu]
    return math.fsum((diffs * diffs).tolist()) / (n * n)


def domain_risks(logits, labels, domains) -> np.ndarray:
    ce = per_row_cross_entropy(logits, labels)
    domains = np.asarray(domains)
    return np.array([ce[domains == d].mean() for d in np.unique(domains)])


def median_heuristic(a, b) -> float:
    return kernels.median_pairwise_distance(np.vstack([np.asarray(a), np.asarray(b)]))


def mmd(a, b, bandwidth: Optional[float] = None) -> float:
    """Biased squared MMD with a Gaussian kernel; median-heuristic bandwidth by default."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] < 1 or b.shape[0] < 1 or a.shape[1] != b.shape[1]:
        raise ValueError("mmd needs two nonempty sets of equal width")
    if bandwidth is None:
        bandwidth = median_heuristic(a, b)
        if bandwidth == 0.0:
            raise ValueError("median pairwise distance is 0; pass an explicit bandwidth")
    elif bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    # canonical argument order keeps the cross-term summation, and so the result, symmetric
    if (a.shape[0], a.tobytes()) > (b.shape[0], b.tobytes()):
        a, b = b, a
    kaa, kbb, kab = kernels.gaussian_kernel_means(a, b, float(bandwidth))
    return max(kaa + kbb - 2.0 * kab, 0.0)


# --------------------------------------------------------------------------
# feature removal
# --------------------------------------------------------------------------

REMOVAL_STRATEGIES = ("importance", "random", "grad_norm")


def removal_order(params, z, labels, target: str, strategy: str, rng) -> np.ndarray:
    """Per row, dims sorted from first-to-remove to last."""
    if strategy not in REMOVAL_STRATEGIES:
        raise ValueError(f"unknown removal strategy {strategy!r}")
    n, k = z.shape
    if strategy == "random":
        return np.stack([rng.permutation(k) for _ in range(n)])
    if target not in ("class", "domain"):
        raise ValueError(f"unknown target {target!r}")
    grad = head_grads(params, z, labels, target)
    score = grad * z
    key = score if strategy == "importance" else np.abs(grad)
    # stable descending sort
    return np.argsort(-key, axis=1, kind="stable")


def removal_study(params: models.ModelParams, x, labels, strategy: str, fractions: Sequence[float],
                  target: str = "class", rng=None, repeats: int = 1) -> list[float]:
    """Accuracy of the target head after zeroing the top fraction of feature dims."""
    rng = np.random.default_rng(0) if rng is None else rng
    labels = np.asarray(labels, dtype=np.int64)
    z = models.forward_array(params.extractor, x)
    head = models.head_layers(params, target)
    k = z.shape[1]
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
    totals = np.zeros(len(fractions))
    for _ in range(repeats if strategy == "random" else 1):
        order = removal_order(params, z, labels, target, strategy, rng)
        for fi, f in enumerate(fractions):
            m = int(round(f * k))
            zm = z.copy()
            if m:
                np.put_along_axis(zm, order[:, :m], 0.0, axis=1)
            totals[fi] += accuracy(models.forward_array(head, zm), labels)
    reps = repeats if strategy == "random" else 1
    return [float(t / reps) for t in totals]


# --------------------------------------------------------------------------
# 2-D projection
# --------------------------------------------------------------------------


def project_2d(features, labels, rng=None, hidden: int = 16, steps: int = 300,
               lr: float = 1e-2, weight_decay: float = 1e-3, batch_size: int = 128) -> np.ndarray:
    """Train feature->hidden->2 linear maps with a linear classifier on top; return the 2-D coords."""
    z = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("projection needs at least two classes")
    remap = np.searchsorted(classes, labels)
    rng = np.random.default_rng(0) if rng is None else rng
    mu, sd = z.mean(0), z.std(0) + 1e-12
    zs = (z - mu) / sd
    sizes = [z.shape[1], hidden, 2, len(classes)]
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (a + b))
        params[f"w{i}"] = rng.uniform(-lim, lim, size=(a, b))
        params[f"b{i}"] = np.zeros(b)
    state = AdamState()
    n = len(zs)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        g = ad.Graph()
        t = {k: g.param(v) for k, v in params.items()}
        h = g.constant(zs[idx])
        for i in range(3):
            h = ad.add_bias(ad.matmul(h, t[f"w{i}"]), t[f"b{i}"])
        loss = ad.softmax_cross_entropy(h, remap[idx])
        grads = ad.backward(loss)
        params = optimizer_step(params, {k: grads[v] for k, v in t.items()}, state, lr, weight_decay)
    return (zs @ params["w0"] + params["b0"]) @ params["w1"] + params["b1"]
