"""Gradient-times-value importance scores and the four-way feature split.

Thresholds are per-sample nearest-rank quantiles; a dimension is selected only
when its score is strictly above the threshold, so tied dimensions fall into
the generic component.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels, models

logger = logging.getLogger(__name__)

CLASS_QUANTILE = 0.5


@dataclass(frozen=True)
class MaskPair:
    class_mask: np.ndarray
    domain_mask: np.ndarray
    class_threshold: np.ndarray
    domain_threshold: np.ndarray
    q_class: float
    q_domain: float


@dataclass(frozen=True)
class Decomposition:
    """Components named by (class, domain): ``cd`` specific/specific, ``ncnd`` generic/generic."""

    z_cd: np.ndarray
    z_cnd: np.ndarray
    z_ncd: np.ndarray
    z_ncnd: np.ndarray

    def total(self) -> np.ndarray:
        return self.z_cd + self.z_cnd + self.z_ncd + self.z_ncnd

    def rows(self, index) -> "Decomposition":
        index = np.asarray(index, dtype=np.int64)
        return Decomposition(self.z_cd[index], self.z_cnd[index], self.z_ncd[index], self.z_ncnd[index])


def _check_pair(z, grads):
    z = np.asarray(z, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if z.shape != grads.shape:
        raise ValueError(f"features {z.shape} and gradients {grads.shape} differ in shape")
    return z, grads


def class_importance(z, grads) -> np.ndarray:
    """Score of each dimension for the ground-truth class logit: ``grads * z``."""
    z, grads = _check_pair(z, grads)
    return grads * z


def domain_importance(z, grads) -> np.ndarray:
    """Same product, with gradients of the ground-truth domain logit."""
    z, grads = _check_pair(z, grads)
    return grads * z


def nearest_rank(q: float, k: int) -> int:
    """1-indexed ascending position ``ceil(q * k)``, clamped to ``[1, k]``.

    The small slack keeps levels like ``0.9 - 0.2`` (which is 0.7000000000000001)
    from rounding up a whole rank.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile level must lie in (0, 1], got {q}")
    if k < 1:
        raise ValueError("empty score row")
    return min(k, max(1, math.ceil(q * k - 1e-9)))


def per_sample_quantile(scores_row, q: float) -> float:
    row = np.asarray(scores_row, dtype=np.float64).reshape(-1)
    if row.size == 0:
        raise ValueError("empty score row")
    return float(np.sort(row)[nearest_rank(q, row.size) - 1])


def build_masks(scores, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Binary mask ``scores > tau`` with tau the row's nearest-rank q-quantile."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("scores must be a (batch, dims) matrix")
    masks, thresholds = kernels.nearest_rank_masks(scores, nearest_rank(q, scores.shape[1]))
    if logger.isEnabledFor(logging.DEBUG):
        ties = int(((scores == thresholds[:, None]).sum(1) > 1).sum())
        if ties:
            logger.debug("%d rows have tied scores at the threshold", ties)
    return masks, thresholds


def compute_masks(class_scores, domain_scores, q_domain: float, q_class: float = CLASS_QUANTILE) -> MaskPair:
    m_c, t_c = build_masks(class_scores, q_class)
    m_d, t_d = build_masks(domain_scores, q_domain)
    return MaskPair(m_c, m_d, t_c, t_d, q_class, q_domain)


def _check_binary(mask, shape, name):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != shape:
        raise ValueError(f"{name} shape {mask.shape} does not match features {shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError(f"{name} must be binary")
    return mask


def component_masks(class_mask, domain_mask) -> dict[str, np.ndarray]:
    """The four 0/1 selectors; they partition every (row, dim) position."""
    m_c = np.asarray(class_mask, dtype=np.float64)
    m_d = np.asarray(domain_mask, dtype=np.float64)
    return {
        "cd": m_c * m_d,
        "cnd": m_c * (1.0 - m_d),
        "ncd": (1.0 - m_c) * m_d,
        "ncnd": (1.0 - m_c) * (1.0 - m_d),
    }


def decompose(z, class_mask, domain_mask) -> Decomposition:
    z = np.asarray(z, dtype=np.float64)
    m_c = _check_binary(class_mask, z.shape, "class mask")
    m_d = _check_binary(domain_mask, z.shape, "domain mask")
    sel = component_masks(m_c, m_d)
    return Decomposition(z * sel["cd"], z * sel["cnd"], z * sel["ncd"], z * sel["ncnd"])


@dataclass(frozen=True)
class ImportanceScores:
    class_scores: np.ndarray
    domain_scores: np.ndarray
    class_grads: np.ndarray
    domain_grads: np.ndarray


def head_grads(params, z, selected, target: str) -> np.ndarray:
    """d logit[b, selected[b]] / d z[b] for the class or domain head, as a constant."""
    z = np.asarray(z, dtype=np.float64)
    graph = ad.Graph()
    zt = graph.param(z)
    heads = params.bind(graph, trainable=())
    return ad.logit_grads_wrt(zt, models.mlp(models.head_layers(heads, target), zt), selected)


def score_features(params, z, classes, domains) -> ImportanceScores:
    """Class and domain scores of ``z`` under the heads in ``params``.

    Each head runs on a fresh graph with ``z`` as its only trainable leaf, so
    the scores are constants with respect to the training graph.
    """
    z = np.asarray(z, dtype=np.float64)
    g_c = head_grads(params, z, classes, "class")
    g_d = head_grads(params, z, domains, "domain")
    return ImportanceScores(class_importance(z, g_c), domain_importance(z, g_d), g_c, g_d)
