"""Cross-domain feature augmentation and the MixStyle / DSU baselines.

Random draws for one XDomainMix batch happen in a fixed order: pairing
uniforms ``(B, 2)``, then lambda1 ``(B,)``, lambda2 ``(B,)`` and the discard
uniforms ``(B,)``. The full set is drawn even when a draw goes unused
(missing partner, ablated component), so streams stay aligned across configs.

MixStyle and DSU work on vector features here: their statistics are taken over
the feature dimension of each sample, and they enter the training graph as a
per-row affine map with constant coefficients.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .decomposition import Decomposition, MaskPair, component_masks, decompose

logger = logging.getLogger(__name__)

P_DISCARD = 0.2
MIXSTYLE_PROB = 0.5
MIXSTYLE_ALPHA = 0.1
DSU_PROB = 0.5
STAT_EPS = 1e-6


class PairingStrategy(str, enum.Enum):
    SAME_AS_I = "same_as_i"
    SAME_CLASS_DIFF_DOMAIN = "same_class_diff_domain"
    DIFF_CLASS_SAME_DOMAIN = "diff_class_same_domain"
    DIFF_CLASS_DIFF_DOMAIN = "diff_class_diff_domain"

    @property
    def code(self) -> int:
        return {
            "same_as_i": kernels.SAME_AS_I,
            "same_class_diff_domain": kernels.SAME_CLASS_DIFF_DOMAIN,
            "diff_class_same_domain": kernels.DIFF_CLASS_SAME_DOMAIN,
            "diff_class_diff_domain": kernels.DIFF_CLASS_DIFF_DOMAIN,
        }[self.value]


@dataclass(frozen=True)
class AugmentationPlan:
    """Per-sample partners (``-1`` when absent), mixing ratios and discard flags."""

    i_index: np.ndarray
    j_index: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    discard: np.ndarray
    strategy: PairingStrategy = PairingStrategy.DIFF_CLASS_DIFF_DOMAIN

    def __len__(self) -> int:
        return len(self.i_index)

    def partners(self) -> tuple[np.ndarray, np.ndarray]:
        """Partner rows with absent partners replaced by the sample itself."""
        own = np.arange(len(self))
        return (np.where(self.i_index >= 0, self.i_index, own),
                np.where(self.j_index >= 0, self.j_index, own))


def pair_samples(classes, domains, strategy=PairingStrategy.DIFF_CLASS_DIFF_DOMAIN,
                 rng: Optional[np.random.Generator] = None) -> AugmentationPlan:
    """Pick ``x_i`` (same class, other domain) and ``x_j`` per strategy, in-batch."""
    strategy = PairingStrategy(strategy)
    classes = np.asarray(classes, dtype=np.int64)
    domains = np.asarray(domains, dtype=np.int64)
    n = len(classes)
    if n < 1 or domains.shape != classes.shape:
        raise ValueError("need at least one sample with matching class/domain vectors")
    rng = np.random.default_rng() if rng is None else rng
    u = rng.random((n, 2))
    i_index, j_index = kernels.pair_indices(classes, domains, u, strategy.code)
    missing_i = int((i_index < 0).sum())
    missing_j = int((j_index < 0).sum())
    if missing_i or missing_j:
        logger.debug("pairing: %d/%d samples without x_i, %d without x_j", missing_i, n, missing_j)
    ones = np.ones(n)
    return AugmentationPlan(i_index, j_index, ones, ones.copy(), np.zeros(n, dtype=bool), strategy)


def draw_plan(classes, domains, rng: np.random.Generator, *,
              strategy=PairingStrategy.DIFF_CLASS_DIFF_DOMAIN, p_discard: float = P_DISCARD,
              mix_cd: bool = True, mix_ncd: bool = True) -> AugmentationPlan:
    """Pairing plus mixing ratios and discard flags for one batch."""
    if not 0.0 <= p_discard <= 1.0:
        raise ValueError("p_discard must lie in [0, 1]")
    plan = pair_samples(classes, domains, strategy, rng)
    n = len(plan)
    lam1 = rng.random(n)
    lam2 = rng.random(n)
    p = rng.random(n)
    lam1 = np.where((plan.i_index >= 0) & mix_cd, lam1, 1.0)
    lam2 = np.where((plan.j_index >= 0) & mix_ncd, lam2, 1.0)
    return replace(plan, lambda1=lam1, lambda2=lam2, discard=p <= p_discard)


def _resolve(decomp_partner: Decomposition, n: int, name: str) -> None:
    if decomp_partner.z_cd.shape[0] != n:
        raise IndexError(f"{name} partner rows do not match the batch")


def mix_components(decomp: Decomposition, decomp_i: Decomposition, decomp_j: Decomposition,
                   plan: AugmentationPlan) -> tuple[np.ndarray, np.ndarray]:
    """Convex mixes of the domain-specific components with the partners' ones.

    ``decomp_i`` / ``decomp_j`` hold the partners' rows aligned with ``decomp``;
    absent partners must carry ``lambda == 1``.
    """
    n = decomp.z_cd.shape[0]
    _resolve(decomp_i, n, "x_i")
    _resolve(decomp_j, n, "x_j")
    lam1 = np.where(plan.i_index >= 0, plan.lambda1, 1.0)[:, None]
    lam2 = np.where(plan.j_index >= 0, plan.lambda2, 1.0)[:, None]
    z_cd = lam1 * decomp.z_cd + (1.0 - lam1) * decomp_i.z_cd
    z_ncd = lam2 * decomp.z_ncd + (1.0 - lam2) * decomp_j.z_ncd
    return z_cd, z_ncd


def recompose(z_cd_mixed, z_ncd_mixed, decomp: Decomposition, plan: AugmentationPlan,
              p_discard: Optional[float] = None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Swap the mixed domain-specific parts back in, dropping ``z_cd`` where discarded.

    Discard flags come from ``plan`` unless both ``p_discard`` and ``rng`` are
    given, in which case one uniform per sample is drawn and compared to
    ``p_discard``.
    """
    discard = plan.discard
    if p_discard is not None and rng is not None:
        if not 0.0 <= p_discard <= 1.0:
            raise ValueError("p_discard must lie in [0, 1]")
        discard = rng.random(len(plan)) <= p_discard
    keep = np.where(discard, 0.0, 1.0)[:, None]
    return keep * z_cd_mixed + z_ncd_mixed + decomp.z_cnd + decomp.z_ncnd


def xdomainmix_array(z, masks: MaskPair, plan: AugmentationPlan) -> np.ndarray:
    """Augmented features for a batch, outside any graph."""
    decomp = decompose(z, masks.class_mask, masks.domain_mask)
    pi, pj = plan.partners()
    z_cd, z_ncd = mix_components(decomp, decomp.rows(pi), decomp.rows(pj), plan)
    return recompose(z_cd, z_ncd, decomp, plan)


def xdomainmix_tensor(z: ad.Tensor, masks: MaskPair, plan: AugmentationPlan) -> ad.Tensor:
    """Augmented features inside the graph of ``z``.

    Masks, ratios and discard flags are constants, so gradients reach ``z``
    through the sample itself and through its partners.
    """
    g = z.graph
    sel = component_masks(masks.class_mask, masks.domain_mask)
    pi, pj = plan.partners()
    lam1 = np.where(plan.i_index >= 0, plan.lambda1, 1.0)[:, None]
    lam2 = np.where(plan.j_index >= 0, plan.lambda2, 1.0)[:, None]
    keep = np.where(plan.discard, 0.0, 1.0)[:, None]

    def c(arr):
        return g.constant(np.broadcast_to(arr, z.shape))

    z_i = ad.take_rows(z, pi)
    z_j = ad.take_rows(z, pj)
    # partner terms reuse the partners' own masks
    cd = ad.add(ad.elementwise_mul(z, c(keep * lam1 * sel["cd"])),
                ad.elementwise_mul(z_i, c(keep * (1.0 - lam1) * sel["cd"][pi])))
    ncd = ad.add(ad.elementwise_mul(z, c(lam2 * sel["ncd"])),
                 ad.elementwise_mul(z_j, c((1.0 - lam2) * sel["ncd"][pj])))
    rest = ad.elementwise_mul(z, c(sel["cnd"] + sel["ncnd"]))
    return ad.add(ad.add(cd, ncd), rest)


def soft_domain_label(lambda1: float, lambda2: float, domain: int, domain_i: int, domain_j: int,
                      num_domains: int, strict: bool = True) -> np.ndarray:
    """Soft target for an augmented feature over the training domains.

    With ``strict=False`` coinciding indices accumulate instead of raising; the
    vector still sums to one.
    """
    idx = (domain, domain_i, domain_j)
    if any(not 0 <= d < num_domains for d in idx):
        raise ValueError(f"domain index out of range [0, {num_domains})")
    if strict and len(set(idx)) != 3:
        raise ValueError(f"domain indices must be distinct, got {idx}")
    label = np.zeros(num_domains)
    label[domain] += (lambda1 + lambda2) / 2.0
    label[domain_i] += (1.0 - lambda1) / 2.0
    label[domain_j] += (1.0 - lambda2) / 2.0
    return label


def soft_domain_labels(plan: AugmentationPlan, domains, num_domains: int) -> np.ndarray:
    domains = np.asarray(domains, dtype=np.int64)
    pi, pj = plan.partners()
    return np.stack([
        soft_domain_label(plan.lambda1[b], plan.lambda2[b], domains[b], domains[pi[b]],
                          domains[pj[b]], num_domains, strict=False)
        for b in range(len(plan))
    ])


# --------------------------------------------------------------------------
# statistic-perturbation baselines
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RowAffine:
    """Per-row map ``z -> scale * z + shift`` (both ``(B, 1)``)."""

    scale: np.ndarray
    shift: np.ndarray

    def apply(self, z) -> np.ndarray:
        return self.scale * np.asarray(z) + self.shift

    def apply_tensor(self, z: ad.Tensor) -> ad.Tensor:
        g = z.graph
        scaled = ad.elementwise_mul(z, g.constant(np.broadcast_to(self.scale, z.shape)))
        return ad.add(scaled, g.constant(np.broadcast_to(self.shift, z.shape)))


def row_stats(z) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    return z.mean(axis=1, keepdims=True), z.std(axis=1, keepdims=True)


def _renormalize(z, new_mu, new_sigma, eps) -> RowAffine:
    mu, sigma = row_stats(z)
    scale = new_sigma / (sigma + eps)
    return RowAffine(scale, new_mu - scale * mu)


def mixstyle_affine(z, perm, lam, eps: float = STAT_EPS) -> RowAffine:
    """Mix each row's statistics with those of row ``perm[b]`` at weight ``lam[b]``."""
    mu, sigma = row_stats(z)
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 1)
    perm = np.asarray(perm, dtype=np.int64)
    return _renormalize(z, lam * mu + (1 - lam) * mu[perm], lam * sigma + (1 - lam) * sigma[perm], eps)


def draw_mixstyle(z, rng: np.random.Generator, prob: float = MIXSTYLE_PROB,
                  alpha: float = MIXSTYLE_ALPHA, eps: float = STAT_EPS) -> Optional[RowAffine]:
    """None when the batch is left alone; draws: apply-uniform, permutation, Beta weights."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] < 2:
        raise ValueError("MixStyle needs at least 2 feature dims")
    if rng.random() > prob:
        return None
    perm = rng.permutation(z.shape[0])
    lam = rng.beta(alpha, alpha, size=z.shape[0])
    return mixstyle_affine(z, perm, lam, eps)


def mixstyle(z, prob: float = MIXSTYLE_PROB, alpha: float = MIXSTYLE_ALPHA,
             rng: Optional[np.random.Generator] = None, eps: float = STAT_EPS) -> np.ndarray:
    rng = np.random.default_rng() if rng is None else rng
    affine = draw_mixstyle(z, rng, prob, alpha, eps)
    return np.asarray(z) if affine is None else affine.apply(z)


def dsu_affine(z, eps_mu, eps_sigma, eps: float = STAT_EPS) -> RowAffine:
    """Shift each row's statistics by ``eps_* x`` the batch spread of those statistics."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] < 2:
        raise ValueError("DSU needs a batch of at least 2 samples")
    mu, sigma = row_stats(z)
    spread_mu = mu.std(ddof=1)
    spread_sigma = sigma.std(ddof=1)
    eps_mu = np.asarray(eps_mu, dtype=np.float64).reshape(-1, 1)
    eps_sigma = np.asarray(eps_sigma, dtype=np.float64).reshape(-1, 1)
    return _renormalize(z, mu + eps_mu * spread_mu, sigma + eps_sigma * spread_sigma, eps)


def draw_dsu(z, rng: np.random.Generator, prob: float = DSU_PROB, eps: float = STAT_EPS) -> Optional[RowAffine]:
    """None when the batch is left alone; draws: apply-uniform, eps_mu, eps_sigma."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] < 2:
        raise ValueError("DSU needs a batch of at least 2 samples")
    if rng.random() > prob:
        return None
    eps_mu = rng.standard_normal(z.shape[0])
    eps_sigma = rng.standard_normal(z.shape[0])
    return dsu_affine(z, eps_mu, eps_sigma, eps)


def dsu(z, prob: float = DSU_PROB, eps: float = STAT_EPS,
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    rng = np.random.default_rng() if rng is None else rng
    affine = draw_dsu(z, rng, prob, eps)
    return np.asarray(z) if affine is None else affine.apply(z)
