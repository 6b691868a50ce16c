"""Pure-Python/numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable or disabled.
Integer-valued results (masks, pairings) match the compiled versions exactly.
"""

import numpy as np

# strategy codes shared with _kernels.pyx
SAME_AS_I = 0
SAME_CLASS_DIFF_DOMAIN = 1
DIFF_CLASS_SAME_DOMAIN = 2
DIFF_CLASS_DIFF_DOMAIN = 3


def nearest_rank_masks(scores, rank):
    """Per-row threshold at ascending position ``rank`` (1-indexed) and strict mask."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    thresholds = np.sort(scores, axis=1)[:, rank - 1].copy()
    masks = (scores > thresholds[:, None]).astype(np.float64)
    return masks, thresholds


def _choose(candidates, u):
    if not candidates:
        return -1
    k = min(int(u * len(candidates)), len(candidates) - 1)
    return candidates[k]


def pair_indices(classes, domains, u, strategy):
    classes = np.asarray(classes, dtype=np.int64)
    domains = np.asarray(domains, dtype=np.int64)
    n = classes.shape[0]
    i_index = np.full(n, -1, dtype=np.int64)
    j_index = np.full(n, -1, dtype=np.int64)
    for b in range(n):
        cb, db = classes[b], domains[b]
        same_cls = [k for k in range(n) if classes[k] == cb and domains[k] != db]
        ib = _choose(same_cls, u[b, 0])
        i_index[b] = ib
        if strategy == SAME_AS_I:
            j_index[b] = ib
            continue
        if strategy == SAME_CLASS_DIFF_DOMAIN:
            cands = [k for k in same_cls if k != ib]
        elif strategy == DIFF_CLASS_SAME_DOMAIN:
            cands = [k for k in range(n) if classes[k] != cb and domains[k] == db]
        elif strategy == DIFF_CLASS_DIFF_DOMAIN:
            cands = [k for k in range(n) if classes[k] != cb and domains[k] != db]
        else:
            raise ValueError(f"unknown strategy code {strategy}")
        j_index[b] = _choose(cands, u[b, 1])
    return i_index, j_index


def _sq_dists(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def gaussian_kernel_means(a, b, bandwidth):
    """(mean k(A,A), mean k(B,B), mean k(A,B)) for the Gaussian kernel."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    c = -0.5 / (bandwidth * bandwidth)
    kaa = np.exp(c * _sq_dists(a, a)).mean()
    kbb = np.exp(c * _sq_dists(b, b)).mean()
    kab = np.exp(c * _sq_dists(a, b)).mean()
    return float(kaa), float(kbb), float(kab)


def median_pairwise_distance(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, k=1)
    return float(np.median(np.sqrt(_sq_dists(x, x)[iu])))
