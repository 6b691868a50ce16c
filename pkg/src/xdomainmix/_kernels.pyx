# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: per-row nearest-rank masks, in-batch pairing, Gaussian MMD sums."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()

DEF SAME_AS_I = 0
DEF SAME_CLASS_DIFF_DOMAIN = 1
DEF DIFF_CLASS_SAME_DOMAIN = 2
DEF DIFF_CLASS_DIFF_DOMAIN = 3


cdef int _cmp_double(const void* a, const void* b) noexcept nogil:
    cdef double x = (<const double*>a)[0]
    cdef double y = (<const double*>b)[0]
    if x < y:
        return -1
    if x > y:
        return 1
    return 0


def nearest_rank_masks(scores, Py_ssize_t rank):
    cdef double[:, ::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0], k = s.shape[1], r, c
    masks_arr = np.empty((n, k), dtype=np.float64)
    thr_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] m = masks_arr
    cdef double[::1] thr = thr_arr
    cdef double* buf = <double*>malloc(k * sizeof(double))
    cdef double t
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for r in range(n):
                for c in range(k):
                    buf[c] = s[r, c]
                qsort(buf, k, sizeof(double), _cmp_double)
                t = buf[rank - 1]
                thr[r] = t
                for c in range(k):
                    m[r, c] = 1.0 if s[r, c] > t else 0.0
    finally:
        free(buf)
    return masks_arr, thr_arr


cdef inline bint _is_candidate(int strategy, long cb, long db, long ck, long dk) noexcept nogil:
    if strategy == DIFF_CLASS_SAME_DOMAIN:
        return ck != cb and dk == db
    if strategy == DIFF_CLASS_DIFF_DOMAIN:
        return ck != cb and dk != db
    # same class, different domain
    return ck == cb and dk != db


cdef long _pick(long[::1] cls, long[::1] dom, Py_ssize_t b, int strategy,
                double u, long exclude) noexcept nogil:
    cdef Py_ssize_t n = cls.shape[0], k
    cdef long count = 0, target, seen = 0
    for k in range(n):
        if k != exclude and _is_candidate(strategy, cls[b], dom[b], cls[k], dom[k]):
            count += 1
    if count == 0:
        return -1
    target = <long>(u * count)
    if target > count - 1:
        target = count - 1
    for k in range(n):
        if k != exclude and _is_candidate(strategy, cls[b], dom[b], cls[k], dom[k]):
            if seen == target:
                return k
            seen += 1
    return -1


def pair_indices(classes, domains, u, int strategy):
    if strategy < 0 or strategy > 3:
        raise ValueError(f"unknown strategy code {strategy}")
    cdef long[::1] cls = np.ascontiguousarray(classes, dtype=np.int64)
    cdef long[::1] dom = np.ascontiguousarray(domains, dtype=np.int64)
    cdef double[:, ::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t n = cls.shape[0], b
    i_arr = np.full(n, -1, dtype=np.int64)
    j_arr = np.full(n, -1, dtype=np.int64)
    cdef long[::1] ii = i_arr
    cdef long[::1] jj = j_arr
    cdef long ib
    with nogil:
        for b in range(n):
            ib = _pick(cls, dom, b, SAME_CLASS_DIFF_DOMAIN, uu[b, 0], -1)
            ii[b] = ib
            if strategy == SAME_AS_I:
                jj[b] = ib
            elif strategy == SAME_CLASS_DIFF_DOMAIN:
                jj[b] = _pick(cls, dom, b, SAME_CLASS_DIFF_DOMAIN, uu[b, 1], ib)
            else:
                jj[b] = _pick(cls, dom, b, strategy, uu[b, 1], -1)
    return i_arr, j_arr


cdef double _kernel_mean(double[:, ::1] a, double[:, ::1] b, double c) noexcept nogil:
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], d = a.shape[1], i, j, k
    cdef double total = 0.0, row, diff, sq
    for i in range(na):
        row = 0.0
        for j in range(nb):
            sq = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                sq = sq + diff * diff
            row = row + exp(c * sq)
        total = total + row
    return total / (<double>na * <double>nb)


def gaussian_kernel_means(a, b, double bandwidth):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double c = -0.5 / (bandwidth * bandwidth)
    cdef double kaa, kbb, kab
    with nogil:
        kaa = _kernel_mean(av, av, c)
        kbb = _kernel_mean(bv, bv, c)
        kab = _kernel_mean(av, bv, c)
    return kaa, kbb, kab


def median_pairwise_distance(x):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], i, j, k, p = 0
    if n < 2:
        return 0.0
    out = np.empty(n * (n - 1) // 2, dtype=np.float64)
    cdef double[::1] o = out
    cdef double sq, diff
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                sq = 0.0
                for k in range(d):
                    diff = xv[i, k] - xv[j, k]
                    sq = sq + diff * diff
                o[p] = sqrt(sq)
                p += 1
    return float(np.median(out))
