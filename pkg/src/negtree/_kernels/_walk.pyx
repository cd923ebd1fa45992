# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of walk_py.walk_batch; see that module for semantics."""

from libc.math cimport exp, log1p

import numpy as np


cdef inline Py_ssize_t _bisect_right(double[::1] arr, Py_ssize_t lo,
                                     Py_ssize_t hi, double u) nogil:
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) // 2
        if u < arr[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def walk_batch(long n_draws, long[::1] out, long[::1] counters,
               double[::1] ubuf, long[::1] upos, refill,
               double[::1] q, double[:, ::1] emb, double beta,
               long[::1] top_ids, double[::1] top_cdf, double[::1] top_pi,
               long[::1] rep, long[::1] child_start, long[::1] child_count,
               long[::1] child_ids, unsigned char[::1] tested,
               double[::1] logmult,
               double[::1] logw, unsigned char[::1] logw_ok,
               double[::1] cdf_flat, unsigned char[::1] node_ok,
               unsigned char[::1] node_bad):
    cdef Py_ssize_t block = ubuf.shape[0]
    cdef Py_ssize_t n_top = top_ids.shape[0]
    cdef Py_ssize_t d = q.shape[0]
    cdef long done = 0
    cdef Py_ssize_t i, j, k, cs, nch, node, child, r
    cdef double u, pi, logz, total, acc
    cdef bint restart

    while done < n_draws:
        counters[0] += 1
        # -- next_u inlined (refill is a rare Python callback)
        i = upos[0]
        if i >= block:
            refill(); i = 0
        upos[0] = i + 1
        u = ubuf[i]

        j = _bisect_right(top_cdf, 0, n_top, u)
        if j >= n_top:
            j = n_top - 1
        node = top_ids[j]

        i = upos[0]
        if i >= block:
            refill(); i = 0
        upos[0] = i + 1
        if ubuf[i] < top_pi[j]:
            out[done] = rep[node]
            done += 1
            continue

        restart = False
        while True:
            counters[1] += 1
            if not node_ok[node]:
                pi = exp(-logmult[node])
                if pi >= 1.0:
                    node_bad[node] = 1
                    node_ok[node] = 1
                else:
                    if not logw_ok[node]:
                        acc = 0.0
                        r = rep[node]
                        for k in range(d):
                            acc += emb[r, k] * q[k]
                        logw[node] = beta * acc
                        logw_ok[node] = 1
                    logz = logmult[node] + logw[node]
                    if tested[node]:
                        logz += log1p(-pi)
                    cs = child_start[node]
                    total = 0.0
                    for j in range(child_count[node]):
                        child = child_ids[cs + j]
                        if not logw_ok[child]:
                            acc = 0.0
                            r = rep[child]
                            for k in range(d):
                                acc += emb[r, k] * q[k]
                            logw[child] = beta * acc
                            logw_ok[child] = 1
                        total += exp(logmult[child] + logw[child] - logz)
                        cdf_flat[cs + j] = total
                    if total > 1.0 + 1e-9:
                        node_bad[node] = 1
                    node_ok[node] = 1
            if node_bad[node]:
                return 1 + node
            nch = child_count[node]
            if nch == 0:
                restart = True
                break
            cs = child_start[node]
            i = upos[0]
            if i >= block:
                refill(); i = 0
            upos[0] = i + 1
            u = ubuf[i]
            k = _bisect_right(cdf_flat, cs, cs + nch, u) - cs
            if k >= nch:
                restart = True
                break
            child = child_ids[cs + k]
            if tested[child]:
                i = upos[0]
                if i >= block:
                    refill(); i = 0
                upos[0] = i + 1
                if ubuf[i] < exp(-logmult[child]):
                    out[done] = rep[child]
                    done += 1
                    break
            node = child
        if restart:
            counters[2] += 1
    return 0
