"""Pure-Python twin of the compiled tree-descent walk kernel.

Semantics are pinned by this module; the Cython version must consume the
uniform stream identically. See sampling.RejectionSampler for the math.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["walk_batch"]


def walk_batch(n_draws, out, counters,
               ubuf, upos, refill,
               q, emb, beta,
               top_ids, top_cdf, top_pi,
               rep, child_start, child_count, child_ids, tested, logmult,
               logw, logw_ok, cdf_flat, node_ok, node_bad):
    """Draw ``n_draws`` targets; returns 0 or 1 + index of an invalid node.

    Tables (per-node child cdfs, log-weights) are computed lazily on first
    visit and cached in the passed arrays, so repeated draws for one query
    only pay for the nodes they actually touch.
    """
    block = len(ubuf)

    def next_u():
        i = upos[0]
        if i >= block:
            refill()
            i = 0
        upos[0] = i + 1
        return ubuf[i]

    def node_logw(i):
        if not logw_ok[i]:
            logw[i] = beta * float(emb[rep[i]] @ q)
            logw_ok[i] = 1
        return logw[i]

    def ensure_tables(i):
        if node_ok[i]:
            return
        pi = math.exp(-logmult[i])
        if pi >= 1.0:
            node_bad[i] = 1
            node_ok[i] = 1
            return
        logz = logmult[i] + node_logw(i)
        if tested[i]:
            logz += math.log1p(-pi)
        cs = child_start[i]
        total = 0.0
        for k in range(child_count[i]):
            c = child_ids[cs + k]
            total += math.exp(logmult[c] + node_logw(c) - logz)
            cdf_flat[cs + k] = total
        if total > 1.0 + 1e-9:
            node_bad[i] = 1
        node_ok[i] = 1

    n_top = len(top_ids)
    done = 0
    while done < n_draws:
        counters[0] += 1  # attempts
        u = next_u()
        j = int(np.searchsorted(top_cdf, u, side="right"))
        if j >= n_top:
            j = n_top - 1
        node = int(top_ids[j])
        if next_u() < top_pi[j]:
            out[done] = rep[node]
            done += 1
            continue
        restart = False
        while True:
            counters[1] += 1  # node visits
            ensure_tables(node)
            if node_bad[node]:
                return 1 + node
            nch = int(child_count[node])
            if nch == 0:
                restart = True
                break
            cs = int(child_start[node])
            u = next_u()
            seg = cdf_flat[cs:cs + nch]
            k = int(np.searchsorted(seg, u, side="right"))
            if k >= nch:
                restart = True
                break
            child = int(child_ids[cs + k])
            if tested[child]:
                if next_u() < math.exp(-logmult[child]):
                    out[done] = rep[child]
                    done += 1
                    break
            node = child
        if restart:
            counters[2] += 1
    return 0
