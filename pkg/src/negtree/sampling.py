"""Cluster-quantized proposal distributions and exact softmax samplers.

Two sampling routes share the tree index. The descent (rejection) sampler
draws exactly from the softmax by walking the tree with per-node claims
that upper-bound each subtree's unnormalized mass; acceptance tests fire
the first time a representative appears on the walk and a restart option
absorbs the slack, which makes the returned law exactly softmax for any
valid claim choice. Independent Metropolis-Hastings instead runs short
chains against the quantized proposal, with total variation decaying like
exp(-(s-1)/gamma) in the worst-case probability ratio gamma.

Claims default to per-node bounds g(C)*w(C) with g built bottom-up from
measured parent-child distances (FrozenForest.logg); these keep every
restart mass provably nonnegative. The literal per-level inflation
exp(beta*b^level) is available as mode="paper" but can drive restart
masses negative on close siblings, in which case the sampler raises an
internal-invariant error with diagnostics.
"""

from __future__ import annotations

import math

import numpy as np

from ._kernels import walk_batch
from .core import DualEncoder, SoftmaxParams, TargetStore
from .errors import InternalInvariantError, InvalidInputError
from .rng import UniformStream
from .sgtree import SGForest, SGTreeNode, level_clustering

__all__ = [
    "select_level",
    "ClusterProposal",
    "proposal_from_clustering",
    "find_clustering",
    "mh_sample",
    "RejectionSampler",
    "rejection_sample",
    "topk_hard_negatives",
]


def select_level(gamma: float, p: SoftmaxParams, base: float) -> int:
    """Largest integer level with b^level <= log(gamma) / (2 beta)."""
    if gamma <= 1.0:
        raise InvalidInputError(f"gamma must exceed 1, got {gamma}")
    if base <= 1.0:
        raise InvalidInputError(f"base must exceed 1, got {base}")
    if p.beta <= 0.0:
        raise InvalidInputError("beta must be positive to select a level")
    thr = math.log(gamma) / (2.0 * p.beta)
    lvl = int(math.floor(math.log(thr, base)))
    while base ** lvl > thr:
        lvl -= 1
    while base ** (lvl + 1) <= thr:
        lvl += 1
    return lvl


class ClusterProposal:
    """Q(y | x; C): pick a cluster by |C| * exp(beta <q, rep>), then a
    member uniformly. Covers the whole corpus unless built truncated."""

    def __init__(self, nodes: list[SGTreeNode], q_emb: np.ndarray,
                 log_weights: np.ndarray, n_targets: int, covered: bool):
        self.nodes = nodes
        self.query = q_emb
        self.log_weights = log_weights
        self.n_targets = n_targets
        self.covered = covered
        self.counts = np.array([nd.count for nd in nodes], dtype=np.int64)
        self.rep_ids = np.array([nd.rep for nd in nodes], dtype=np.int64)
        m = log_weights.max()
        self.weights = np.exp(log_weights)
        self.z_hat = float(self.weights.sum())
        self.log_z_hat = float(m + np.log(np.exp(log_weights - m).sum()))
        probs = np.exp(log_weights - self.log_z_hat)
        self._cdf = np.cumsum(probs / probs.sum())
        self._cdf[-1] = 1.0
        self._members: np.ndarray | None = None
        self._offsets: np.ndarray | None = None
        self._logq: np.ndarray | None = None

    def __len__(self):
        return len(self.nodes)

    def _materialize_members(self):
        if self._members is not None:
            return
        chunks = [np.asarray(nd.leaf_targets(), dtype=np.int64)
                  for nd in self.nodes]
        self._offsets = np.zeros(len(chunks) + 1, dtype=np.int64)
        self._offsets[1:] = np.cumsum([len(c) for c in chunks])
        self._members = (np.concatenate(chunks) if chunks
                         else np.empty(0, dtype=np.int64))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n independent draws from Q."""
        self._materialize_members()
        ci = np.searchsorted(self._cdf, rng.random(n), side="right")
        ci = np.minimum(ci, len(self.nodes) - 1)
        within = np.floor(rng.random(n) * self.counts[ci]).astype(np.int64)
        within = np.minimum(within, self.counts[ci] - 1)
        return self._members[self._offsets[ci] + within]

    def log_q_unnorm(self, target_ids: np.ndarray) -> np.ndarray:
        """log Q(y) up to the shared -log(z_hat) constant."""
        if self._logq is None:
            self._materialize_members()
            arr = np.full(self.n_targets, -np.inf)
            per_member = self.log_weights - np.log(self.counts)
            for i in range(len(self.nodes)):
                arr[self._members[self._offsets[i]:self._offsets[i + 1]]] = per_member[i]
            self._logq = arr
        return self._logq[target_ids]

    def probs_over_targets(self) -> np.ndarray:
        """Dense Q over the corpus (zero outside covered targets)."""
        logq = self.log_q_unnorm(np.arange(self.n_targets))
        out = np.zeros(self.n_targets)
        covered = np.isfinite(logq)
        out[covered] = np.exp(logq[covered] - self.log_z_hat)
        return out

    def measured_gamma(self, exact_probs: np.ndarray) -> float:
        """max_y P(y)/Q(y) over the corpus; inf if Q misses P mass."""
        q = self.probs_over_targets()
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(exact_probs > 0, exact_probs / q, 0.0)
        return float(np.max(ratio))


def proposal_from_clustering(x, clustering: list[SGTreeNode],
                             store: TargetStore, enc: DualEncoder,
                             p: SoftmaxParams, q_emb: np.ndarray | None = None,
                             sims: np.ndarray | None = None,
                             check_partition: bool = False) -> ClusterProposal:
    """Build Q from a clustering; cost O(|C|) inner products."""
    if not clustering:
        raise InvalidInputError("clustering must be non-empty")
    if q_emb is None:
        q_emb = enc.encode_queries(x)[0]
    rep_ids = np.array([nd.rep for nd in clustering], dtype=np.int64)
    counts = np.array([nd.count for nd in clustering], dtype=np.int64)
    if sims is None:
        sims = store.require_full()[rep_ids] @ q_emb
    covered = int(counts.sum()) == len(store)
    if check_partition and not covered:
        raise InvalidInputError("clustering does not partition the corpus")
    logw = np.log(counts) + p.beta * np.asarray(sims, dtype=np.float64)
    return ClusterProposal(list(clustering), q_emb, logw, len(store), covered)


def find_clustering(forest: SGForest, x, gamma: float, m: int,
                    enc: DualEncoder | None, p: SoftmaxParams,
                    max_frontier: int | None = None,
                    q_emb: np.ndarray | None = None,
                    topk_clusters: int | None = None,
                    start_level: int | None = None) -> list[SGTreeNode]:
    """Adaptive clustering search: descend from the gamma-selected level to
    level m, emitting children too far from the query to matter and keeping
    the near frontier.

    A child F at parent level k is emitted once dist(q, rep(F)) > b^k + b^m;
    with the builder's radius guarantee its members are all farther than
    b^m from the query. The result (emitted set plus the level-m frontier)
    keeps max_y P/Q <= gamma when the frontier cap never binds.
    """
    lvl = select_level(gamma, p, forest.base) if start_level is None else start_level
    if m > lvl:
        raise InvalidInputError(f"deepest level m={m} above start level {lvl}")
    if max_frontier is not None and max_frontier < 1:
        raise InvalidInputError("max_frontier must be at least 1")
    if q_emb is None:
        q_emb = enc.encode_queries(x)[0]
    metric = forest.metric
    qvec = metric.query_vec(q_emb)
    b = forest.base

    out: list[SGTreeNode] = []
    frontier = level_clustering(forest, lvl)
    for k in range(lvl, m, -1):
        children: list[SGTreeNode] = []
        for node in frontier:
            if node.children:
                children.extend(node.children)
            else:
                children.append(node)  # leaf stands for its implicit chain
        reps = [c.rep for c in children]
        dists = metric.query_to_targets(qvec, reps)
        thr = b ** k + b ** m
        kept: list[tuple[SGTreeNode, float]] = []
        for c, dist in zip(children, dists):
            if dist > thr:
                out.append(c)
            else:
                kept.append((c, float(dist)))
        if max_frontier is not None and len(kept) > max_frontier:
            kept.sort(key=lambda cd: (cd[1], cd[0].rep))
            out.extend(c for c, _ in kept[max_frontier:])
            kept = kept[:max_frontier]
        frontier = [c for c, _ in kept]
    out.extend(frontier)
    if topk_clusters is not None and len(out) > topk_clusters:
        reps = [c.rep for c in out]
        dists = metric.query_to_targets(qvec, reps)
        order = sorted(range(len(out)), key=lambda i: (dists[i], out[i].rep))
        out = [out[i] for i in order[:topk_clusters]]
    return out


def mh_sample(proposal: ClusterProposal, store: TargetStore,
              enc: DualEncoder, p: SoftmaxParams, s: int, k: int,
              rng: np.random.Generator, diag: dict | None = None,
              debug_break_acceptance: bool = False) -> np.ndarray:
    """Final states of k independent s-state Metropolis-Hastings chains.

    Chains start from a proposal draw; each of the remaining s-1 steps
    proposes independently from Q and accepts with
    min(1, P~(y') Q(y) / (P~(y) Q(y'))), so Z cancels.
    ``debug_break_acceptance`` drops the proposal correction (a negative
    control for the statistical test suite).
    """
    if s < 1:
        raise InvalidInputError(f"chain length must be >= 1, got {s}")
    if k < 1:
        raise InvalidInputError(f"need at least one chain, got {k}")
    emb = store.require_full()
    q = proposal.query
    states = proposal.sample(k, rng)
    cur_lp = p.beta * (emb[states] @ q)
    cur_lq = proposal.log_q_unnorm(states)
    accepted = 0
    for _ in range(s - 1):
        props = proposal.sample(k, rng)
        prop_lp = p.beta * (emb[props] @ q)
        prop_lq = proposal.log_q_unnorm(props)
        logr = prop_lp - cur_lp
        if not debug_break_acceptance:
            logr = logr + (cur_lq - prop_lq)
        take = np.log(rng.random(k)) < logr
        states[take] = props[take]
        cur_lp[take] = prop_lp[take]
        cur_lq[take] = prop_lq[take]
        accepted += int(take.sum())
    if diag is not None:
        diag["transitions"] = (s - 1) * k
        diag["accepted"] = accepted
        diag["acceptance_rate"] = accepted / max(1, (s - 1) * k)
    return states


class RejectionSampler:
    """Exact softmax draws for one query via the tree-descent walk.

    Per-node tables are cached lazily across draws, and the top-level
    distribution is computed once (restarts re-enter it without
    recomputation). ``mode`` picks the claim family: "exact-bound"
    (default, provably valid) or "paper" (literal per-level inflation,
    may raise InternalInvariantError on negative restart mass).
    """

    def __init__(self, forest: SGForest, x=None, store: TargetStore | None = None,
                 enc: DualEncoder | None = None, p: SoftmaxParams | None = None,
                 start_level: int | None = None,
                 q_emb: np.ndarray | None = None, mode: str = "exact-bound"):
        if mode not in ("exact-bound", "paper"):
            raise InvalidInputError(f"unknown claim mode {mode!r}")
        if p is None:
            raise InvalidInputError("softmax params required")
        self.forest = forest
        self.p = p
        self.mode = mode
        if q_emb is None:
            q_emb = enc.encode_queries(x)[0]
        self.q = np.ascontiguousarray(q_emb, dtype=np.float64)
        self.emb = np.ascontiguousarray(store.require_full(), dtype=np.float64)
        fz = forest.frozen()
        self._fz = fz
        if start_level is None:
            start_level = forest.max_level()
        self.start_level = start_level

        slice_nodes = level_clustering(forest, start_level)
        ids = np.array([fz.node_index_of(nd) for nd in slice_nodes],
                       dtype=np.int64)
        beta = p.beta
        if mode == "exact-bound":
            self.logmult = fz.logg(beta)
            top_logmult = self.logmult[ids]
        else:
            self.logmult = fz.paper_logmult(beta)
            eff = np.minimum(fz.level[ids], start_level).astype(np.float64)
            top_logmult = beta * forest.base ** eff + np.log(fz.count[ids])
        logw_top = beta * (self.emb[fz.rep[ids]] @ self.q)
        logclaim = top_logmult + logw_top
        mx = logclaim.max()
        w = np.exp(logclaim - mx)
        cdf = np.cumsum(w / w.sum())
        cdf[-1] = 1.0
        self.top_ids = ids
        self.top_cdf = cdf
        self.top_pi = np.exp(-top_logmult)
        self.tested = fz.tested.copy()
        self.tested[ids] = 1
        n = fz.n_nodes
        self._logw = np.zeros(n)
        self._logw_ok = np.zeros(n, dtype=np.uint8)
        self._cdf_flat = np.zeros(len(fz.child_ids))
        self._node_ok = np.zeros(n, dtype=np.uint8)
        self._node_bad = np.zeros(n, dtype=np.uint8)
        self.counters = np.zeros(4, dtype=np.int64)

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        us = UniformStream(rng)
        fz = self._fz
        status = walk_batch(
            n, out, self.counters,
            us.buf, us.pos, us.refill,
            self.q, self.emb, self.p.beta,
            self.top_ids, self.top_cdf, self.top_pi,
            fz.rep, fz.child_start, fz.child_count, fz.child_ids,
            self.tested, self.logmult,
            self._logw, self._logw_ok, self._cdf_flat,
            self._node_ok, self._node_bad)
        if status:
            self._raise_bad_node(status - 1)
        return out

    def sample(self, rng: np.random.Generator) -> int:
        return int(self.sample_many(1, rng)[0])

    def _raise_bad_node(self, node: int):
        fz = self._fz
        cs, cc = int(fz.child_start[node]), int(fz.child_count[node])
        kids = fz.child_ids[cs:cs + cc]
        pi = math.exp(-self.logmult[node])
        logz = self.logmult[node] + self.p.beta * float(self.emb[fz.rep[node]] @ self.q)
        if self.tested[node]:
            logz += math.log1p(-pi) if pi < 1.0 else -math.inf
        total = float(np.exp(self.logmult[kids]
                             + self.p.beta * (self.emb[fz.rep[kids]] @ self.q)
                             - logz).sum())
        raise InternalInvariantError(
            "negative restart mass in descent sampler "
            f"(mode={self.mode!r}): children claim {total:.6g} of the node's "
            "remaining budget",
            diagnostics={
                "node": node,
                "level": int(fz.level[node]),
                "rep": int(fz.rep[node]),
                "count": int(fz.count[node]),
                "children": cc,
                "children_mass": total,
                "pi": pi,
                "mode": self.mode,
            })

    @property
    def attempts(self) -> int:
        return int(self.counters[0])

    @property
    def node_visits(self) -> int:
        return int(self.counters[1])

    @property
    def restarts(self) -> int:
        return int(self.counters[2])


def rejection_sample(forest: SGForest, x, start_level: int,
                     store: TargetStore, enc: DualEncoder, p: SoftmaxParams,
                     rng: np.random.Generator, mode: str = "exact-bound") -> int:
    """One exact softmax draw (builds a sampler; loop via RejectionSampler)."""
    sampler = RejectionSampler(forest, x, store, enc, p,
                               start_level=start_level, mode=mode)
    return sampler.sample(rng)


def topk_hard_negatives(candidates, k: int, exclude, store: TargetStore,
                        enc: DualEncoder | None, p: SoftmaxParams,
                        q_emb: np.ndarray | None = None, x=None,
                        proposal: ClusterProposal | None = None,
                        rng: np.random.Generator | None = None,
                        max_pad_rounds: int = 64) -> np.ndarray:
    """Deduplicated top-k candidates by logit, excluding the positives.

    Falls back to proposal draws (then to the proposal's own ordering) to
    pad when deduplication leaves fewer than k; with a corpus smaller than
    k+1 it returns everything available.
    """
    if q_emb is None:
        q_emb = enc.encode_queries(x)[0] if proposal is None else proposal.query
    exclude = set(int(e) for e in np.atleast_1d(exclude))
    pool = {int(c) for c in np.asarray(candidates, dtype=np.int64).ravel()}
    pool -= exclude
    limit = min(k, len(store) - len(exclude))
    if len(pool) < limit and proposal is not None and rng is not None:
        for _ in range(max_pad_rounds):
            if len(pool) >= limit:
                break
            pool.update(int(t) for t in proposal.sample(k, rng)
                        if int(t) not in exclude)
        if len(pool) < limit:
            # deterministic completion from the proposal's covered targets
            order = np.argsort(-proposal.log_weights, kind="stable")
            for ci in order:
                nd = proposal.nodes[ci]
                for t in sorted(nd.leaf_targets()):
                    if t not in exclude:
                        pool.add(t)
                if len(pool) >= limit:
                    break
    ids = np.fromiter(pool, dtype=np.int64)
    if ids.size == 0:
        return ids
    scores = store.require_full()[ids] @ q_emb
    order = np.lexsort((ids, -scores))
    return ids[order[:limit]]
