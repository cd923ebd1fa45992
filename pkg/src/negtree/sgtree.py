"""Level-wise hierarchical clustering index over target embeddings.

Trees keep the classic invariants: nesting (every internal node has a
self-child carrying its representative), covering (children within b^level
of the parent representative), and sibling separation (children at least
b^(level-1) apart). Separation is only enforced among siblings, which is
what makes in-place subtree repair possible.

Construction is greedy sequential insertion: descend from the root into the
nearest child whose covering ball contains the point; when no child
qualifies, attach the point as a new sibling. Because every point descends
only through balls that contain it, each node's descendants all lie within
b^level of its representative, a radius guarantee the samplers rely on.
Exact duplicate embeddings chain under the first occurrence and are exempt
from separation (their pairwise distance is zero).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from . import binio

__all__ = [
    "SGTreeNode",
    "SGTree",
    "SGForest",
    "EuclideanMetric",
    "build_forest",
    "verify_invariants",
    "level_clustering",
    "knn",
    "FrozenForest",
    "serialize_forest",
    "deserialize_forest",
]

_REL_TOL = 1e-9
_STAT_TOL = 1e-4  # cached stats are stored as f32 in snapshots


class EuclideanMetric:
    """Euclidean distance on the store's cached full-dim embeddings."""

    name = "euclidean"

    def __init__(self, store):
        self.store = store

    @property
    def emb(self):
        return self.store.require_full()

    def pair(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        d = self.emb[i] - self.emb[j]
        return float(np.sqrt(d @ d))

    def to_targets(self, i: int, idx) -> np.ndarray:
        """Distances from target i to the targets in idx."""
        d = self.emb[np.asarray(idx, dtype=np.int64)] - self.emb[i]
        out = np.sqrt(np.einsum("ij,ij->i", d, d))
        out[np.asarray(idx) == i] = 0.0
        return out

    def query_vec(self, q_full: np.ndarray) -> np.ndarray:
        return np.asarray(q_full, dtype=np.float64)

    def query_to_targets(self, qvec: np.ndarray, idx) -> np.ndarray:
        d = self.emb[np.asarray(idx, dtype=np.int64)] - qvec
        return np.sqrt(np.einsum("ij,ij->i", d, d))


class SGTreeNode:
    """One cluster: a representative target plus nested child clusters.

    maxd is the distance from the representative to its farthest descendant
    target; mind is the smallest nonzero pairwise distance among children
    representatives (inf with fewer than two children). Exact-duplicate
    pairs (distance zero) are excluded from mind so the separation checks
    stay meaningful for corpora with repeated embeddings.
    """

    __slots__ = ("rep", "level", "children", "count", "maxd", "mind")

    def __init__(self, rep: int, level: int):
        self.rep = rep
        self.level = level
        self.children: list[SGTreeNode] = []
        self.count = 1
        self.maxd = 0.0
        self.mind = math.inf

    def is_leaf(self) -> bool:
        return not self.children

    def iter_nodes(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children)

    def leaf_targets(self) -> list[int]:
        out = []
        for node in self.iter_nodes():
            if node.is_leaf():
                out.append(node.rep)
        return out

    def __repr__(self):
        return (f"SGTreeNode(rep={self.rep}, level={self.level}, "
                f"count={self.count}, children={len(self.children)})")


class SGTree:
    """A single tree over a subset of the corpus."""

    def __init__(self, base: float, metric):
        self.base = base
        self.metric = metric
        self.root: SGTreeNode | None = None

    def insert(self, idx: int, root_level_hint: int) -> None:
        if self.root is None:
            self.root = SGTreeNode(idx, root_level_hint)
            return
        d_root = self.metric.pair(idx, self.root.rep)
        if d_root > self.base ** self.root.level:
            self._raise_root(d_root)
        self._insert_under(self.root, idx, d_root)

    def _raise_root(self, d_new: float) -> None:
        # Materialize the root's self-chain up to a level that covers d_new.
        new_level = int(math.ceil(math.log(d_new, self.base)))
        old = self.root
        node = old
        for lvl in range(old.level + 1, new_level + 1):
            parent = SGTreeNode(old.rep, lvl)
            parent.children = [node]
            parent.count = node.count
            node = parent
        self.root = node

    def _insert_under(self, node: SGTreeNode, idx: int, d_node: float) -> None:
        """Insert idx into node's subtree; precondition d_node <= b^node.level."""
        b = self.base
        while True:
            node.count += 1
            if node.is_leaf():
                self._extend_leaf(node, idx, d_node)
                return
            child_lvl = node.level - 1
            reps = [c.rep for c in node.children]
            dists = self.metric.to_targets(idx, reps)
            radius = b ** child_lvl
            inside = dists <= radius
            if inside.any():
                # nearest covering child; ties to lowest representative index
                cand = np.flatnonzero(inside)
                order = sorted(cand, key=lambda i: (dists[i], reps[i]))
                pick = order[0]
                node = node.children[pick]
                d_node = float(dists[pick])
                continue
            # no covering child: new sibling, separation holds since all
            # children are > b^(level-1) away
            node.children.append(SGTreeNode(idx, child_lvl))
            return

    def _extend_leaf(self, leaf: SGTreeNode, idx: int, d: float) -> None:
        b = self.base
        if d == 0.0:
            # duplicate embedding: chain under the first occurrence
            attach = leaf.level - 1
        else:
            attach = min(int(math.floor(math.log(d, b))), leaf.level - 1)
            while b ** attach > d:  # float-edge correction
                attach -= 1
            while b ** (attach + 1) <= d and attach + 1 <= leaf.level - 1:
                attach += 1
        # self-chain from the leaf down to attach+1, then the two siblings
        node = leaf
        total = leaf.count  # already includes the new point
        for lvl in range(leaf.level - 1, attach, -1):
            chain = SGTreeNode(leaf.rep, lvl)
            chain.count = total
            node.children = [chain]
            node = chain
        self_child = SGTreeNode(leaf.rep, attach)
        self_child.count = total - 1
        new_child = SGTreeNode(idx, attach)
        node.children = [self_child, new_child]


class SGForest:
    """A forest of SG trees partitioning the corpus by index modulo size."""

    def __init__(self, trees: list[SGTree], base: float, metric, n_targets: int):
        self.trees = trees
        self.base = base
        self.metric = metric
        self.n_targets = n_targets
        self.version = 0
        self._frozen: FrozenForest | None = None

    @property
    def roots(self) -> list[SGTreeNode]:
        return [t.root for t in self.trees if t.root is not None]

    def iter_nodes(self):
        for root in self.roots:
            yield from root.iter_nodes()

    def tree_of(self, idx: int) -> SGTree:
        return self.trees[idx % len(self.trees)]

    def min_level(self) -> int:
        return min(n.level for n in self.iter_nodes())

    def max_level(self) -> int:
        return max(r.level for r in self.roots)

    def invalidate(self) -> None:
        self.version += 1
        self._frozen = None

    def frozen(self) -> "FrozenForest":
        if self._frozen is None:
            self._frozen = FrozenForest(self)
        return self._frozen


def _estimate_root_level(metric, indices: np.ndarray, base: float,
                         n_pairs: int = 1024) -> int:
    """ceil(log_b of max pairwise distance) estimated from sampled pairs."""
    rng = np.random.default_rng(0)
    n = len(indices)
    if n == 1:
        return 0
    best = 0.0
    k = min(n_pairs, n * (n - 1) // 2)
    ii = rng.integers(0, n, size=k)
    jj = rng.integers(0, n, size=k)
    for i, j in zip(indices[ii], indices[jj]):
        if i != j:
            best = max(best, metric.pair(int(i), int(j)))
    if best == 0.0:
        return 0
    return int(math.ceil(math.log(best, base)))


def refresh_stats(node: SGTreeNode, metric) -> list[int]:
    """Recompute count/maxd/mind bottom-up; returns the leaf targets."""
    if node.is_leaf():
        node.count = 1
        node.maxd = 0.0
        node.mind = math.inf
        return [node.rep]
    leaves: list[int] = []
    for child in node.children:
        leaves.extend(refresh_stats(child, metric))
    node.count = len(leaves)
    dists = metric.to_targets(node.rep, leaves)
    node.maxd = float(dists.max()) if len(leaves) else 0.0
    node.mind = _children_mind(node, metric)
    return leaves


def _children_mind(node: SGTreeNode, metric) -> float:
    reps = [c.rep for c in node.children]
    if len(reps) < 2:
        return math.inf
    best = math.inf
    for a in range(len(reps)):
        d = metric.to_targets(reps[a], reps[a + 1:])
        nz = d[d > 0.0]
        if nz.size:
            best = min(best, float(nz.min()))
    return best


def build_forest(store, base: float = 1.3, metric=None, forest_size: int = 1) -> SGForest:
    """Greedy sequential construction of an SG forest over the store.

    Deterministic: targets are inserted in index order and sharded to trees
    by index modulo forest size. Requires base > 1 and finite embeddings.
    """
    if not base > 1.0:
        raise InvalidInputError(f"base must exceed 1, got {base}")
    metric = metric or EuclideanMetric(store)
    emb = store.require_full()
    if not np.all(np.isfinite(emb)):
        raise InvalidInputError("embeddings must be finite")
    n = len(store)
    forest_size = min(forest_size, n)
    shards = [np.arange(n)[np.arange(n) % forest_size == t]
              for t in range(forest_size)]
    trees = []
    for shard in shards:
        root_level = _estimate_root_level(metric, shard, base)
        tree = SGTree(base, metric)
        for idx in shard:
            tree.insert(int(idx), root_level)
        trees.append(tree)
    forest = SGForest(trees, base, metric, n)
    for root in forest.roots:
        refresh_stats(root, metric)
    return forest


def rebuild_subtree_targets(tree: SGTree, parent: SGTreeNode,
                            targets: list[int]) -> None:
    """Re-insert targets under parent via the normal descent (repair path)."""
    b = tree.base
    for idx in targets:
        d = tree.metric.pair(idx, parent.rep)
        # callers guarantee coverage: d <= b^parent.level
        tree._insert_under(parent, idx, d)


@dataclass
class Violation:
    prop: str
    node: str
    measured: float
    bound: float

    def __str__(self):
        return (f"{self.prop} at {self.node}: measured {self.measured:.6g} "
                f"vs bound {self.bound:.6g}")


@dataclass
class InvariantReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "all invariants hold"
        return "\n".join(str(v) for v in self.violations)


def verify_invariants(forest: SGForest) -> InvariantReport:
    """Machine check of nesting, covering, separation, counts, and stats."""
    rep = InvariantReport()
    metric = forest.metric
    b = forest.base
    seen_leaves: list[int] = []
    for ti, root in enumerate(forest.roots):
        for node in root.iter_nodes():
            tag = f"tree{ti}/rep{node.rep}@L{node.level}"
            if node.is_leaf():
                seen_leaves.append(node.rep)
                continue
            reps = [c.rep for c in node.children]
            if node.rep not in reps:
                rep.violations.append(Violation("nesting", tag, 0.0, 0.0))
            for c in node.children:
                if c.level != node.level - 1:
                    rep.violations.append(
                        Violation("level-structure", tag, c.level, node.level - 1))
            dists = metric.to_targets(node.rep, reps)
            cov_bound = b ** node.level * (1 + _REL_TOL)
            worst = float(dists.max())
            if worst > cov_bound:
                rep.violations.append(Violation("covering", tag, worst, b ** node.level))
            sep_bound = b ** (node.level - 1) * (1 - _REL_TOL)
            for a in range(len(reps)):
                dd = metric.to_targets(reps[a], reps[a + 1:])
                bad = (dd > 0.0) & (dd < sep_bound)  # duplicates exempt
                if bad.any():
                    rep.violations.append(
                        Violation("separation", tag, float(dd[bad].min()),
                                  b ** (node.level - 1)))
            if node.count != sum(c.count for c in node.children):
                rep.violations.append(
                    Violation("count", tag, node.count,
                              sum(c.count for c in node.children)))
            # cached stats must match a recompute and the geometric tail
            leaves = node.leaf_targets()
            true_maxd = float(metric.to_targets(node.rep, leaves).max())
            if abs(true_maxd - node.maxd) > _STAT_TOL * max(1.0, true_maxd):
                rep.violations.append(Violation("maxd-stale", tag, node.maxd, true_maxd))
            tail = b ** node.level * b / (b - 1.0)
            if true_maxd > tail * (1 + _REL_TOL):
                rep.violations.append(Violation("maxd-tail", tag, true_maxd, tail))
            true_mind = _children_mind(node, metric)
            if math.isfinite(true_mind) != math.isfinite(node.mind) or (
                    math.isfinite(true_mind)
                    and abs(true_mind - node.mind) > _STAT_TOL * max(1.0, true_mind)):
                rep.violations.append(Violation("mind-stale", tag, node.mind, true_mind))
    if sorted(seen_leaves) != list(range(forest.n_targets)):
        rep.violations.append(
            Violation("leaf-partition", "forest", len(seen_leaves), forest.n_targets))
    return rep


def level_clustering(forest: SGForest, level: int) -> list[SGTreeNode]:
    """Nodes whose subtree crosses the given level; a partition of the corpus.

    Leaves above the level stand in for their implicit singleton chains.
    The level is clamped to the forest's range.
    """
    out: list[SGTreeNode] = []

    def collect(node: SGTreeNode):
        if node.level <= level or node.is_leaf():
            out.append(node)
            return
        for c in node.children:
            collect(c)

    for root in forest.roots:
        collect(root)
    return out


def knn(forest: SGForest, query_emb: np.ndarray, k: int):
    """k nearest targets by branch-and-bound over the forest.

    Exact for the euclidean metric (prunes with dist(q, rep) - maxd); other
    metrics may be approximate. Ties break toward the lower index.
    """
    import heapq

    if k > forest.n_targets:
        raise InvalidInputError(f"k={k} exceeds corpus size {forest.n_targets}")
    metric = forest.metric
    qvec = metric.query_vec(query_emb)
    # max-heap of current best (negated distance, index)
    best: list[tuple[float, int]] = []

    def kth() -> float:
        return -best[0][0] if len(best) == k else math.inf

    frontier: list[tuple[float, int, SGTreeNode]] = []
    counter = 0
    for root in forest.roots:
        d = float(metric.query_to_targets(qvec, [root.rep])[0])
        heapq.heappush(frontier, (max(d - root.maxd, 0.0), counter, root))
        counter += 1
    while frontier:
        lb, _, node = heapq.heappop(frontier)
        if lb > kth():
            continue
        if node.is_leaf():
            d = float(metric.query_to_targets(qvec, [node.rep])[0])
            item = (-d, -node.rep)
            if len(best) < k:
                heapq.heappush(best, item)
            elif item > best[0]:
                heapq.heapreplace(best, item)
            continue
        reps = [c.rep for c in node.children]
        dists = metric.query_to_targets(qvec, reps)
        for c, d in zip(node.children, dists):
            lb_c = max(float(d) - c.maxd, 0.0)
            if lb_c <= kth():
                heapq.heappush(frontier, (lb_c, counter, c))
                counter += 1
    ranked = sorted([(-nd, -ni) for nd, ni in best])
    return [i for _, i in ranked], [d for d, _ in ranked]


class FrozenForest:
    """Array snapshot of a forest for the sampling kernels.

    Each node carries a query-independent log-multiplier ``logg`` built
    bottom-up from measured parent-child representative distances:
    g(leaf) = 1 and g(node) = 1 + sum_child g(child) * exp(beta * u(child)).
    g(node) * w(node) then upper-bounds the total unnormalized softmax mass
    of the node's subtree for every unit-norm query, which keeps all of the
    descent sampler's restart masses nonnegative (see sampling module).
    logg depends on beta, so freeze() is parameterized by it.
    """

    def __init__(self, forest: SGForest):
        nodes: list[SGTreeNode] = []
        parent_ix: list[int] = []

        def walk(node: SGTreeNode, parent: int):
            ix = len(nodes)
            nodes.append(node)
            parent_ix.append(parent)
            for c in node.children:
                walk(c, ix)

        for root in forest.roots:
            walk(root, -1)

        n = len(nodes)
        self.n_nodes = n
        self.base = forest.base
        self.n_targets = forest.n_targets
        self.node_objs = nodes
        self.rep = np.array([nd.rep for nd in nodes], dtype=np.int64)
        self.level = np.array([nd.level for nd in nodes], dtype=np.int64)
        self.count = np.array([nd.count for nd in nodes], dtype=np.int64)
        self.parent = np.array(parent_ix, dtype=np.int64)
        self.hop = np.zeros(n, dtype=np.float64)  # dist(rep, parent rep)
        counts = np.array([len(nd.children) for nd in nodes], dtype=np.int64)
        self.child_start = np.zeros(n, dtype=np.int64)
        self.child_start[1:] = np.cumsum(counts)[:-1]
        self.child_count = counts
        child_ids = np.empty(int(counts.sum()), dtype=np.int64)
        pos = 0
        ix_of = {id(nd): i for i, nd in enumerate(nodes)}
        for i, nd in enumerate(nodes):
            for c in nd.children:
                child_ids[pos] = ix_of[id(c)]
                pos += 1
        self.child_ids = child_ids
        self._ix_of = ix_of
        metric = forest.metric
        for i in range(n):
            p = self.parent[i]
            if p >= 0:
                self.hop[i] = metric.pair(int(self.rep[i]), int(self.rep[p]))
        # tested on arrival during descent: carries a new representative
        self.tested = np.ones(n, dtype=np.uint8)
        has_parent = self.parent >= 0
        same = self.rep[self.parent[has_parent]] == self.rep[has_parent]
        self.tested[np.flatnonzero(has_parent)[same]] = 0
        self._logg_cache: dict[float, np.ndarray] = {}

    def node_index_of(self, node: SGTreeNode) -> int:
        try:
            return self._ix_of[id(node)]
        except KeyError:
            raise KeyError("node not in frozen forest") from None

    def logg(self, beta: float) -> np.ndarray:
        got = self._logg_cache.get(beta)
        if got is not None:
            return got
        n = self.n_nodes
        out = np.zeros(n, dtype=np.float64)
        # preorder puts children after parents, so reversed order is bottom-up
        for i in range(n - 1, -1, -1):
            cc = self.child_count[i]
            if cc == 0:
                out[i] = 0.0
                continue
            cs = self.child_start[i]
            kids = self.child_ids[cs:cs + cc]
            terms = out[kids] + beta * self.hop[kids]
            m = terms.max()
            s = m + math.log(np.exp(terms - m).sum())
            out[i] = np.logaddexp(0.0, s)
        self._logg_cache[beta] = out
        return out

    def paper_logmult(self, beta: float) -> np.ndarray:
        """The literal per-level inflation: beta * b^level + log(count)."""
        return beta * self.base ** self.level.astype(np.float64) + np.log(self.count)


# --- snapshot serialization ---------------------------------------------

_METRIC_CODES = {"euclidean": 0, "nystrom-exp": 1}
_METRIC_NAMES = {v: k for k, v in _METRIC_CODES.items()}


def _write_node(buf: io.BytesIO, node: SGTreeNode) -> None:
    mind = node.mind if math.isfinite(node.mind) else np.inf
    buf.write(struct.pack("<iQQffI", node.level, node.rep, node.count,
                          np.float32(node.maxd), np.float32(mind),
                          len(node.children)))
    for c in node.children:
        _write_node(buf, c)


def _read_node(view: io.BytesIO) -> SGTreeNode:
    level, rep, count, maxd, mind, nch = struct.unpack(
        "<iQQffI", view.read(28))
    node = SGTreeNode(int(rep), int(level))
    node.count = int(count)
    node.maxd = float(maxd)
    node.mind = float(mind)
    node.children = [_read_node(view) for _ in range(nch)]
    return node


def serialize_forest(forest: SGForest) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<dBIQ", forest.base,
                          _METRIC_CODES.get(forest.metric.name, 0),
                          len(forest.trees), forest.n_targets))
    for tree in forest.trees:
        if tree.root is None:
            buf.write(struct.pack("<B", 0))
        else:
            buf.write(struct.pack("<B", 1))
            _write_node(buf, tree.root)
    return buf.getvalue()


def deserialize_forest(payload: bytes, store, metric=None) -> SGForest:
    view = io.BytesIO(payload)
    base, metric_code, n_trees, n_targets = struct.unpack("<dBIQ", view.read(21))
    if metric is None:
        if _METRIC_NAMES.get(metric_code) != "euclidean":
            raise InvalidInputError(
                "snapshot uses a non-euclidean metric; pass it explicitly")
        metric = EuclideanMetric(store)
    trees = []
    for _ in range(n_trees):
        (flag,) = struct.unpack("<B", view.read(1))
        tree = SGTree(base, metric)
        if flag:
            tree.root = _read_node(view)
        trees.append(tree)
    return SGForest(trees, base, metric, int(n_targets))


def save_forest(path, forest: SGForest, extra_sections: dict[bytes, bytes] | None = None):
    sections = {b"TREE": serialize_forest(forest)}
    if extra_sections:
        sections.update(extra_sections)
    binio.write_container(path, sections)


def load_forest(path, store, metric=None) -> SGForest:
    sections = binio.read_container(path)
    if b"TREE" not in sections:
        raise InvalidInputError("container has no TREE section")
    return deserialize_forest(sections[b"TREE"], store, metric)
