"""Encoders, the exact softmax oracle, and cross-entropy losses.

Everything downstream (trees, samplers, the trainer) is tested against the
operations here. Encoders are small differentiable maps followed by L2
normalization, so embeddings are unit-normed and analytic gradients stay
cheap enough to check against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericError

__all__ = [
    "SoftmaxParams",
    "LinearEncoder",
    "MLPEncoder",
    "DualEncoder",
    "TargetStore",
    "unit_normalize",
    "logit",
    "exact_softmax",
    "exact_loss_and_grad",
    "sampled_loss_and_grad",
    "estimate_lipschitz_and_grad_bound",
]


@dataclass(frozen=True)
class SoftmaxParams:
    """Inverse temperature of the target distribution."""

    beta: float = 20.0

    def __post_init__(self):
        if not self.beta >= 0.0:
            raise InvalidInputError(f"beta must be >= 0, got {self.beta}")


def unit_normalize(x: np.ndarray) -> np.ndarray:
    """L2-normalize along the last axis; zero vectors are rejected."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if not np.all(norms > 0):
        raise NumericError("cannot unit-normalize a zero vector")
    return x / norms


def _softmax_stable(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


class LinearEncoder:
    """Linear map over raw features followed by optional L2 normalization."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0,
                 normalize: bool = True, weight: np.ndarray | None = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.normalize = normalize
        if weight is None:
            rng = np.random.default_rng(seed)
            weight = rng.normal(scale=1.0 / np.sqrt(in_dim),
                                size=(out_dim, in_dim))
        self.W = np.asarray(weight, dtype=np.float64).copy()
        self.n_encoded = 0

    @property
    def n_params(self) -> int:
        return self.W.size

    def get_params(self) -> np.ndarray:
        return self.W.ravel().copy()

    def set_params(self, vec: np.ndarray) -> None:
        self.W = np.asarray(vec, dtype=np.float64).reshape(self.W.shape).copy()

    def encode(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.n_encoded += X.shape[0]
        u = X @ self.W.T
        return unit_normalize(u) if self.normalize else u

    def vjp(self, X: np.ndarray, G: np.ndarray) -> np.ndarray:
        """Gradient of sum_i <G_i, encode(X_i)> with respect to the params."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        G = np.atleast_2d(np.asarray(G, dtype=np.float64))
        u = X @ self.W.T
        if self.normalize:
            nrm = np.linalg.norm(u, axis=1, keepdims=True)
            e = u / nrm
            gu = (G - (G * e).sum(axis=1, keepdims=True) * e) / nrm
        else:
            gu = G
        return (gu.T @ X).ravel()


class MLPEncoder:
    """One-hidden-layer tanh perceptron followed by L2 normalization."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int,
                 seed: int = 0, normalize: bool = True):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.normalize = normalize
        rng = np.random.default_rng(seed)
        self.W1 = rng.normal(scale=1.0 / np.sqrt(in_dim),
                             size=(hidden_dim, in_dim))
        self.b1 = np.zeros(hidden_dim)
        self.W2 = rng.normal(scale=1.0 / np.sqrt(hidden_dim),
                             size=(out_dim, hidden_dim))
        self.b2 = np.zeros(out_dim)
        self.n_encoded = 0

    @property
    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1,
                               self.W2.ravel(), self.b2])

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for name, arr in (("W1", self.W1), ("b1", self.b1),
                          ("W2", self.W2), ("b2", self.b2)):
            setattr(self, name, vec[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    def _forward(self, X):
        h = np.tanh(X @ self.W1.T + self.b1)
        u = h @ self.W2.T + self.b2
        return h, u

    def encode(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.n_encoded += X.shape[0]
        _, u = self._forward(X)
        return unit_normalize(u) if self.normalize else u

    def vjp(self, X: np.ndarray, G: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        G = np.atleast_2d(np.asarray(G, dtype=np.float64))
        h, u = self._forward(X)
        if self.normalize:
            nrm = np.linalg.norm(u, axis=1, keepdims=True)
            e = u / nrm
            gu = (G - (G * e).sum(axis=1, keepdims=True) * e) / nrm
        else:
            gu = G
        gW2 = gu.T @ h
        gb2 = gu.sum(axis=0)
        gh = (gu @ self.W2) * (1.0 - h * h)
        gW1 = gh.T @ X
        gb1 = gh.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


class DualEncoder:
    """Query and target encoders with one flat parameter vector Theta.

    Deterministic: identical parameters and inputs give identical embeddings.
    """

    def __init__(self, query_encoder, target_encoder):
        self.q = query_encoder
        self.t = target_encoder

    @property
    def n_params(self) -> int:
        return self.q.n_params + self.t.n_params

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.q.get_params(), self.t.get_params()])

    def set_params(self, vec: np.ndarray) -> None:
        nq = self.q.n_params
        self.q.set_params(vec[:nq])
        self.t.set_params(vec[nq:])

    def encode_queries(self, X) -> np.ndarray:
        return self.q.encode(X)

    def encode_targets(self, Y) -> np.ndarray:
        return self.t.encode(Y)

    def grad_logit(self, x_feat, y_feat) -> np.ndarray:
        """Gradient of <f_theta(x), f_phi(y)> with respect to Theta."""
        ex = self.q.encode(x_feat)[0]
        ey = self.t.encode(y_feat)[0]
        return np.concatenate([self.q.vjp(x_feat, ey[None, :]),
                               self.t.vjp(y_feat, ex[None, :])])

    @property
    def target_calls(self) -> int:
        return self.t.n_encoded

    @property
    def query_calls(self) -> int:
        return self.q.n_encoded


class TargetStore:
    """The target corpus with cached embeddings, versioned by training step.

    ``cached_full`` equals the exact target encodings at version
    ``version_full`` until an approximate re-encode replaces it, at which
    point ``approximate`` is flagged. Indices are stable across re-encoding.
    """

    def __init__(self, features: np.ndarray):
        features = np.atleast_2d(np.asarray(features))
        if features.shape[0] < 1:
            raise InvalidInputError("target store must hold at least one target")
        self.features = features
        self.cached_full: np.ndarray | None = None
        self.cached_low: np.ndarray | None = None
        self.version_full = -1
        self.version_low = -1
        self.approximate = False

    def __len__(self) -> int:
        return self.features.shape[0]

    def encode_all(self, enc: DualEncoder, version: int = 0) -> None:
        """Exact re-encode of every target (O(|Y|) encoder calls)."""
        self.cached_full = enc.encode_targets(self.features)
        self.version_full = version
        self.approximate = False

    def set_full(self, emb: np.ndarray, version: int, approximate: bool) -> None:
        if emb.shape[0] != len(self):
            raise InvalidInputError("embedding count does not match store size")
        self.cached_full = emb
        self.version_full = version
        self.approximate = approximate

    def set_low(self, emb: np.ndarray, version: int) -> None:
        self.cached_low = emb
        self.version_low = version

    def require_full(self) -> np.ndarray:
        if self.cached_full is None:
            raise InvalidInputError("target store has no cached embeddings; "
                                    "call encode_all first")
        return self.cached_full


def logit(x_feat, y_feat, enc: DualEncoder, p: SoftmaxParams) -> float:
    """beta * <f_theta(x), f_phi(y)>; in [-beta, beta] for unit-norm outputs."""
    ex = enc.encode_queries(x_feat)[0]
    ey = enc.encode_targets(y_feat)[0]
    val = p.beta * float(ex @ ey)
    if not np.isfinite(val):
        raise NumericError("non-finite logit")
    return val


def exact_softmax(x_feat, store: TargetStore, enc: DualEncoder,
                  p: SoftmaxParams, from_cache: bool = True) -> np.ndarray:
    """Exact softmax over the whole corpus, max-logit subtracted.

    With ``from_cache`` the target side reads the store's cached embeddings
    (what the samplers see); otherwise targets are re-encoded exactly.
    """
    if len(store) < 1:
        raise InvalidInputError("empty target store")
    q = enc.encode_queries(x_feat)[0]
    T = store.require_full() if from_cache else enc.encode_targets(store.features)
    return _softmax_stable(p.beta * (T @ q))


def exact_loss_and_grad(x_feat, pos_idx: int, store: TargetStore,
                        enc: DualEncoder, p: SoftmaxParams):
    """Cross-entropy loss and full-expectation gradient (the oracle).

    Encodes every target fresh, so the gradient is exact at the current
    parameters; O(|Y|) encoder calls.
    """
    if not 0 <= pos_idx < len(store):
        raise InvalidInputError(f"positive index {pos_idx} outside store")
    q = enc.encode_queries(x_feat)[0]
    T = enc.encode_targets(store.features)
    logits = p.beta * (T @ q)
    m = logits.max()
    logz = m + np.log(np.exp(logits - m).sum())
    loss = float(-logits[pos_idx] + logz)
    probs = _softmax_stable(logits)

    coeff = probs.copy()
    coeff[pos_idx] -= 1.0
    grad_q = enc.q.vjp(x_feat, (coeff @ T)[None, :]) * p.beta
    grad_t = enc.t.vjp(store.features, coeff[:, None] * q[None, :]) * p.beta
    return loss, np.concatenate([grad_q, grad_t])


def sampled_loss_and_grad(x_feat, pos_idx: int, negatives, store: TargetStore,
                          enc: DualEncoder, p: SoftmaxParams):
    """Loss with the partition function estimated from sampled negatives.

    Zhat = exp(logit(x, y_pos)) + sum_i exp(logit(x, y_neg_i)); the positive
    must not be duplicated among the negatives.
    """
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.size == 0:
        raise InvalidInputError("negative set must be non-empty")
    if np.any(negatives == pos_idx):
        raise InvalidInputError("positive duplicated among negatives")
    idx = np.concatenate([[pos_idx], negatives])
    feats = store.features[idx]
    q = enc.encode_queries(x_feat)[0]
    T = enc.encode_targets(feats)
    logits = p.beta * (T @ q)
    m = logits.max()
    logz = m + np.log(np.exp(logits - m).sum())
    loss = float(-logits[0] + logz)
    probs = _softmax_stable(logits)

    coeff = probs.copy()
    coeff[0] -= 1.0
    grad_q = enc.q.vjp(x_feat, (coeff @ T)[None, :]) * p.beta
    grad_t = enc.t.vjp(feats, coeff[:, None] * q[None, :]) * p.beta
    return loss, np.concatenate([grad_q, grad_t])


def estimate_lipschitz_and_grad_bound(enc: DualEncoder, queries, targets,
                                      rng: np.random.Generator | None = None,
                                      n_probes: int = 64, eps: float = 1e-4):
    """Empirical estimates (L_hat, M_hat) for the drift bound.

    L_hat is the max measured ||delta embedding|| / ||delta Theta|| over
    random and Jacobian-aligned parameter perturbations; M_hat is the max
    sampled logit-gradient norm. Zero perturbations are excluded.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if queries.shape[0] == 0 or targets.shape[0] == 0:
        raise InvalidInputError("need a non-empty input sample")
    rng = rng or np.random.default_rng(0)

    theta0 = enc.get_params()
    nq = enc.q.n_params
    l_hat = 0.0

    def ratio(delta: np.ndarray) -> float:
        nd = np.linalg.norm(delta)
        if nd == 0.0:  # 0/0 guard: degenerate probes carry no information
            return 0.0
        base_q = enc.encode_queries(queries)
        base_t = enc.encode_targets(targets)
        enc.set_params(theta0 + delta)
        try:
            dq = enc.encode_queries(queries) - base_q
            dt = enc.encode_targets(targets) - base_t
        finally:
            enc.set_params(theta0)
        move = max(np.linalg.norm(dq, axis=1).max(),
                   np.linalg.norm(dt, axis=1).max())
        return move / nd

    for _ in range(n_probes // 2):
        delta = rng.normal(size=theta0.size)
        l_hat = max(l_hat, ratio(eps * delta / np.linalg.norm(delta)))

    # Jacobian-aligned probes: steepest directions for moving one embedding.
    for _ in range(n_probes - n_probes // 2):
        x = queries[rng.integers(len(queries))]
        y = targets[rng.integers(len(targets))]
        g = rng.normal(size=enc.q.encode(x).shape[1])
        dq = enc.q.vjp(x, g[None, :])
        dt = enc.t.vjp(y, g[None, :])
        delta = np.concatenate([dq, np.zeros(enc.t.n_params)])
        if np.linalg.norm(delta) > 0:
            l_hat = max(l_hat, ratio(eps * delta / np.linalg.norm(delta)))
        delta = np.concatenate([np.zeros(nq), dt])
        if np.linalg.norm(delta) > 0:
            l_hat = max(l_hat, ratio(eps * delta / np.linalg.norm(delta)))

    m_hat = 0.0
    for x in queries:
        for y in targets:
            m_hat = max(m_hat, float(np.linalg.norm(enc.grad_logit(x, y))))
    return l_hat, m_hat
