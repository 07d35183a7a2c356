"""Inter/intra class nearest-neighbour (ICNN) score and loss.

For every anchor point ``x`` two neighbourhoods are taken from a candidate
pool: the ``k`` nearest points of the same class (``N_x``) and the ``k``
nearest points of other classes (``N~x``).  Distances to the union are
min-max normalised into ``h`` in [0, 1] and combined into three per-point
factors:

* ``lambda`` rewards far other-class and near same-class neighbours,
* ``omega`` penalises the spread of the ``lambda`` components,
* ``gamma`` is the same-class share of the neighbourhood.

The score is the mean of ``lambda**(1/p) * omega**(1/q) * gamma**(1/r)``
and the loss is its negative log.  Neighbour membership and the min/max
positions inside the normalisation are fixed at forward time; gradients
flow through the distance values only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .protonet import Prototypes
from .tape import Tensor

LAMBDA_VARIANTS = ("split", "original")
VARIANCE_MODES = ("batch", "per_point")
MODES = ("support_only", "support_plus_query", "query_vs_prototypes", "full")


class DegenerateScoreWarning(UserWarning):
    pass


@dataclass(frozen=True)
class IcnnConfig:
    k_neighbors: int = 5
    p: float = 1.0
    q: float = 1.0
    r: float = 1.0
    lambda_variant: str = "split"
    variance_mode: str = "batch"
    epsilon: float = 1e-12
    mode: str = "full"

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be positive")
        if min(self.p, self.q, self.r) <= 0:
            raise ValueError("exponents p, q, r must be positive")
        if not 0 < self.epsilon <= 1e-6:
            raise ValueError("epsilon must lie in (0, 1e-6]")
        if self.lambda_variant not in LAMBDA_VARIANTS:
            raise ValueError(f"lambda_variant must be one of {LAMBDA_VARIANTS}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class NeighborhoodIndex:
    same: list[np.ndarray]
    diff: list[np.ndarray]
    same_dist: list[np.ndarray]
    diff_dist: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.diff)

    @property
    def n_same(self) -> np.ndarray:
        return np.array([len(s) for s in self.same])

    @property
    def n_diff(self) -> np.ndarray:
        return np.array([len(s) for s in self.diff])

    def layout(self):
        """Dense ``n x W`` slot table: other-class neighbours first, then same-class.

        Short rows are padded with a copy of slot 0 (always an other-class
        neighbour), which changes neither the row min nor max; the masks
        zero the padding out of every sum.
        """
        n = len(self)
        n_diff, n_same = self.n_diff, self.n_same
        width = int((n_diff + n_same).max())
        slots = np.empty((n, width), dtype=np.intp)
        diff_mask = np.zeros((n, width))
        same_mask = np.zeros((n, width))
        for i in range(n):
            row = np.concatenate([self.diff[i], self.same[i]])
            slots[i, : len(row)] = row
            slots[i, len(row) :] = row[0]
            diff_mask[i, : n_diff[i]] = 1.0
            same_mask[i, n_diff[i] : n_diff[i] + n_same[i]] = 1.0
        return slots, diff_mask, same_mask


@dataclass
class IcnnTerms:
    lam: np.ndarray
    lam_diff: np.ndarray
    lam_same: np.ndarray
    omega: np.ndarray
    gamma: np.ndarray
    per_point: np.ndarray
    score: float
    loss: float
    k1: int
    k2: int
    index: NeighborhoodIndex

    def as_dict(self) -> dict:
        return {
            "score": self.score,
            "loss": self.loss,
            "k1": self.k1,
            "k2": self.k2,
            "points": [
                {"lambda": float(l), "omega": float(o), "gamma": float(g)}
                for l, o, g in zip(self.lam, self.omega, self.gamma)
            ],
        }


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def build_neighborhoods(emb, labels, k: int, pool=None, pool_labels=None) -> NeighborhoodIndex:
    """Exact k-NN by Euclidean distance, separately within and across classes.

    Without ``pool`` the anchors are their own candidates and a point never
    lists itself.  Lists are sorted by distance with ties to the lower index
    and are truncated when fewer than ``k`` candidates exist.
    """
    a = _data(emb)
    labels = np.asarray(labels)
    self_pool = pool is None
    b = a if self_pool else _data(pool)
    pool_labels = labels if self_pool else np.asarray(pool_labels)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise T.ShapeError(f"build_neighborhoods: shapes {a.shape} and {b.shape}")
    if labels.shape[0] != a.shape[0] or pool_labels.shape[0] != b.shape[0]:
        raise T.ShapeError("build_neighborhoods: label count does not match points")
    if self_pool and a.shape[0] < 2:
        raise ValueError("build_neighborhoods: need at least two points")
    dist = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))
    candidates = np.arange(b.shape[0])
    same, diff, same_d, diff_d = [], [], [], []
    for i in range(a.shape[0]):
        is_same = pool_labels == labels[i]
        s = candidates[is_same & (candidates != i)] if self_pool else candidates[is_same]
        o = candidates[~is_same]
        if o.size == 0:
            raise ValueError(f"build_neighborhoods: point {i} has no different-class candidates")
        s = s[np.argsort(dist[i, s], kind="stable")][:k]
        o = o[np.argsort(dist[i, o], kind="stable")][:k]
        same.append(s)
        diff.append(o)
        same_d.append(dist[i, s])
        diff_d.append(dist[i, o])
    return NeighborhoodIndex(same, diff, same_d, diff_d)


# --- per-point reference functions on a built index --------------------------


def normalize_h(index: NeighborhoodIndex, i: int, epsilon: float = 1e-12):
    """Min-max normalised distances of point ``i``: ``(h_diff, h_same)``."""
    d_all = np.concatenate([index.diff_dist[i], index.same_dist[i]])
    lo, hi = d_all.min(), d_all.max()
    den = max(hi - lo, epsilon)
    return (index.diff_dist[i] - lo) / den, (index.same_dist[i] - lo) / den


def lambda_components(index: NeighborhoodIndex, i: int, epsilon: float = 1e-12):
    h_diff, h_same = normalize_h(index, i, epsilon)
    return float(np.sum(h_diff)), float(np.sum(1.0 - h_same))


def lambda_term(index: NeighborhoodIndex, i: int, variant: str = "split", epsilon: float = 1e-12) -> float:
    lam_diff, lam_same = lambda_components(index, i, epsilon)
    n_diff, n_same = len(index.diff[i]), len(index.same[i])
    if variant == "original":
        return (lam_diff + lam_same) / (n_diff + n_same)
    if variant != "split":
        raise ValueError(f"unknown lambda variant {variant!r}")
    return lam_diff / n_diff + (lam_same / n_same if n_same else 0.0)


def gamma_term(index: NeighborhoodIndex, i: int) -> float:
    n_diff, n_same = len(index.diff[i]), len(index.same[i])
    return n_same / (n_same + n_diff)


def omega_term(index: NeighborhoodIndex, config: IcnnConfig = IcnnConfig()) -> np.ndarray:
    """Per-point omega before the epsilon clamp (batch mode gives one shared value)."""
    n = len(index)
    k1, k2 = int(index.n_diff.max()), int(index.n_same.max())
    bound = float(k1 * k1 + k2 * k2)
    if config.variance_mode == "batch":
        comps = np.array([lambda_components(index, i, config.epsilon) for i in range(n)])
        return np.full(n, bound - (np.var(comps[:, 0]) + np.var(comps[:, 1])))
    out = np.empty(n)
    for i in range(n):
        h_diff, h_same = normalize_h(index, i, config.epsilon)
        var_same = np.var(1.0 - h_same) if h_same.size else 0.0
        out[i] = bound - h_diff.size**2 * np.var(h_diff) - h_same.size**2 * var_same
    return out


# --- differentiable score ----------------------------------------------------


def _power(x: Tensor, exponent: float, eps: float) -> Tensor:
    clamped = T.maximum(x, eps)
    if exponent == 1.0:
        return clamped
    return T.exp(T.scale(T.log(clamped), 1.0 / exponent))


def _masked_mean(x: Tensor, mask: np.ndarray, count: np.ndarray) -> Tensor:
    return T.divide(T.sum(T.multiply(x, mask), axis=1, keepdims=True), count[:, None])


def _graph(emb, labels, config: IcnnConfig, pool=None, pool_labels=None, index=None):
    emb = T.as_tensor(emb)
    labels = np.asarray(labels)
    pool_t = emb if pool is None else T.as_tensor(pool)
    if index is None:
        index = build_neighborhoods(
            emb, labels, config.k_neighbors, None if pool is None else pool_t, pool_labels
        )
    eps = config.epsilon
    n = emb.shape[0]
    slots, diff_mask, same_mask = index.layout()
    n_diff = index.n_diff.astype(np.float64)
    n_same = index.n_same.astype(np.float64)
    n_same_safe = np.maximum(n_same, 1.0)

    anchors = T.gather(emb, np.arange(n)[:, None])  # n x 1 x d
    neighbours = T.gather(pool_t, slots)  # n x W x d
    dist = T.sqrt(T.sum(T.square(T.subtract(neighbours, anchors)), axis=2))

    lo = T.min(dist, axis=1, keepdims=True)
    hi = T.max(dist, axis=1, keepdims=True)
    h = T.divide(T.subtract(dist, lo), T.maximum(T.subtract(hi, lo), eps))
    sim = T.subtract(1.0, h)

    lam_diff = T.sum(T.multiply(h, diff_mask), axis=1)
    lam_same = T.sum(T.multiply(sim, same_mask), axis=1)
    if config.lambda_variant == "split":
        lam = T.add(T.divide(lam_diff, n_diff), T.divide(lam_same, n_same_safe))
    else:
        lam = T.divide(T.add(lam_diff, lam_same), n_diff + n_same)

    k1, k2 = int(n_diff.max()), int(n_same.max())
    bound = float(k1 * k1 + k2 * k2)
    if config.variance_mode == "batch":
        var_diff = T.mean(T.square(T.subtract(lam_diff, T.mean(lam_diff))))
        var_same = T.mean(T.square(T.subtract(lam_same, T.mean(lam_same))))
        omega = T.subtract(bound, T.add(var_diff, var_same))
    else:
        dev_diff = T.subtract(h, _masked_mean(h, diff_mask, n_diff))
        dev_same = T.subtract(sim, _masked_mean(sim, same_mask, n_same_safe))
        var_diff = T.divide(T.sum(T.multiply(T.square(dev_diff), diff_mask), axis=1), n_diff)
        var_same = T.divide(T.sum(T.multiply(T.square(dev_same), same_mask), axis=1), n_same_safe)
        omega = T.subtract(
            T.subtract(bound, T.multiply(var_diff, n_diff**2)), T.multiply(var_same, n_same**2)
        )

    gamma = n_same / (n_same + n_diff)
    gamma_factor = np.maximum(gamma, eps) ** (1.0 / config.r)
    per_point = T.multiply(
        T.multiply(_power(lam, config.p, eps), _power(omega, config.q, eps)), gamma_factor
    )
    score = T.mean(per_point)
    loss = T.scale(T.log(T.maximum(score, eps)), -1.0)

    terms = IcnnTerms(
        lam=lam.data.copy(),
        lam_diff=lam_diff.data.copy(),
        lam_same=lam_same.data.copy(),
        omega=np.broadcast_to(omega.data, (n,)).copy(),
        gamma=gamma,
        per_point=per_point.data.copy(),
        score=float(score.data),
        loss=float(loss.data),
        k1=k1,
        k2=k2,
        index=index,
    )
    return terms, lam, loss


def icnn_score(emb, labels, config: IcnnConfig = IcnnConfig(), pool=None, pool_labels=None,
               index: NeighborhoodIndex | None = None) -> tuple[IcnnTerms, float]:
    terms, _, _ = _graph(emb, labels, config, pool, pool_labels, index)
    return terms, terms.score


def icnn_loss(emb, labels, config: IcnnConfig = IcnnConfig(), pool=None, pool_labels=None,
              index: NeighborhoodIndex | None = None) -> Tensor:
    """``-log(max(score, epsilon))`` as a tape tensor."""
    return _graph(emb, labels, config, pool, pool_labels, index)[2]


def mean_lambda(emb, labels, config: IcnnConfig = IcnnConfig(), index=None) -> Tensor:
    """Batch mean of the per-point lambda, differentiable."""
    return T.mean(_graph(emb, labels, config, index=index)[1])


def _cached(frozen: dict | None, key: str, build):
    if frozen is None:
        return build()
    if key not in frozen:
        frozen[key] = build()
    return frozen[key]


def icnn_task_loss(emb, labels, n_support: int, protos, config: IcnnConfig = IcnnConfig(),
                   frozen: dict | None = None) -> Tensor:
    """ICNN loss over one task under ``config.mode``.

    ``emb`` holds support rows first, then query rows.  ``frozen`` is an
    optional dict; neighbourhoods are stored in it on first use and reused
    afterwards, which pins selections across repeated evaluations.
    """
    emb = T.as_tensor(emb)
    labels = np.asarray(labels)
    n = emb.shape[0]
    k = config.k_neighbors
    if config.mode == "full":
        index = _cached(frozen, "full", lambda: build_neighborhoods(emb, labels, k))
        return icnn_loss(emb, labels, config, index=index)

    support = T.gather(emb, np.arange(n_support))
    y_s = labels[:n_support]
    if np.bincount(y_s).max() < 2:
        warnings.warn(
            "support set has one sample per class: every support gamma is 0 and the "
            "score is clamped to epsilon scale",
            DegenerateScoreWarning,
            stacklevel=2,
        )
    s_index = _cached(frozen, "support", lambda: build_neighborhoods(support, y_s, k))
    loss = icnn_loss(support, y_s, config, index=s_index)
    if config.mode == "support_only":
        return loss

    if n == n_support:
        raise ValueError(f"icnn mode {config.mode!r} needs query points")
    query = T.gather(emb, np.arange(n_support, n))
    y_q = labels[n_support:]
    if config.mode == "support_plus_query":
        pool, pool_y = support, y_s
    else:
        pool = protos.matrix if isinstance(protos, Prototypes) else T.as_tensor(protos)
        pool_y = np.arange(pool.shape[0])
    q_index = _cached(
        frozen, "query", lambda: build_neighborhoods(query, y_q, k, pool=pool, pool_labels=pool_y)
    )
    return T.add(loss, icnn_loss(query, y_q, config, pool=pool, pool_labels=pool_y, index=q_index))
