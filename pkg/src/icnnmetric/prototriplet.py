"""Proto-Triplet loss: query anchor, own prototype positive, nearest other prototypes negative."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .protonet import Prototypes
from .tape import Tensor

# Added to the positive column before taking the min over negatives.
_EXCLUDE = 1e300


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.5
    k_negatives: int = 1

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.k_negatives < 1:
            raise ValueError("k_negatives must be positive")


def _matrix(protos) -> Tensor:
    return protos.matrix if isinstance(protos, Prototypes) else T.as_tensor(protos)


def _hinges(query_emb, protos, labels, margin: float, k: int | None) -> Tensor:
    """Per-query loss vector.  ``k=None`` uses the single nearest negative via min."""
    query_emb = T.as_tensor(query_emb)
    matrix = _matrix(protos)
    labels = np.asarray(labels).reshape(-1)
    m, n_protos = query_emb.shape[0], matrix.shape[0]
    if n_protos < 2:
        raise ValueError("proto-triplet needs at least two prototypes (no negative exists)")
    if labels.shape[0] != m:
        raise T.ShapeError(f"proto-triplet: {labels.shape[0]} labels for {m} queries")
    if labels.min() < 0 or labels.max() >= n_protos:
        raise ValueError(f"proto-triplet: true class must be in 0..{n_protos - 1}")
    if k is not None and k > n_protos - 1:
        raise ValueError(f"k_negatives={k} exceeds the {n_protos - 1} different-class prototypes")

    dist = T.pairwise_sq_dist(query_emb, matrix)
    pos_mask = np.zeros((m, n_protos))
    pos_mask[np.arange(m), labels] = 1.0
    d_pos = T.sum(T.multiply(dist, pos_mask), axis=1)

    if k is None:
        d_neg = T.min(T.add(dist, _EXCLUDE * pos_mask), axis=1)
        return T.relu(T.add(T.subtract(d_pos, d_neg), margin))

    masked = np.where(pos_mask > 0, np.inf, dist.data)
    order = np.argsort(masked, axis=1, kind="stable")[:, :k]
    total = None
    for r in range(k):
        sel = np.zeros((m, n_protos))
        sel[np.arange(m), order[:, r]] = 1.0
        d_neg = T.sum(T.multiply(dist, sel), axis=1)
        hinge = T.relu(T.add(T.subtract(d_pos, d_neg), margin))
        total = hinge if total is None else T.add(total, hinge)
    return T.divide(total, float(k))


def proto_triplet(query_emb, protos, true_class: int, margin: float = 0.5) -> Tensor:
    """Hinge on ``|f_a - f_p|^2 - |f_a - f_n|^2 + margin`` for one query (1 x d)."""
    return T.mean(_hinges(query_emb, protos, [true_class], margin, None))


def proto_triplet_k(query_emb, protos, true_class: int, margin: float = 0.5, k: int = 1) -> Tensor:
    """Mean hinge over the ``k`` nearest different-class prototypes."""
    return T.mean(_hinges(query_emb, protos, [true_class], margin, k))


def task_proto_triplet(query_emb, protos, query_y, config: TripletConfig = TripletConfig()) -> Tensor:
    if T.as_tensor(query_emb).shape[0] == 0:
        raise ValueError("task_proto_triplet: no query points")
    return T.mean(_hinges(query_emb, protos, query_y, config.margin, config.k_negatives))
