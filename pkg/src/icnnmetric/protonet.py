"""Class prototypes and nearest-prototype classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .tape import Tensor


@dataclass
class Prototypes:
    matrix: Tensor
    class_ids: list[int]


def compute_prototypes(support_emb, support_y, n_classes: int | None = None) -> Prototypes:
    """Row k is the mean of the support embeddings labelled k.

    Written as a matmul with a row-normalised membership matrix so the
    result stays on the tape.
    """
    support_emb = T.as_tensor(support_emb)
    y = np.asarray(support_y)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 0
    counts = np.bincount(y, minlength=n_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"compute_prototypes: no support sample for classes {missing.tolist()}")
    if y.shape[0] != support_emb.shape[0]:
        raise T.ShapeError(
            f"compute_prototypes: {y.shape[0]} labels for {support_emb.shape[0]} embeddings"
        )
    member = (np.arange(n_classes)[:, None] == y[None, :]).astype(np.float64)
    member /= counts[:, None]
    return Prototypes(T.matmul(member, support_emb), list(range(n_classes)))


def classify(query_emb, protos: Prototypes | Tensor) -> Tensor:
    """Logits: negative squared Euclidean distance to each prototype."""
    matrix = protos.matrix if isinstance(protos, Prototypes) else protos
    return T.scale(T.pairwise_sq_dist(query_emb, matrix), -1.0)


def cross_entropy(logits, labels) -> Tensor:
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    m, k = logits.shape
    if labels.shape != (m,):
        raise T.ShapeError(f"cross_entropy: labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in 0..{k - 1}")
    onehot = np.zeros((m, k))
    onehot[np.arange(m), labels] = 1.0
    picked = T.sum(T.multiply(T.log_softmax(logits), onehot), axis=1)
    return T.scale(T.mean(picked), -1.0)


def predict(logits) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def accuracy(logits, labels) -> float:
    return float(np.mean(predict(logits) == np.asarray(labels)))
