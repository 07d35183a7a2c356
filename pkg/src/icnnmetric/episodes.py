"""Labeled datasets, class splits and K-way C-shot task sampling."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
_STREAMS = {"train": 0, "val": 1, "test": 2, "embed": 3}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 5
    queries: int = 15

    def __post_init__(self):
        for name in ("ways", "shots", "queries"):
            if getattr(self, name) < 1:
                raise ValueError(f"episode {name} must be positive")


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    label_names: list[str]
    ids: list[str]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_index = {
            c: np.flatnonzero(self.labels == c) for c in range(len(self.label_names))
        }

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def classes(self, split: str | None) -> list[int]:
        if split is None:
            return list(range(self.n_classes))
        if split not in self.splits:
            raise DatasetError(f"dataset has no {split!r} split")
        return list(self.splits[split])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "n_rows": int(self.features.shape[0]),
            "dim": int(self.dim),
            "n_classes": self.n_classes,
            "class_counts": {
                self.label_names[c]: int(len(rows)) for c, rows in self.class_index.items()
            },
            "splits": {
                s: [self.label_names[c] for c in cs] for s, cs in sorted(self.splits.items())
            },
            "digest": self.digest(),
        }


@dataclass
class Task:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_ids: list[int]
    support_rows: np.ndarray | None = None
    query_rows: np.ndarray | None = None


def load_csv(path) -> LabeledDataset:
    """Read ``id,label,f0,...,f{d-1}``.  Error messages cite 1-based file lines."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file, missing header 'id,label,f0,...'")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 2
    expected = ["id", "label"] + [f"f{i}" for i in range(d)]
    if d < 1 or header != expected:
        raise DatasetError(f"{path}: line 1: header must be 'id,label,f0,...,f{{d-1}}'")
    ids, labels, feats = [], [], []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise DatasetError(f"{path}: row {lineno}: expected {d + 2} cells, got {len(row)}")
        rid = row[0].strip()
        if rid in seen:
            raise DatasetError(f"{path}: row {lineno}: duplicate id {rid!r}")
        seen.add(rid)
        try:
            vals = [float(c) for c in row[2:]]
        except ValueError:
            raise DatasetError(f"{path}: row {lineno}: non-numeric feature cell") from None
        if not np.all(np.isfinite(vals)):
            raise DatasetError(f"{path}: row {lineno}: non-finite feature value")
        ids.append(rid)
        labels.append(row[1].strip())
        feats.append(vals)
    if not ids:
        raise DatasetError(f"{path}: no data rows")
    names: list[str] = []
    dense = {}
    for lab in labels:
        if lab not in dense:
            dense[lab] = len(names)
            names.append(lab)
    return LabeledDataset(
        np.array(feats), np.array([dense[lab] for lab in labels]), names, ids
    )


def synth_gaussian(
    seed: int,
    n_classes: int,
    per_class: int,
    d: int,
    center_sep: float,
    noise_sigma: float,
) -> LabeledDataset:
    """Isotropic Gaussian blobs around centers drawn uniformly on a sphere."""
    if min(n_classes, per_class, d) < 1:
        raise ValueError("n_classes, per_class and d must be positive")
    if center_sep <= 0 or noise_sigma < 0:
        raise ValueError("center_sep must be > 0 and noise_sigma >= 0")
    rng = np.random.Generator(np.random.Philox(seed))
    centers = rng.standard_normal((n_classes, d))
    centers *= center_sep / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), per_class)
    feats = centers[labels] + noise_sigma * rng.standard_normal((n_classes * per_class, d))
    names = [f"c{c}" for c in range(n_classes)]
    ids = [str(i) for i in range(len(labels))]
    return LabeledDataset(feats, labels, names, ids)


def split_classes(ds: LabeledDataset, seed: int, n_train: int, n_val: int, n_test: int) -> LabeledDataset:
    if n_train + n_val + n_test != ds.n_classes:
        raise DatasetError(
            f"split counts {n_train}+{n_val}+{n_test} do not sum to {ds.n_classes} classes"
        )
    rng = np.random.Generator(np.random.Philox(seed))
    order = [int(c) for c in rng.permutation(ds.n_classes)]
    splits = {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }
    return replace(ds, splits=splits)


def task_rng(seed: int, stream: str, epoch: int, index: int) -> np.random.Generator:
    """Counter-based generator keyed on (seed, stream, epoch, task index)."""
    key = np.random.SeedSequence([seed, _STREAMS[stream], epoch, index])
    return np.random.Generator(np.random.Philox(key))


def check_split(ds: LabeledDataset, split: str | None, spec: EpisodeSpec) -> None:
    classes = ds.classes(split)
    if len(classes) < spec.ways:
        raise DatasetError(
            f"split {split!r} has {len(classes)} classes, {spec.ways}-way tasks need {spec.ways}"
        )
    need = spec.shots + spec.queries
    for c in classes:
        if len(ds.class_index[c]) < need:
            raise DatasetError(
                f"class {ds.label_names[c]!r} has {len(ds.class_index[c])} rows, "
                f"{spec.shots}-shot with {spec.queries} queries needs {need}"
            )


def sample_task(ds: LabeledDataset, split: str | None, spec: EpisodeSpec, rng: np.random.Generator) -> Task:
    """Draw K classes, then C support and q query rows per class, all without replacement.

    Task labels are re-indexed to ``0..K-1`` in ``class_ids`` order.
    """
    check_split(ds, split, spec)
    classes = ds.classes(split)
    chosen = [int(c) for c in rng.choice(classes, size=spec.ways, replace=False)]
    s_rows, q_rows = [], []
    for c in chosen:
        rows = rng.permutation(ds.class_index[c])[: spec.shots + spec.queries]
        s_rows.append(rows[: spec.shots])
        q_rows.append(rows[spec.shots :])
    s_idx = np.concatenate(s_rows)
    q_idx = np.concatenate(q_rows)
    return Task(
        support_x=ds.features[s_idx],
        support_y=np.repeat(np.arange(spec.ways), spec.shots),
        query_x=ds.features[q_idx],
        query_y=np.repeat(np.arange(spec.ways), spec.queries),
        class_ids=chosen,
        support_rows=s_idx,
        query_rows=q_idx,
    )
