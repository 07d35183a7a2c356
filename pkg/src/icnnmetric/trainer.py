"""Episodic training, evaluation and the loss-combination ablation grid."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tape as T
from .encoder import (
    DEFAULT_HIDDEN,
    DEFAULT_OUT,
    MlpEncoder,
    OptimizerState,
    apply_update,
    encode,
    encoder_init,
)
from .episodes import EpisodeSpec, LabeledDataset, Task, check_split, sample_task, task_rng
from .icnn import IcnnConfig, icnn_task_loss
from .protonet import accuracy, classify, compute_prototypes, cross_entropy
from .prototriplet import TripletConfig, task_proto_triplet
from .tape import Tape, backward

log = logging.getLogger(__name__)

LOSS_TERMS = ("cross_entropy", "proto_triplet", "icnn")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_step: int = 20
    lr_decay: float = 0.5

    def state(self) -> OptimizerState:
        return OptimizerState(self.kind, self.lr, self.momentum, self.beta1, self.beta2, self.epsilon)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step)


# Meta-trained ResNet regime; kept as a preset only.
SGD_PRESET = OptimizerConfig(kind="sgd", lr=1e-4, momentum=0.9, lr_step=20)


@dataclass(frozen=True)
class TrainConfig:
    episode: EpisodeSpec = EpisodeSpec()
    epochs: int = 200
    tasks_per_epoch: int = 100
    val_tasks: int = 500
    eval_tasks: int = 1000
    seed: int = 0
    loss_weights: dict = field(default_factory=lambda: {"cross_entropy": 1.0})
    icnn: IcnnConfig = IcnnConfig()
    triplet: TripletConfig = TripletConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    hidden: tuple = DEFAULT_HIDDEN
    embed_dim: int = DEFAULT_OUT
    jobs: int = 1

    def __post_init__(self):
        if not self.loss_weights:
            raise ValueError("loss combination is empty")
        unknown = set(self.loss_weights) - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        weights = list(self.loss_weights.values())
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ValueError("loss weights must be >= 0 and not all zero")
        if self.epochs < 0 or self.tasks_per_epoch < 1 or self.eval_tasks < 1 or self.val_tasks < 0:
            raise ValueError("epochs >= 0, tasks_per_epoch >= 1, eval_tasks >= 1, val_tasks >= 0")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def layer_dims(self, input_dim: int) -> tuple[int, ...]:
        return (input_dim, *self.hidden, self.embed_dim)


@dataclass
class RunMetrics:
    epochs: list[dict] = field(default_factory=list)
    test_acc: float = float("nan")
    test_ci: float = float("nan")
    best_epoch: int = -1
    per_task: list[float] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def final_record(self) -> dict:
        return {
            "final": True,
            "best_epoch": self.best_epoch,
            "test_acc": self.test_acc,
            "test_ci": self.test_ci,
            "n_tasks": len(self.per_task),
        }

    def to_jsonl(self) -> str:
        """Per-epoch records then the final one.  Wall-clock time is left out so reruns compare equal."""
        lines = [json.dumps(rec, sort_keys=True) for rec in self.epochs]
        lines.append(json.dumps(self.final_record(), sort_keys=True))
        return "\n".join(lines) + "\n"


def confidence_half_width(accs) -> float:
    """1.96 * population std / sqrt(n)."""
    accs = np.asarray(accs, dtype=np.float64)
    return float(1.96 * accs.std() / np.sqrt(accs.size))


def _task_batch(task: Task):
    x = np.concatenate([task.support_x, task.query_x])
    y = np.concatenate([task.support_y, task.query_y])
    return x, y, task.support_y.size


def task_loss(enc: MlpEncoder, task: Task, config: TrainConfig, params=None,
              frozen: dict | None = None) -> tuple[T.Tensor, dict[str, float]]:
    """Weighted sum of the enabled loss terms on one task.

    Support and query are embedded in one forward pass so every term sees
    the same embedding.
    """
    x, y, n_s = _task_batch(task)
    emb = encode(enc, x, params)
    return combined_loss(emb, y, n_s, config, frozen)


def combined_loss(emb, y, n_support: int, config: TrainConfig, frozen: dict | None = None):
    n_ways = int(y[:n_support].max()) + 1
    support = T.gather(emb, np.arange(n_support))
    query = T.gather(emb, np.arange(n_support, emb.shape[0]))
    y_q = y[n_support:]
    protos = compute_prototypes(support, y[:n_support], n_ways)
    values: dict[str, float] = {}
    total = None
    for name in LOSS_TERMS:
        weight = config.loss_weights.get(name, 0.0)
        if weight <= 0:
            continue
        if name == "cross_entropy":
            term = cross_entropy(classify(query, protos), y_q)
        elif name == "proto_triplet":
            term = task_proto_triplet(query, protos, y_q, config.triplet)
        else:
            term = icnn_task_loss(emb, y, n_support, protos, config.icnn, frozen)
        values[name] = float(term.data)
        weighted = T.scale(term, weight)
        total = weighted if total is None else T.add(total, weighted)
    return total, values


def task_accuracy(enc: MlpEncoder, task: Task) -> float:
    emb_s = encode(enc, task.support_x)
    emb_q = encode(enc, task.query_x)
    protos = compute_prototypes(emb_s, task.support_y, len(task.class_ids))
    return accuracy(classify(emb_q, protos), task.query_y)


def evaluate(enc: MlpEncoder, ds: LabeledDataset, split: str | None, spec: EpisodeSpec,
             n_tasks: int, seed: int, epoch: int = 0, jobs: int = 1, stream: str | None = None):
    """Mean accuracy, 95% half-width and per-task accuracies over ``n_tasks`` tasks.

    Task ``i`` is drawn from its own generator, so results do not depend on
    ``jobs``; they are always aggregated in task order.
    """
    check_split(ds, split, spec)
    stream = stream or ("test" if split in (None, "test") else split)

    def one(i: int) -> float:
        return task_accuracy(enc, sample_task(ds, split, spec, task_rng(seed, stream, epoch, i)))

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            accs = list(pool.map(one, range(n_tasks)))
    else:
        accs = [one(i) for i in range(n_tasks)]
    return float(np.mean(accs)), confidence_half_width(accs), accs


def _has_split(ds: LabeledDataset, split: str) -> bool:
    return bool(ds.splits.get(split))


def train(ds: LabeledDataset, config: TrainConfig) -> tuple[MlpEncoder, RunMetrics]:
    """Episodic training followed by test evaluation of the best-validation encoder.

    A dataset without splits trains, validates and tests on all classes,
    each phase drawing from its own task stream.  A split dataset with an
    empty validation split (or ``val_tasks == 0``) tests the last epoch.
    """
    started = time.perf_counter()
    train_split = "train" if ds.splits else None
    test_split = "test" if ds.splits else None
    check_split(ds, train_split, config.episode)
    check_split(ds, test_split, config.episode)
    val_split = "val" if ds.splits else None
    validate = config.val_tasks > 0 and (val_split is None or _has_split(ds, "val"))
    if validate:
        check_split(ds, val_split, config.episode)

    enc = encoder_init(config.seed, config.layer_dims(ds.dim))
    opt = config.optimizer.state()
    metrics = RunMetrics()
    best, best_acc = enc.copy(), -1.0

    for epoch in range(config.epochs):
        opt.learning_rate = config.optimizer.lr_at(epoch)
        sums = {name: 0.0 for name in config.loss_weights if config.loss_weights[name] > 0}
        total_sum = 0.0
        for t in range(config.tasks_per_epoch):
            task = sample_task(ds, train_split, config.episode, task_rng(config.seed, "train", epoch, t))
            with Tape() as tape:
                params = enc.bind(tape)
                loss, values = task_loss(enc, task, config, params)
            grads = backward(loss)
            apply_update(enc, opt, {name: grads.wrt(p) for name, p in params.items()})
            total_sum += float(loss.data)
            for name, v in values.items():
                sums[name] += v
        n = config.tasks_per_epoch
        record = {
            "epoch": epoch,
            "lr": opt.learning_rate,
            "loss": total_sum / n,
            "terms": {name: s / n for name, s in sums.items()},
        }
        if validate:
            val_acc, val_ci, _ = evaluate(enc, ds, val_split, config.episode, config.val_tasks,
                                          config.seed, epoch=epoch, jobs=config.jobs, stream="val")
            record["val_acc"], record["val_ci"] = val_acc, val_ci
            if val_acc > best_acc:
                best, best_acc, metrics.best_epoch = enc.copy(), val_acc, epoch
        else:
            best, metrics.best_epoch = enc, epoch
        metrics.epochs.append(record)
        log.info("epoch %d loss %.4f%s", epoch, record["loss"],
                 f" val {record['val_acc']:.4f}" if validate else "")

    final = best if config.epochs else enc
    metrics.test_acc, metrics.test_ci, metrics.per_task = evaluate(
        final, ds, test_split, config.episode, config.eval_tasks, config.seed, jobs=config.jobs
    )
    metrics.wall_clock_s = time.perf_counter() - started
    return final, metrics


def dump_embeddings(enc: MlpEncoder, ds: LabeledDataset, config: TrainConfig, path,
                    n_points: int = 1000) -> int:
    """Write embeddings of test-task points (support then query, task by task) to CSV."""
    split = "test" if ds.splits else None
    header = ["task", "role", "class", "label"] + [f"e{i}" for i in range(config.embed_dim)]
    written = 0
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        i = 0
        while written < n_points:
            task = sample_task(ds, split, config.episode, task_rng(config.seed, "test", 0, i))
            for role, x, y in (("support", task.support_x, task.support_y),
                               ("query", task.query_x, task.query_y)):
                emb = encode(enc, x).data
                for row, lab in zip(emb, y):
                    if written >= n_points:
                        break
                    writer.writerow([i, role, ds.label_names[task.class_ids[lab]], int(lab)]
                                    + [repr(float(v)) for v in row])
                    written += 1
            i += 1
    return written


# --- ablation grid -----------------------------------------------------------

ABLATION_ROWS = (
    ("i", "ICNN in support", {"icnn": 1.0}, "support_only"),
    ("ii", "ICNN in support + query", {"icnn": 1.0}, "support_plus_query"),
    ("iii", "CE + ICNN in support", {"cross_entropy": 1.0, "icnn": 1.0}, "support_only"),
    ("iv", "CE + ICNN in support + query", {"cross_entropy": 1.0, "icnn": 1.0}, "support_plus_query"),
    ("v", "ICNN in support + query (prototypes)", {"icnn": 1.0}, "query_vs_prototypes"),
    ("vi", "CE + ICNN in support + query (prototypes)", {"cross_entropy": 1.0, "icnn": 1.0},
     "query_vs_prototypes"),
    ("vii", "Full ICNN", {"icnn": 1.0}, "full"),
    ("viii", "CE + Full ICNN", {"cross_entropy": 1.0, "icnn": 1.0}, "full"),
    ("pt", "Proto-Triplet", {"proto_triplet": 1.0}, "full"),
    ("ce+pt", "CE + Proto-Triplet", {"cross_entropy": 1.0, "proto_triplet": 1.0}, "full"),
    ("pt+icnn", "Proto-Triplet + Full ICNN", {"proto_triplet": 1.0, "icnn": 1.0}, "full"),
    ("ce+pt+icnn", "CE + Proto-Triplet + Full ICNN",
     {"cross_entropy": 1.0, "proto_triplet": 1.0, "icnn": 1.0}, "full"),
)

ABLATION_FIELDS = ("row", "setting", "combo", "icnn_mode", "mean_acc", "ci_half_width", "status")


@dataclass
class AblationRow:
    row: str
    setting: str
    combo: str
    icnn_mode: str
    mean_acc: float
    ci_half_width: float
    status: str
    metrics: RunMetrics | None = None


def row_config(base: TrainConfig, weights: dict, mode: str) -> TrainConfig:
    return replace(base, loss_weights=dict(weights), icnn=replace(base.icnn, mode=mode))


def run_ablation_grid(ds: LabeledDataset, base: TrainConfig, rows=ABLATION_ROWS) -> list[AblationRow]:
    """Train every row with the base seed; a failing row is recorded and the grid continues."""
    out = []
    for row_id, setting, weights, mode in rows:
        combo = "+".join(n for n in LOSS_TERMS if n in weights)
        try:
            _, metrics = train(ds, row_config(base, weights, mode))
            out.append(AblationRow(row_id, setting, combo, mode, metrics.test_acc,
                                   metrics.test_ci, "ok", metrics))
        except Exception as exc:  # recorded per row; grid continues
            log.warning("ablation row %s failed: %s", row_id, exc)
            out.append(AblationRow(row_id, setting, combo, mode, float("nan"), float("nan"),
                                   f"error: {exc}"))
    return out


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_FIELDS)
        for r in rows:
            writer.writerow([r.row, r.setting, r.combo, r.icnn_mode, repr(r.mean_acc),
                             repr(r.ci_half_width), r.status])


def nearest_centroid_accuracy(ds: LabeledDataset, split: str | None = "test") -> float:
    """Classify every row of ``split`` by the nearest full-class mean in raw feature space."""
    classes = ds.classes(split if ds.splits else None)
    rows = np.concatenate([ds.class_index[c] for c in classes])
    centroids = np.stack([ds.features[ds.class_index[c]].mean(axis=0) for c in classes])
    d = ((ds.features[rows][:, None, :] - centroids[None]) ** 2).sum(-1)
    pred = np.asarray(classes)[np.argmin(d, axis=1)]
    return float(np.mean(pred == ds.labels[rows]))


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d
