"""Class separability metrics and gradient-dynamics harnesses.

The harnesses train a 2 x 2 linear map on a fixed three-class toy set and
record how inter/intra class distances and the spread of the lambda
components move, so the separation claims for the ICNN terms can be
checked empirically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from . import tape as T
from .icnn import IcnnConfig, icnn_loss, icnn_score, mean_lambda
from .tape import Tape, backward

TRAJECTORY_FIELDS = ("step", "inter", "intra", "var_sum", "lambda_mean")


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))


def _groups(emb, labels) -> list[np.ndarray]:
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    return [emb[labels == c] for c in np.unique(labels)]


def inter_class_distance(emb, labels) -> float:
    """Mean over unordered class pairs of the mean cross-pair Euclidean distance."""
    groups = _groups(emb, labels)
    if len(groups) < 2:
        raise ValueError("inter_class_distance needs at least two classes")
    return float(np.mean([_pairwise(a, b).mean() for a, b in combinations(groups, 2)]))


def _within(group: np.ndarray) -> float:
    if len(group) < 2:
        return 0.0
    iu = np.triu_indices(len(group), k=1)
    return float(_pairwise(group, group)[iu].mean())


def intra_class_distance(emb, labels) -> float:
    """Mean over classes of the mean within-class pairwise distance (singletons give 0)."""
    return float(np.mean([_within(g) for g in _groups(emb, labels)]))


@dataclass
class SeparabilityReport:
    inter_class_mean: float
    intra_class_mean: float
    per_class: dict[int, float]
    lambda_variance_sum: float


def separability_report(emb, labels, config: IcnnConfig = IcnnConfig()) -> SeparabilityReport:
    labels = np.asarray(labels)
    terms, _ = icnn_score(emb, labels, config)
    per_class = {int(c): _within(np.asarray(emb)[labels == c]) for c in np.unique(labels)}
    return SeparabilityReport(
        inter_class_distance(emb, labels),
        intra_class_distance(emb, labels),
        per_class,
        float(np.var(terms.lam_diff) + np.var(terms.lam_same)),
    )


# --- proposition harnesses ---------------------------------------------------

TOY_CLASSES = 3
TOY_PER_CLASS = 30
TOY_CENTERS = np.array([[-3.0, 0.0], [0.0, 0.0], [3.0, 0.0]])
TOY_SIGMA = np.array([0.5, 1.5])


def toy_problem(seed: int = 0, noise_scale: float = 1.0):
    """Three 2-D Gaussian classes of 30 points, spread wider across than along the class axis."""
    rng = np.random.Generator(np.random.Philox(seed))
    labels = np.repeat(np.arange(TOY_CLASSES), TOY_PER_CLASS)
    noise = rng.standard_normal((labels.size, 2)) * TOY_SIGMA * noise_scale
    return TOY_CENTERS[labels] + noise, labels


@dataclass
class PropositionReport:
    name: str
    passed: bool
    trajectory: list[dict] = field(default_factory=list)

    @property
    def initial(self) -> dict:
        return self.trajectory[0]

    @property
    def final(self) -> dict:
        return self.trajectory[-1]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_FIELDS)
            writer.writeheader()
            writer.writerows(self.trajectory)


def _snapshot(step: int, emb: np.ndarray, labels, config: IcnnConfig) -> dict:
    terms, _ = icnn_score(emb, labels, config)
    return {
        "step": step,
        "inter": inter_class_distance(emb, labels),
        "intra": intra_class_distance(emb, labels),
        "var_sum": float(np.var(terms.lam_diff) + np.var(terms.lam_same)),
        "lambda_mean": float(np.mean(terms.lam)),
    }


def _run(objective, sign: float, seed: int, steps: int, lr: float, noise_scale: float,
         config: IcnnConfig) -> list[dict]:
    x, labels = toy_problem(seed, noise_scale)
    weights = np.eye(2)
    trajectory = [_snapshot(0, x @ weights, labels, config)]
    for step in range(1, steps + 1):
        with Tape() as tape:
            w = tape.variable(weights)
            value = objective(T.matmul(x, w), labels, config)
        grad = backward(value).wrt(w)
        weights = weights + sign * lr * grad
        trajectory.append(_snapshot(step, x @ weights, labels, config))
    return trajectory


def verify_proposition_1(seed: int = 0, steps: int = 200, lr: float = 0.05,
                         config: IcnnConfig = IcnnConfig(), noise_scale: float = 1.0) -> PropositionReport:
    """Gradient ascent on mean lambda; passes iff inter grows and intra shrinks."""
    config = replace(config, lambda_variant="split")
    traj = _run(mean_lambda, +1.0, seed, steps, lr, noise_scale, config)
    first, last = traj[0], traj[-1]
    passed = steps >= 1 and last["inter"] > first["inter"] and last["intra"] < first["intra"]
    return PropositionReport("proposition_1", bool(passed), traj)


def verify_proposition_2(seed: int = 0, steps: int = 200, lr: float = 0.05,
                         config: IcnnConfig = IcnnConfig(), noise_scale: float = 1.0) -> PropositionReport:
    """Gradient descent on the ICNN loss; passes iff the lambda-component variance sum drops."""
    traj = _run(icnn_loss, -1.0, seed, steps, lr, noise_scale, config)
    passed = steps >= 1 and traj[-1]["var_sum"] < traj[0]["var_sum"]
    return PropositionReport("proposition_2", bool(passed), traj)
