"""Self-test suite behind ``icnnmetric check``.

Every check is a named zero-argument callable returning ``(passed, detail)``.
Gradient checks are named ``grad:<op>`` after the primitive or loss they
exercise, so a broken backward rule shows up under its own name.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tape as T
from .diagnostics import verify_proposition_1, verify_proposition_2
from .icnn import MODES, IcnnConfig, icnn_score, icnn_task_loss
from .protonet import classify, compute_prototypes, cross_entropy
from .prototriplet import proto_triplet, proto_triplet_k, task_proto_triplet, TripletConfig
from .tape import finite_diff_check

GRAD_TOL = 1e-5


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _weighted(out: T.Tensor, seed: int = 99) -> T.Tensor:
    # random cotangent, so a rule that is only right for all-ones upstream still fails
    w = _rng(seed).uniform(0.5, 1.5, size=out.shape)
    return T.sum(T.multiply(out, w))


def _op_cases() -> dict[str, tuple[Callable, np.ndarray]]:
    r = _rng(1)
    x = r.normal(size=(3, 4))
    pos = r.uniform(0.5, 2.0, size=(3, 4))
    c = r.normal(size=(3, 4))
    row = r.normal(size=(4,))
    m = r.normal(size=(4, 2))
    b = r.normal(size=(5, 4))
    away = np.where(np.abs(x) < 0.1, 0.5, x)  # keep relu/maximum/sqrt inputs off their kinks
    return {
        "add": (lambda t: _weighted(T.add(T.add(t, c), T.add(row, t))), x),
        "subtract": (lambda t: _weighted(T.add(T.subtract(t, c), T.subtract(row, t))), x),
        "multiply": (lambda t: _weighted(T.add(T.multiply(t, c), T.multiply(t, t))), x),
        "divide": (lambda t: _weighted(T.add(T.divide(c, t), T.divide(t, pos))), pos),
        "scale": (lambda t: _weighted(T.scale(t, -2.5)), x),
        "matmul": (lambda t: T.add(_weighted(T.matmul(t, m)), _weighted(T.matmul(b[:2, :3], t))), x),
        "relu": (lambda t: _weighted(T.relu(t)), away),
        "exp": (lambda t: _weighted(T.exp(t)), x),
        "log": (lambda t: _weighted(T.log(t)), pos),
        "square": (lambda t: _weighted(T.square(t)), x),
        "sqrt": (lambda t: _weighted(T.sqrt(t)), pos),
        "sum": (lambda t: _weighted(T.add(T.sum(t, axis=0), T.sum(t, axis=1, keepdims=True))), x),
        "mean": (lambda t: _weighted(T.add(T.mean(t, axis=1, keepdims=True), T.mean(t))), x),
        "max": (lambda t: _weighted(T.max(t, axis=1)), x),
        "min": (lambda t: _weighted(T.min(t, axis=0)), x),
        "maximum": (lambda t: _weighted(T.maximum(t, 0.0)), away),
        "log_softmax": (lambda t: _weighted(T.log_softmax(t)), x),
        "gather": (lambda t: _weighted(T.gather(t, np.array([[2, 0], [2, 1]]))), x),
        "pairwise_sq_dist": (lambda t: T.add(_weighted(T.pairwise_sq_dist(t, b)), _weighted(T.pairwise_sq_dist(t, t))), x),
    }


# --- loss cases, shared with the acceptance tests ------------------------------

def _small_task(seed: int, ways: int = 3, shots: int = 2, queries: int = 2, dim: int = 3):
    r = _rng(seed)
    y_s = np.repeat(np.arange(ways), shots)
    y_q = np.repeat(np.arange(ways), queries)
    emb = r.normal(size=(y_s.size + y_q.size, dim))
    return emb, np.concatenate([y_s, y_q]), y_s.size


def loss_case(name: str, seed: int, mode: str = "full", variant: str = "") -> tuple[Callable, np.ndarray]:
    """Scalar loss as a function of a random embedding batch, selections frozen at the start point."""
    emb, y, n_s = _small_task(seed)
    ways = int(y.max()) + 1

    def split(t):
        support = T.gather(t, np.arange(n_s))
        query = T.gather(t, np.arange(n_s, t.shape[0]))
        return query, compute_prototypes(support, y[:n_s], ways)

    if name == "cross_entropy":
        def f(t):
            query, protos = split(t)
            return cross_entropy(classify(query, protos), y[n_s:])
    elif name == "proto_triplet":
        def f(t):
            query, protos = split(t)
            return proto_triplet(T.gather(query, np.array([0])), protos, int(y[n_s]), margin=2.0)
    elif name == "proto_triplet_k":
        def f(t):
            query, protos = split(t)
            return task_proto_triplet(query, protos, y[n_s:], TripletConfig(margin=2.0, k_negatives=2))
    elif name == "icnn":
        config = IcnnConfig(k_neighbors=2, mode=mode)
        if variant == "per_point":
            config = IcnnConfig(k_neighbors=2, mode=mode, variance_mode="per_point")
        elif variant == "original":
            config = IcnnConfig(k_neighbors=2, mode=mode, lambda_variant="original")
        frozen: dict = {}

        def f(t):
            _, protos = split(t)
            return icnn_task_loss(t, y, n_s, protos, config, frozen)
    else:
        raise KeyError(name)
    return f, emb


LOSS_CASES = (("cross_entropy", "proto_triplet", "proto_triplet_k")
              + tuple(f"icnn:{m}" for m in MODES) + ("icnn:full:per_point", "icnn:full:original"))


def loss_grad_error(case: str, seed: int) -> float:
    name, mode, variant = (case.split(":") + ["", ""])[:3]
    f, x = loss_case(name, seed, mode or "full", variant)
    return finite_diff_check(f, x)


def random_bounds_batch(seed: int):
    """ICNN terms of one random batch: 2-4 classes, 1-4 dims, scales from 1e-3 to 1e3."""
    r = _rng(seed)
    n_classes = int(r.integers(2, 5))
    labels = np.concatenate([np.arange(n_classes), r.integers(0, n_classes, size=int(r.integers(0, 12)))])
    emb = r.normal(size=(labels.size, int(r.integers(1, 5)))) * r.choice([1e-3, 1.0, 1e3])
    config = IcnnConfig(k_neighbors=int(r.integers(1, 6)), lambda_variant=str(r.choice(["split", "original"])))
    terms, _ = icnn_score(emb, labels, config)
    return terms


def bounds_violations(seeds) -> int:
    bad = 0
    for s in seeds:
        t = random_bounds_batch(s)
        bad += int(np.sum((t.lam < 0) | (t.lam > 2)))
        bad += int(np.sum((t.gamma < 0) | (t.gamma > 1)))
        bad += int(np.sum(t.omega < 0))
    return bad


def k1_instance(seed: int) -> tuple[float, float]:
    r = _rng(seed)
    n_protos, d = int(r.integers(2, 7)), int(r.integers(1, 6))
    protos = r.normal(size=(n_protos, d))
    query = r.normal(size=(1, d))
    true = int(r.integers(0, n_protos))
    margin = float(r.uniform(0, 3))
    return (float(proto_triplet(query, protos, true, margin).data),
            float(proto_triplet_k(query, protos, true, margin, k=1).data))


# --- registry ------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _grad_op(name: str) -> Callable:
    def run():
        f, x = _op_cases()[name]
        err = finite_diff_check(f, x)
        return err <= GRAD_TOL, f"max rel err {err:.2e}"
    return run


def _grad_loss(case: str, seeds=range(5)) -> Callable:
    def run():
        err = max(loss_grad_error(case, s) for s in seeds)
        return err <= GRAD_TOL, f"max rel err {err:.2e} over {len(seeds)} seeds"
    return run


def _bounds():
    n = 500
    bad = bounds_violations(range(n))
    return bad == 0, f"{bad} violations over {n} batches"


def _k1():
    n = 200
    diff = sum(a != b for a, b in (k1_instance(s) for s in range(n)))
    return diff == 0, f"{diff} mismatches over {n} instances"


def _prop(fn):
    def run():
        rep = fn(seed=0)
        a, b = rep.initial, rep.final
        return rep.passed, (f"inter {a['inter']:.3f}->{b['inter']:.3f} intra {a['intra']:.3f}->{b['intra']:.3f} "
                            f"var {a['var_sum']:.2e}->{b['var_sum']:.2e}")
    return run


def registry() -> dict[str, Callable]:
    checks: dict[str, Callable] = {f"grad:{op}": _grad_op(op) for op in _op_cases()}
    for case in LOSS_CASES:
        checks[f"grad:{case}"] = _grad_loss(case)
    checks["bounds"] = _bounds
    checks["k1_equivalence"] = _k1
    checks["prop1"] = _prop(verify_proposition_1)
    checks["prop2"] = _prop(verify_proposition_2)
    return checks


def run_checks(pattern: str | None = None) -> list[CheckResult]:
    results = []
    for name, fn in registry().items():
        if pattern and pattern not in name:
            continue
        start = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max([len(r.name) for r in results] + [5])
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
