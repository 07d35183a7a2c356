"""MLP embedding network, optimizers and checkpoint I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tape as T
from .tape import Tape, Tensor

CHECKPOINT_MAGIC = "ICNNMETRIC1"
DEFAULT_HIDDEN = (64, 64)
DEFAULT_OUT = 32


@dataclass
class MlpEncoder:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"W{i}", f"b{i}"]
        return names

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Leaf tensors for every parameter on ``tape``."""
        return {name: tape.variable(p) for name, p in self.params().items()}

    def copy(self) -> "MlpEncoder":
        return MlpEncoder(
            tuple(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def encoder_init(seed: int, layer_dims: Sequence[int]) -> MlpEncoder:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"layer_dims must have >= 2 positive entries, got {list(layer_dims)}")
    rng = np.random.Generator(np.random.Philox(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpEncoder(dims, weights, biases)


def encode(enc: MlpEncoder, batch, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Forward pass; relu on hidden layers, identity on the output layer.

    Pass ``params`` from :meth:`MlpEncoder.bind` to differentiate w.r.t. the
    weights; without it the weights enter as constants.
    """
    x = T.as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != enc.layer_dims[0]:
        raise T.ShapeError(
            f"encode: batch shape {x.shape} does not match input dim {enc.layer_dims[0]}"
        )
    if params is None:
        params = {k: Tensor(v) for k, v in enc.params().items()}
    n_layers = len(enc.weights)
    for i in range(n_layers):
        x = T.add(T.matmul(x, params[f"W{i}"]), params[f"b{i}"])
        if i < n_layers - 1:
            x = T.relu(x)
    return x


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def apply_update(enc: MlpEncoder, opt: OptimizerState, grads: Mapping[str, np.ndarray]) -> None:
    """One in-place optimizer step on every encoder parameter.

    sgd: ``v <- momentum * v + g; w <- w - lr * v``.
    adam: bias-corrected first and second moments.
    """
    params = enc.params()
    missing = [name for name in params if name not in grads]
    if missing:
        raise KeyError(f"apply_update: no gradient for parameters {missing}")
    opt.step_count += 1
    t = opt.step_count
    lr = opt.learning_rate
    for name, w in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != w.shape:
            raise T.ShapeError(f"apply_update: gradient {g.shape} vs parameter {w.shape} for {name}")
        if opt.kind == "sgd":
            v = opt.accumulators.get(name, np.zeros_like(w))
            v = opt.momentum * v + g
            opt.accumulators[name] = v
            w -= lr * v
        else:
            m = opt.accumulators.get(name + ".m", np.zeros_like(w))
            v = opt.accumulators.get(name + ".v", np.zeros_like(w))
            m = opt.beta1 * m + (1.0 - opt.beta1) * g
            v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
            opt.accumulators[name + ".m"] = m
            opt.accumulators[name + ".v"] = v
            m_hat = m / (1.0 - opt.beta1**t)
            v_hat = v / (1.0 - opt.beta2**t)
            w -= lr * m_hat / (np.sqrt(v_hat) + opt.epsilon)


def save_checkpoint(enc: MlpEncoder, path) -> None:
    lines = [CHECKPOINT_MAGIC, " ".join(str(d) for d in enc.layer_dims)]
    for w, b in zip(enc.weights, enc.biases):
        lines.append(" ".join(repr(float(v)) for v in w.ravel()))
        lines.append(" ".join(repr(float(v)) for v in b.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> MlpEncoder:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an encoder checkpoint (missing {CHECKPOINT_MAGIC} header)")
    dims = tuple(int(v) for v in lines[1].split())
    body = lines[2:]
    if len(body) != 2 * (len(dims) - 1):
        raise ValueError(f"{path}: expected {2 * (len(dims) - 1)} parameter lines, got {len(body)}")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = np.array([float(v) for v in body[2 * i].split()]).reshape(fan_in, fan_out)
        b = np.array([float(v) for v in body[2 * i + 1].split()]).reshape(fan_out)
        weights.append(w)
        biases.append(b)
    return MlpEncoder(dims, weights, biases)
