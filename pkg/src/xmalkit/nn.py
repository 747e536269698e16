"""Small float64 neural-network numerics: dense layers, softmax, BCE, Adam/SGD.

Gradients are hand-derived for the fixed attention + MLP architecture, so there
is no autograd graph here, only the pieces it is assembled from.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, ...)."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ContractError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ContractError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 10
    batch_size: int = 20
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.seed < 0:
            raise ContractError("seed must be unsigned")


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p, dtype=np.float64) for p in params],
            second_moment=[np.zeros_like(p, dtype=np.float64) for p in params],
        )


def glorot_layer(in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True) -> DenseLayer:
    """Uniform fan-based init in +-sqrt(6 / (in + out)); biases start at zero."""
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return DenseLayer(w, np.zeros(out_dim))


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Apply the layer to one vector (in,) or a batch (B, in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ContractError(f"input length {x.shape[-1]} != layer in-dimension {layer.in_dim}")
    return x @ layer.weights.T + layer.bias


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ContractError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # branch on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def sigmoid_bce_loss(logit, label):
    """Binary cross-entropy on a raw logit.

    Returns ``(loss, dloss/dlogit)``. Works elementwise on arrays; the loss is
    ``softplus(z) - y*z`` which stays finite for large ``|z|``.
    """
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ContractError("logit must be finite")
    loss = np.logaddexp(0.0, z) - y * z
    grad = sigmoid(z) - y
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def _check_shapes(params, grads):
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              learning_rate: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` and ``state`` in place."""
    _check_shapes(params, grads)
    _check_shapes(state.first_moment, grads)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], learning_rate: float) -> None:
    _check_shapes(params, grads)
    for p, g in zip(params, grads):
        p -= learning_rate * g


class GradCheckError(RuntimeError):
    pass


def grad_check(loss_and_grad: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
               params: Sequence[np.ndarray], h: float = 1e-5, floor: float = 1e-6,
               indices: dict[int, np.ndarray] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` must return ``(loss, grads)``. The step for each
    coordinate is ``h * max(1, |p|)``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps exactly-zero gradients
    from producing 0/0 and sits above the ~1e-11 roundoff of a central
    difference at the default step, so tiny gradients are judged absolutely.
    ``indices`` optionally restricts the check to selected flat positions per
    parameter array.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    loss0, analytic = loss_and_grad(params)
    if not np.isfinite(loss0):
        raise GradCheckError(f"loss is not finite: {loss0}")
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        grad_flat = np.asarray(analytic[k], dtype=np.float64).reshape(-1)
        positions = range(flat.size) if indices is None or k not in indices else indices[k]
        for i in positions:
            old = flat[i]
            step = h * max(1.0, abs(old))
            flat[i] = old + step
            up, _ = loss_and_grad(params)
            flat[i] = old - step
            down, _ = loss_and_grad(params)
            flat[i] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite loss while perturbing parameter {k}[{i}]")
            numeric = (up - down) / (2.0 * step)
            a = grad_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
