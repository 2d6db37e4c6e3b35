"""Dense float64 primitives with hand-written gradients.

Every matrix is a 2-D ``numpy.ndarray`` of dtype float64 with the batch on
the leading axis. Backward functions take the cached forward inputs and an
upstream gradient and return exact analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-7


class DimensionError(ValueError):
    pass


class OutOfRangeError(IndexError):
    pass


class TrainingError(RuntimeError):
    pass


class OracleError(RuntimeError):
    pass


def as_matrix(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# linear layers


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2:
        raise DimensionError(f"linear: x {x.shape} and W {W.shape} must both be 2-D")
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: x has width {x.shape[1]} but W has {W.shape[0]} rows")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"linear: b has shape {b.shape}, expected ({W.shape[1]},)")
    return x @ W + b


def linear_backward(x: np.ndarray, W: np.ndarray, upstream: np.ndarray):
    """Gradients of ``x @ W + b`` given the forward inputs and dL/dout.

    Returns ``(grad_x, grad_W, grad_b)``.
    """
    if upstream.shape != (x.shape[0], W.shape[1]):
        raise DimensionError(
            f"linear backward: upstream {upstream.shape} does not match output "
            f"({x.shape[0]}, {W.shape[1]})"
        )
    return upstream @ W.T, x.T @ upstream, upstream.sum(axis=0)


# --------------------------------------------------------------------------
# embeddings


def embedding_forward(
    tables: Sequence[np.ndarray],
    indices: np.ndarray,
    field_names: Sequence[str] | None = None,
) -> np.ndarray:
    """Look up one row per field and concatenate them in field order."""
    indices = np.asarray(indices)
    if indices.ndim != 2 or indices.shape[1] != len(tables):
        raise DimensionError(
            f"embedding: indices shape {indices.shape} does not match {len(tables)} tables"
        )
    names = field_names or [f"field{f}" for f in range(len(tables))]
    parts = []
    for f, table in enumerate(tables):
        ids = indices[:, f]
        bad = (ids < 0) | (ids >= table.shape[0])
        if bad.any():
            raise OutOfRangeError(
                f"embedding: id {int(ids[bad][0])} out of range for field "
                f"'{names[f]}' with cardinality {table.shape[0]}"
            )
        parts.append(table[ids])
    if not parts:
        return np.zeros((indices.shape[0], 0))
    return np.concatenate(parts, axis=1)


def embedding_backward(
    tables: Sequence[np.ndarray], indices: np.ndarray, upstream: np.ndarray
) -> list[np.ndarray]:
    """Scatter-add upstream rows back into per-field table gradients."""
    grads = []
    col = 0
    for f, table in enumerate(tables):
        dim = table.shape[1]
        g = np.zeros_like(table)
        # np.add.at accumulates repeated ids in index order.
        np.add.at(g, indices[:, f], upstream[:, col : col + dim])
        grads.append(g)
        col += dim
    return grads


# --------------------------------------------------------------------------
# activations

ACTIVATIONS = ("relu", "sigmoid", "identity")


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return np.array(x, dtype=np.float64, copy=True)
    raise ValueError(f"unknown activation '{kind}'")


def activation_backward(pre: np.ndarray, out: np.ndarray, upstream: np.ndarray, kind: str):
    if kind == "relu":
        return upstream * (pre > 0)
    if kind == "sigmoid":
        return upstream * out * (1.0 - out)
    if kind == "identity":
        return upstream
    raise ValueError(f"unknown activation '{kind}'")


def clamp_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def prob_from_logit(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid followed by the log-safe clamp.

    Returns ``(raw, clamped)``; the raw value is kept for the backward pass.
    """
    raw = sigmoid(z)
    return raw, clamp_prob(raw)


def prob_backward(raw: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """dL/dz given dL/d(clamped prob). The clamp has zero slope outside its range."""
    inside = (raw >= PROB_EPS) & (raw <= 1.0 - PROB_EPS)
    return upstream * raw * (1.0 - raw) * inside


# --------------------------------------------------------------------------
# softmax


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return p * (upstream - (upstream * p).sum(axis=-1, keepdims=True))


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    name: str = "param",
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError(
            f"adam: '{name}' param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite gradient for parameter '{name}'")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_param, AdamState(m, v, t)


# --------------------------------------------------------------------------
# finite differences


def finite_diff_grad(
    objective: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    names: Sequence[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``objective`` for each named array.

    Arrays are perturbed in place and restored, so ``objective`` must read
    them from the dict it is given.
    """
    out = {}
    for name in names if names is not None else list(params):
        arr = params[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = objective(params)
            flat[i] = orig - eps
            fm = objective(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise OracleError(f"objective is not finite while perturbing {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))
