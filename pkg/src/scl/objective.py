"""Training objective: task loss plus connectivity decay plus L2 on weight variables."""

from __future__ import annotations

import numpy as np

from .compute import Node
from .errors import ContractError


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy_value(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = _check_labels(labels, logits.shape[1])
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def cross_entropy(logits: Node, labels) -> Node:
    """Mean softmax cross-entropy over the batch, recorded as a single node."""
    z = logits.value
    labels = _check_labels(labels, z.shape[1])
    n = z.shape[0]
    logp = _log_softmax(z)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=z.dtype)

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return ((g / n) * d).astype(z.dtype),

    return logits.graph.record("cross_entropy", (logits,), loss, grad_fn)


def mse(pred: Node, target) -> Node:
    """Mean squared error against a constant target."""
    p = pred.value
    target = np.asarray(target, dtype=p.dtype)
    if target.shape != p.shape:
        raise ContractError(f"target shape {target.shape} does not match prediction {p.shape}")
    diff = p - target
    loss = np.asarray((diff * diff).mean(), dtype=p.dtype)
    return pred.graph.record(
        "mse", (pred,), loss, lambda g: ((2.0 / diff.size) * g * diff,)
    )


def connectivity_degree(masks) -> int:
    """Number of surviving connections across a list of binary masks."""
    total = 0
    for m in masks:
        m = np.asarray(m)
        if not np.isin(m, (0, 1)).all():
            raise ContractError("connectivity_degree expects {0,1}-valued masks")
        total += int(np.count_nonzero(m))
    return total


def l2_penalty(weight_variables) -> float:
    return float(sum(np.sum(np.square(w, dtype=np.float64)) for w in weight_variables))


def total_objective(task, degree, l2, lambda1, lambda2) -> float:
    if lambda1 < 0 or lambda2 < 0:
        raise ContractError(f"coefficients must be >= 0, got lambda1={lambda1}, lambda2={lambda2}")
    return task + lambda1 * degree + lambda2 * l2
