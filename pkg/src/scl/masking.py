"""Binary-mask re-parameterization of weights and its relaxed gradients.

Every prunable weight tensor is stored as a weight variable ``w̃`` and a mask
variable ``m̃`` of the same shape.  The forward pass uses
``w = w̃ * H(m̃)`` with ``H`` the unit step (zero at the origin).  In the
backward pass the weight variable receives ``dL/dw`` unchanged, so pruned
weights keep training, and the mask variable receives
``dL/dw * w̃ * proxy(m̃)`` where ``proxy`` is the derivative of a
straight-through surrogate for ``H``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compute import Node
from .errors import ConfigError, ContractError, ShapeError

STE_NAMES = ("relu", "clipped_relu", "leaky_relu", "softplus", "identity")
DEFAULT_ALPHA = {"clipped_relu": 1.0, "leaky_relu": 0.01}


@dataclass(frozen=True)
class SteKind:
    """Which surrogate derivative replaces the unit step's zero gradient."""

    name: str = "identity"
    alpha: float | None = None

    def __post_init__(self):
        if self.name not in STE_NAMES:
            raise ConfigError(f"unknown STE {self.name!r}; expected one of {', '.join(STE_NAMES)}")
        if self.name in DEFAULT_ALPHA:
            if self.alpha is None:
                object.__setattr__(self, "alpha", DEFAULT_ALPHA[self.name])
            a = self.alpha
            if self.name == "clipped_relu" and not a > 0:
                raise ConfigError(f"clipped_relu needs alpha > 0, got {a}")
            if self.name == "leaky_relu" and not 0 < a < 1:
                raise ConfigError(f"leaky_relu needs 0 < alpha < 1, got {a}")
        elif self.alpha is not None:
            raise ConfigError(f"STE {self.name!r} takes no alpha")

    @classmethod
    def parse(cls, text: str) -> "SteKind":
        """``"identity"``, ``"leaky_relu"`` or ``"leaky_relu:0.05"``."""
        name, _, alpha = text.strip().lower().replace("-", "_").partition(":")
        return cls(name, float(alpha) if alpha else None)

    def __str__(self):
        return self.name if self.alpha is None else f"{self.name}:{self.alpha:g}"


IDENTITY = SteKind()


@dataclass
class MaskedParameter:
    weight: np.ndarray
    mask: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        if self.weight.shape != self.mask.shape:
            raise ShapeError(
                f"weight variable {self.weight.shape} and mask variable "
                f"{self.mask.shape} must have the same shape"
            )

    @property
    def shape(self):
        return self.weight.shape

    @property
    def size(self):
        return self.weight.size


def unit_step(m):
    m = np.asarray(m)
    return (m > 0).astype(m.dtype if np.issubdtype(m.dtype, np.floating) else np.float32)


def effective_weight(p: MaskedParameter) -> np.ndarray:
    # np.where keeps pruned entries at +0.0 so densified sparse records match bitwise
    return np.where(p.mask > 0, p.weight, 0).astype(p.weight.dtype)


def ste_proxy_gradient(kind: SteKind, m):
    m = np.asarray(m)
    dtype = m.dtype if np.issubdtype(m.dtype, np.floating) else np.float32
    name, a = kind.name, kind.alpha
    if name == "identity":
        out = np.ones_like(m, dtype=dtype)
    elif name == "relu":
        out = (m > 0).astype(dtype)
    elif name == "clipped_relu":
        out = ((m > 0) & (m < a)).astype(dtype)
    elif name == "leaky_relu":
        out = np.where(m > 0, 1.0, a).astype(dtype)
    elif name == "softplus":
        # logistic, split by sign to avoid overflow in exp
        e = np.exp(-np.abs(m.astype(np.float64)))
        out = np.where(m >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dtype)
    else:  # pragma: no cover - guarded by SteKind
        raise ConfigError(name)
    return out


def _check_grad(grad_w, p):
    if grad_w.shape != p.shape:
        raise ContractError(f"gradient shape {grad_w.shape} does not match parameter {p.shape}")


def weight_variable_gradient(grad_w, p: MaskedParameter):
    """``dL/dw̃`` is taken to be ``dL/dw``; the mask factor is dropped on purpose."""
    grad_w = np.asarray(grad_w)
    _check_grad(grad_w, p)
    return grad_w


def mask_variable_gradient(grad_w, p: MaskedParameter, kind: SteKind = IDENTITY):
    grad_w = np.asarray(grad_w)
    _check_grad(grad_w, p)
    g = grad_w * p.weight
    if kind.name == "identity":
        return g
    return g * ste_proxy_gradient(kind, p.mask)


def toy_mask_loss_gradient(m, m_star, kind: SteKind = IDENTITY):
    """Gradient of ``0.5 * (H(m̃) - m*)**2`` with the STE proxy standing in for ``H'``."""
    m = np.asarray(m, dtype=np.float64)
    m_star = np.asarray(m_star)
    if not np.isin(m_star, (0, 1)).all():
        raise ContractError("target mask must contain only 0 and 1")
    return ste_proxy_gradient(kind, m) * (unit_step(m) - m_star)


def masked_weight(w: Node, m: Node, kind: SteKind = IDENTITY) -> Node:
    """Record ``w̃ * H(m̃)`` in the graph with the relaxed gradients as a hook.

    The plain chain rule (kept as the node's ``backward_fn``) would give
    ``dL/dw * H(m̃)`` to the weight and zero to the mask.
    """
    wv, mv = w.value, m.value
    binary = unit_step(mv).astype(wv.dtype)
    out = np.where(mv > 0, wv, 0).astype(wv.dtype)

    def chain_rule(g):
        return g * binary, np.zeros_like(mv)

    def relaxed(g):
        gm = g * wv
        if kind.name != "identity":
            gm = gm * ste_proxy_gradient(kind, mv)
        return g, gm

    return w.graph.record("masked_weight", (w, m), out, chain_rule, hook=relaxed)


@dataclass
class SparseRecord:
    """Surviving entries of one masked tensor, row-major linear indices ascending."""

    shape: tuple
    indices: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def density(self):
        return len(self.indices) / self.size

    def densify(self) -> np.ndarray:
        out = np.zeros(self.size, dtype=np.float32)
        out[self.indices] = self.values
        return out.reshape(self.shape)


def extract_sparse(p: MaskedParameter) -> SparseRecord:
    flat_mask = p.mask.reshape(-1)
    idx = np.flatnonzero(flat_mask > 0).astype(np.int64)
    vals = p.weight.reshape(-1)[idx].astype(np.float32)
    return SparseRecord(tuple(int(s) for s in p.shape), idx, vals)
