"""Per-feature rescaling of mask gradients to unit mini-batch RMS.

A *feature* is one output neuron (its fan-in row of an affine weight) or one
output channel (its kernel of a convolution).  For feature ``j`` the
per-sample mask-gradient products ``g_b,k = dL(x_b)/dw_k * w̃_k`` are squared
and averaged over the batch and the feature's weights; the batch mask
gradient is divided by the root of that mean.  The rescaling is a positive
scalar per feature, so signs never change.  The constant gradient of the
connectivity penalty is added afterwards and never rescaled.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

EPS = 1e-8


def gradient_scale(per_sample_sq_sum, batch_size, feature_weight_count):
    sq = np.asarray(per_sample_sq_sum, dtype=np.float64)
    if np.any(sq < 0):
        raise ContractError("per-sample squared sum must be non-negative")
    if batch_size < 1 or feature_weight_count < 1:
        raise ContractError(
            f"batch_size and feature_weight_count must be >= 1, got {batch_size}, {feature_weight_count}"
        )
    return np.sqrt(sq / (batch_size * feature_weight_count))


def normalize_mask_gradients(task_grad, per_sample_sq_sum, batch_size, feature_weight_count, eps=EPS):
    """Divide one feature's mask gradient by its per-sample RMS ``s`` (plus ``eps``)."""
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    task_grad = np.asarray(task_grad)
    s = gradient_scale(per_sample_sq_sum, batch_size, feature_weight_count)
    return (task_grad / (s + eps)).astype(task_grad.dtype)


def normalize_by_feature(task_grad, sq_sums, batch_size, eps=EPS):
    """Vectorized form: axis 0 of ``task_grad`` indexes features, ``sq_sums`` has one entry each."""
    task_grad = np.asarray(task_grad)
    per_feature = int(np.prod(task_grad.shape[1:])) if task_grad.ndim > 1 else 1
    s = gradient_scale(sq_sums, batch_size, per_feature)
    s = s.reshape((-1,) + (1,) * (task_grad.ndim - 1))
    return (task_grad / (s + eps)).astype(task_grad.dtype)


def batch_sq_sums(task_grad):
    """Per-feature squared sum of an aggregated gradient, for treating the batch as one sample."""
    g = np.asarray(task_grad, dtype=np.float64)
    return (g * g).reshape(len(g), -1).sum(axis=1)


def apply_decay_after_norm(normalized, lambda1, frozen=None):
    """Add the connectivity-decay gradient ``lambda1`` to every unfrozen element."""
    if lambda1 < 0:
        raise ContractError(f"lambda1 must be >= 0, got {lambda1}")
    normalized = np.asarray(normalized)
    shift = np.asarray(lambda1, dtype=normalized.dtype)
    if frozen is None:
        return normalized + shift
    return np.where(frozen, normalized, normalized + shift).astype(normalized.dtype)


def per_sample_products_linear(x, delta, factor, scale=1.0):
    """Explicit B×out×in tensor of per-sample mask-gradient products.

    Memory grows with the batch; used for small layers and as a check on
    :func:`per_sample_sq_sums_linear`.
    """
    return scale * delta[:, :, None] * x[:, None, :] * factor[None]


def per_sample_sq_sums_linear(x, delta, factor, scale=1.0):
    """Per-output-feature ``sum_b sum_k (scale * delta_bj * x_bk * factor_jk)**2``.

    ``x`` is the layer input (B×in), ``delta`` the gradient at the layer
    output (B×out) and ``factor`` is ``w̃`` times the STE proxy (out×in).
    """
    sq = (delta * delta).T @ (x * x)
    return (scale * scale) * np.einsum("jk,jk->j", sq, factor * factor)


def per_sample_sq_sums_conv(x, delta, factor, stride=1, padding=0, scale=1.0):
    """Same statistic for a convolution, from per-sample kernel gradients."""
    f, c, kh, kw = factor.shape
    out = np.zeros(f, dtype=np.float64)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = delta.shape[2:]
    for b in range(x.shape[0]):
        gw = np.empty(factor.shape, dtype=np.float64)
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[b, ci, i:i + stride * ho:stride, j:j + stride * wo:stride]
                    gw[:, ci, i, j] = np.einsum("fhw,hw->f", delta[b], patch)
        prod = scale * gw * factor
        out += (prod * prod).reshape(f, -1).sum(axis=1)
    return out

