"""Masked affine/convolution layers, batch normalization and the two networks.

``DenseFC`` is the fully connected DenseNet used for MNIST: every hidden layer
sees the raw input concatenated with all earlier layers' outputs and adds
``growth`` features through masked affine -> BN -> ReLU.  ``MapFit`` is the
small 3×64 network for the output-fitting experiment.  Masked layers carry no
bias; the following BN supplies the shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import compute as C
from .compute import Graph, Node
from .errors import ConfigError, ContractError
from .gradnorm import per_sample_sq_sums_conv, per_sample_sq_sums_linear
from .masking import IDENTITY, MaskedParameter, SteKind, masked_weight, ste_proxy_gradient

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def he_init(shape, fan_in, seed=None):
    """Zero-mean normal samples with variance ``2 / fan_in`` (float32)."""
    if fan_in < 1:
        raise ContractError(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return (_rng(seed).standard_normal(shape) * std).astype(np.float32)


@dataclass
class Trace:
    """Graph nodes touched by one layer during the latest forward pass."""

    x: Node
    out: Node
    weight: Node
    mask: Node | None


class MaskedAffine:
    def __init__(self, param: MaskedParameter, name=""):
        if param.weight.ndim != 2:
            raise ContractError(f"affine weight must be 2-d, got {param.shape}")
        self.param = param
        self.name = name
        self.trace: Trace | None = None

    @property
    def fan_in(self):
        return self.param.shape[1]

    def forward(self, graph: Graph, x: Node, ste: SteKind = IDENTITY, use_mask=True) -> Node:
        w = graph.leaf(self.param.weight, name=f"{self.name}.weight")
        if use_mask:
            m = graph.leaf(self.param.mask, name=f"{self.name}.mask")
            w_eff = masked_weight(w, m, ste)
        else:
            m, w_eff = None, w
        y = C.linear(x, w_eff)
        self.trace = Trace(x, y, w, m)
        return y

    def per_sample_sq_sums(self, grads, ste: SteKind = IDENTITY, scale=1.0):
        """Per-feature squared sum of per-sample mask-gradient products from the last pass."""
        t = self.trace
        factor = self.param.weight
        if ste.name != "identity":
            factor = factor * ste_proxy_gradient(ste, self.param.mask)
        return per_sample_sq_sums_linear(t.x.value, grads[t.out], factor, scale)


class MaskedConv2D:
    def __init__(self, param: MaskedParameter, stride=1, padding=0, name=""):
        if param.weight.ndim != 4:
            raise ContractError(f"conv kernel must be 4-d, got {param.shape}")
        self.param = param
        self.stride = stride
        self.padding = padding
        self.name = name
        self.trace: Trace | None = None

    @property
    def fan_in(self):
        return int(np.prod(self.param.shape[1:]))

    def forward(self, graph: Graph, x: Node, ste: SteKind = IDENTITY, use_mask=True) -> Node:
        w = graph.leaf(self.param.weight, name=f"{self.name}.weight")
        if use_mask:
            m = graph.leaf(self.param.mask, name=f"{self.name}.mask")
            w_eff = masked_weight(w, m, ste)
        else:
            m, w_eff = None, w
        y = C.conv2d(x, w_eff, self.stride, self.padding)
        self.trace = Trace(x, y, w, m)
        return y

    def per_sample_sq_sums(self, grads, ste: SteKind = IDENTITY, scale=1.0):
        t = self.trace
        factor = self.param.weight
        if ste.name != "identity":
            factor = factor * ste_proxy_gradient(ste, self.param.mask)
        return per_sample_sq_sums_conv(
            t.x.value, grads[t.out], factor, self.stride, self.padding, scale
        )


# batch normalization ---------------------------------------------------------

def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ContractError(f"batch norm expects 2-d or 4-d input, got {x.shape}")


def batch_norm_forward(x, gamma, beta, eps=BN_EPS):
    """Training-mode transform with batch statistics; returns ``(y, cache)``."""
    axes, bshape = _bn_axes(x)
    if gamma.shape[0] != x.shape[1] or beta.shape[0] != x.shape[1]:
        raise ContractError(
            f"batch norm has {gamma.shape[0]} features but input {x.shape} has {x.shape[1]}"
        )
    mean = x.mean(axis=axes)
    centered = x - mean.reshape(bshape)
    var = (centered * centered).mean(axis=axes)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return y, (xhat, inv_std, gamma, axes, bshape, mean, var)


def batch_norm_backward(g, cache):
    xhat, inv_std, gamma, axes, bshape, _, _ = cache
    m = g.size // g.shape[1]
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * gamma.reshape(bshape)
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx.astype(g.dtype), dgamma, dbeta


def batch_norm(x: Node, gamma: Node, beta: Node, eps=BN_EPS):
    """Graph op; also returns the batch mean and biased variance."""
    y, cache = batch_norm_forward(x.value, gamma.value, beta.value, eps)
    node = x.graph.record("batch_norm", (x, gamma, beta), y, lambda g: batch_norm_backward(g, cache))
    return node, cache[5], cache[6]


def batch_norm_eval(x: Node, gamma: Node, beta: Node, mean, var, eps=BN_EPS):
    _, bshape = _bn_axes(x.value)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.value.dtype)
    xhat = (x.value - mean.reshape(bshape)) * inv_std.reshape(bshape)
    scale = (gamma.value * inv_std).reshape(bshape)
    y = xhat * gamma.value.reshape(bshape) + beta.value.reshape(bshape)
    axes, _ = _bn_axes(x.value)

    def grad_fn(g):
        return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return x.graph.record("batch_norm_eval", (x, gamma, beta), y, grad_fn)


class BatchNorm:
    def __init__(self, features, momentum=BN_MOMENTUM, eps=BN_EPS, name=""):
        self.gamma = np.ones(features, dtype=np.float32)
        self.beta = np.zeros(features, dtype=np.float32)
        self.running_mean = np.zeros(features, dtype=np.float32)
        self.running_var = np.ones(features, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma_node: Node | None = None
        self.beta_node: Node | None = None

    @property
    def features(self):
        return self.gamma.shape[0]

    def forward(self, graph: Graph, x: Node, training=True, track_stats=True) -> Node:
        if x.value.shape[1] != self.features:
            raise ContractError(
                f"{self.name or 'batch norm'}: expected {self.features} features, got input {x.shape}"
            )
        self.gamma_node = graph.leaf(self.gamma, name=f"{self.name}.gamma")
        self.beta_node = graph.leaf(self.beta, name=f"{self.name}.beta")
        if not training:
            return batch_norm_eval(
                x, self.gamma_node, self.beta_node, self.running_mean, self.running_var, self.eps
            )
        y, mean, var = batch_norm(x, self.gamma_node, self.beta_node, self.eps)
        if track_stats:
            n = x.value.size // self.features
            unbiased = var * (n / max(n - 1, 1))
            mom = np.float32(self.momentum)
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(np.float32)
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(np.float32)
        return y


# networks --------------------------------------------------------------------

class Network:
    """Common surface of the two architectures."""

    arch = ""
    masked: list
    norms: list

    def hyperparameters(self) -> dict:
        raise NotImplementedError

    def forward(self, graph, x, training=True, ste=IDENTITY, use_mask=True, track_stats=True):
        raise NotImplementedError

    @property
    def params(self):
        return [layer.param for layer in self.masked]

    @property
    def total_masked_weights(self):
        return sum(p.size for p in self.params)

    def predict(self, x, chunk=1000):
        """Eval-mode outputs as a numpy array."""
        x = np.asarray(x, dtype=np.float32)
        outs = []
        for start in range(0, len(x), chunk):
            g = Graph()
            outs.append(self.forward(g, g.leaf(x[start:start + chunk]), training=False).value)
        return np.concatenate(outs)

    def state_dict(self) -> dict:
        state = {}
        for i, layer in enumerate(self.masked):
            state[f"masked.{i}.weight"] = layer.param.weight
            state[f"masked.{i}.mask"] = layer.param.mask
        for i, bn in enumerate(self.norms):
            for key in ("gamma", "beta", "running_mean", "running_var"):
                state[f"bn.{i}.{key}"] = getattr(bn, key)
        return state

    def load_state_dict(self, state):
        for i, layer in enumerate(self.masked):
            w = np.asarray(state[f"masked.{i}.weight"], dtype=np.float32)
            m = np.asarray(state[f"masked.{i}.mask"], dtype=np.float32)
            if w.shape != layer.param.shape:
                raise ContractError(f"masked layer {i}: stored shape {w.shape} != {layer.param.shape}")
            layer.param.weight = w.copy()
            layer.param.mask = m.copy()
        for i, bn in enumerate(self.norms):
            for key in ("gamma", "beta", "running_mean", "running_var"):
                setattr(bn, key, np.asarray(state[f"bn.{i}.{key}"], dtype=np.float32).copy())


class DenseFC(Network):
    arch = "dense_fc"

    def __init__(self, depth=16, growth=8, input_dim=784, classes=10, seed=0, mask_init=1.0):
        rng = _rng(seed)
        self.depth, self.growth, self.input_dim, self.classes = depth, growth, input_dim, classes
        self.blocks = []
        for l in range(depth):
            fan_in = input_dim + growth * l
            w = he_init((growth, fan_in), fan_in, rng)
            p = MaskedParameter(w, np.full(w.shape, mask_init, dtype=np.float32))
            self.blocks.append(
                (MaskedAffine(p, name=f"dense{l + 1}"), BatchNorm(growth, name=f"bn{l + 1}"))
            )
        fan_in = input_dim + growth * depth
        w = he_init((classes, fan_in), fan_in, rng)
        self.classifier = MaskedAffine(
            MaskedParameter(w, np.full(w.shape, mask_init, dtype=np.float32)), name="classifier"
        )
        self.masked = [aff for aff, _ in self.blocks] + [self.classifier]
        self.norms = [bn for _, bn in self.blocks]

    def hyperparameters(self):
        return dict(depth=self.depth, growth=self.growth, input_dim=self.input_dim, classes=self.classes)

    def forward(self, graph, x, training=True, ste=IDENTITY, use_mask=True, track_stats=True):
        features = [x]
        for affine, bn in self.blocks:
            inp = features[0] if len(features) == 1 else C.concat(features, axis=1)
            h = affine.forward(graph, inp, ste, use_mask)
            h = C.relu(bn.forward(graph, h, training, track_stats))
            features.append(h)
        return self.classifier.forward(graph, C.concat(features, axis=1), ste, use_mask)


class MapFit(Network):
    arch = "mapfit"

    def __init__(self, width=64, layers=3, seed=0):
        rng = _rng(seed)
        self.width, self.layers = width, layers
        self.blocks = []
        for l in range(layers):
            w = he_init((width, width), width, rng)
            m = rng.standard_normal((width, width)).astype(np.float32)
            self.blocks.append(
                (MaskedAffine(MaskedParameter(w, m), name=f"fc{l + 1}"), BatchNorm(width, name=f"bn{l + 1}"))
            )
        self.masked = [aff for aff, _ in self.blocks]
        self.norms = [bn for _, bn in self.blocks]

    def hyperparameters(self):
        return dict(width=self.width, layers=self.layers)

    def forward(self, graph, x, training=True, ste=IDENTITY, use_mask=True, track_stats=True):
        h = x
        for affine, bn in self.blocks:
            h = C.relu(bn.forward(graph, affine.forward(graph, h, ste, use_mask), training, track_stats))
        return h


ARCHITECTURES = {"dense_fc": DenseFC, "mapfit": MapFit}


def build_network(arch, seed=0, **kwargs) -> Network:
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}") from None
    return cls(seed=seed, **kwargs)


def build_dense_fc(depth=16, growth=8, input_dim=784, classes=10, seed=0, mask_init=1.0) -> DenseFC:
    return DenseFC(depth, growth, input_dim, classes, seed, mask_init)


def build_mapfit(width=64, layers=3, seed=0) -> MapFit:
    return MapFit(width, layers, seed)
