"""Sparse connectivity training loop, metrics over masks, and the map-fit driver.

One SGD step:

1. forward with ``w = w̃ * H(m̃)`` in every masked layer;
2. backward; the masked-weight hook hands ``dL/dw`` to ``w̃`` and
   ``dL/dw * w̃ * proxy`` to ``m̃``;
3. mask gradients, summed over the batch, are rescaled per feature to unit
   RMS (when enabled), then the connectivity-decay constant ``lambda1`` is
   added;
4. weight variables get ``2 * lambda2 * w̃`` added and everything moves by
   ``-lr * grad``.  Mask variables stay put during freeze windows.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from .compute import Graph
from .data import MNIST, batches, gen_mapping_inputs
from .errors import ConfigError, ContractError, TrainingDiverged
from .gradnorm import EPS, batch_sq_sums, normalize_by_feature
from .layers import DenseFC, Network, build_mapfit, build_network
from .masking import IDENTITY, STE_NAMES, SteKind, ste_proxy_gradient, unit_step
from .objective import connectivity_degree, cross_entropy, l2_penalty, mse, total_objective

log = logging.getLogger(__name__)

MNIST_SCHEDULE = ((0, 0.1), (45, 0.01))
MNIST_FREEZE = ((0, 15), (45, 60))
NORM_STATS = ("batch", "per_sample")


@dataclass
class TrainConfig:
    arch: str = "dense_fc"
    lambda1: float = 0.0
    lambda2: float = 1e-4
    epochs: int = 60
    batch_size: int = 64
    lr_schedule: tuple = MNIST_SCHEDULE
    mask_freeze: tuple = MNIST_FREEZE
    seed: int = 0
    ste: str = "identity"
    gradnorm: bool = True
    # where the normalization scale comes from, see mask_task_gradients
    norm_stat: str = "batch"
    momentum: float = 0.0
    mask_init: float = 1.0
    # False trains the same network with plain (unmasked) weights
    masked: bool = True
    # 0 means the whole split
    train_limit: int = 0
    test_limit: int = 0

    def __post_init__(self):
        self.lr_schedule = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        self.mask_freeze = tuple((int(a), int(b)) for a, b in self.mask_freeze)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ConfigError("lr_schedule must start at epoch 0")
        starts = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"lr_schedule epochs must be strictly increasing, got {starts}")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("learning rates must be positive")
        for a, b in self.mask_freeze:
            if not 0 <= a < b <= self.epochs:
                raise ConfigError(f"mask_freeze range [{a}, {b}) outside [0, {self.epochs})")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.norm_stat not in NORM_STATS:
            raise ConfigError(f"norm_stat must be one of {NORM_STATS}, got {self.norm_stat!r}")
        if self.mask_init <= 0 and self.masked:
            raise ConfigError("mask variables must start positive")
        SteKind.parse(self.ste)

    @property
    def ste_kind(self) -> SteKind:
        return SteKind.parse(self.ste)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    def masks_frozen(self, epoch: int) -> bool:
        return (not self.masked) or any(a <= epoch < b for a, b in self.mask_freeze)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        d["mask_freeze"] = [list(x) for x in self.mask_freeze]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; valid keys: {sorted(names)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    task_loss: float
    degree: int
    sparsity: float
    metric: float


@dataclass
class RunHistory:
    records: list = field(default_factory=list)

    COLUMNS = ("epoch", "objective", "task_loss", "degree", "sparsity", "metric")

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name):
        return [getattr(r, name) for r in self.records]


# metrics over masks ------------------------------------------------------------

def binary_masks(network: Network):
    return [unit_step(p.mask) for p in network.params]


def degree(network: Network) -> int:
    return connectivity_degree(binary_masks(network))


def sparsity(network: Network) -> float:
    return 1.0 - degree(network) / network.total_masked_weights


def density_profile(network: Network) -> list:
    return [float(np.count_nonzero(p.mask > 0)) / p.size for p in network.params]


def input_connection_heatmap(network: Network, side=28) -> np.ndarray:
    """Binary connections touching each input pixel, summed over layers and scaled to [0, 1]."""
    if not isinstance(network, DenseFC) or network.input_dim != side * side:
        raise ContractError("input connection heatmap needs a DenseFC network on square images")
    counts = np.zeros(network.input_dim, dtype=np.float64)
    for p in network.params:
        counts += (p.mask[:, : network.input_dim] > 0).sum(axis=0)
    peak = counts.max()
    if peak > 0:
        counts /= peak
    return counts.reshape(side, side)


# optimisation ------------------------------------------------------------------

def sgd_step(params, grads, lr, velocities=None, momentum=0.0):
    """Plain SGD (optionally heavy-ball momentum).  Returns new arrays."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if momentum and velocities is not None:
            velocities[i] = (momentum * velocities[i] + g).astype(g.dtype)
            g = velocities[i]
        out.append((p - np.asarray(lr, dtype=p.dtype) * g).astype(p.dtype))
    return out


def mask_task_gradients(network: Network, grads, batch_size, normalize: bool, stat="batch"):
    """Task-loss mask gradients per masked layer, rescaled per feature if requested.

    The loss is a batch mean, so a sample's own gradient is ``batch_size``
    times its share of the batch gradient, and the task gradient is the sum
    of those.  ``stat`` picks the scale it is divided by:

    * ``"batch"``: RMS of the summed gradient itself, so every feature's
      update has unit RMS in each mini-batch;
    * ``"per_sample"``: RMS over every sample's own gradient products.

    The scale is measured on ``dL/dw * w̃`` without the STE proxy, so masks
    sitting in a proxy dead zone do not inflate the rest of their feature.
    """
    if stat not in NORM_STATS:
        raise ContractError(f"unknown normalization statistic {stat!r}")
    scale = np.float32(batch_size)
    out = []
    for layer in network.masked:
        g = grads[layer.trace.mask] * scale
        if normalize and stat == "per_sample":
            sq = layer.per_sample_sq_sums(grads, IDENTITY, scale=float(batch_size))
            g = normalize_by_feature(g, sq, batch_size, EPS)
        elif normalize:
            sq = batch_sq_sums(grads[layer.trace.weight] * layer.param.weight * scale)
            g = normalize_by_feature(g, sq, 1, EPS)
        out.append(g)
    return out


def _check_finite(value, epoch, batch):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


def train_step(network: Network, xb, yb, config: TrainConfig, lr, update_masks, velocities):
    """One mini-batch update.  Returns ``(task_loss, objective)`` before the update."""
    ste = config.ste_kind
    g = Graph()
    logits = network.forward(g, g.leaf(xb), training=True, ste=ste, use_mask=config.masked)
    loss = cross_entropy(logits, yb)
    grads = C.backward(g, loss)
    task = float(loss.value)

    params = network.params
    deg = degree(network) if config.masked else network.total_masked_weights
    obj = total_objective(task, deg, l2_penalty(p.weight for p in params), config.lambda1, config.lambda2)

    weights = [p.weight for p in params]
    wgrads = []
    for layer, p in zip(network.masked, params):
        gw = grads[layer.trace.weight]
        if config.lambda2:
            gw = gw + np.float32(2 * config.lambda2) * p.weight
        wgrads.append(gw)
    bn_params = [a for bn in network.norms for a in (bn.gamma, bn.beta)]
    bn_grads = [grads[n] for bn in network.norms for n in (bn.gamma_node, bn.beta_node)]

    arrays, agrads = weights + bn_params, wgrads + bn_grads
    if update_masks:
        mgrads = mask_task_gradients(network, grads, len(yb), config.gradnorm, config.norm_stat)
        for p, gm in zip(params, mgrads):
            decay = np.float32(config.lambda1)
            if ste.name != "identity":
                decay = decay * ste_proxy_gradient(ste, p.mask)
            arrays.append(p.mask)
            agrads.append(gm + decay)

    new = sgd_step(arrays, agrads, lr, velocities, config.momentum)
    k = len(params)
    for p, w in zip(params, new[:k]):
        p.weight = w
    for i, bn in enumerate(network.norms):
        bn.gamma, bn.beta = new[k + 2 * i], new[k + 2 * i + 1]
    if update_masks:
        for p, m in zip(params, new[k + 2 * len(network.norms):]):
            p.mask = m
    return task, obj


def _velocity_store(network, config):
    if not config.momentum:
        return None
    shapes = [p.shape for p in network.params] + [a.shape for bn in network.norms for a in (bn.gamma, bn.beta)]
    shapes += [p.shape for p in network.params]
    return [np.zeros(s, dtype=np.float32) for s in shapes]


def accuracy(network: Network, x, y) -> float:
    return float((network.predict(x).argmax(axis=1) == y).mean())


def build_for_config(config: TrainConfig) -> Network:
    if config.arch == "dense_fc":
        return build_network("dense_fc", seed=config.seed, mask_init=config.mask_init)
    return build_network(config.arch, seed=config.seed)


def train(config: TrainConfig, data: MNIST, network: Network | None = None, progress=None, start_epoch=0):
    """Run the schedule on MNIST; returns ``(network, RunHistory)``.

    ``start_epoch`` resumes a network that already went through the earlier epochs.
    """
    config.validate()
    if network is None:
        network = build_for_config(config)
    x, y = data.train.x, data.train.y
    if config.train_limit:
        x, y = x[: config.train_limit], y[: config.train_limit]
    tx, ty = data.test.x, data.test.y
    if config.test_limit:
        tx, ty = tx[: config.test_limit], ty[: config.test_limit]
    velocities = _velocity_store(network, config)
    history = RunHistory()

    for epoch in range(start_epoch, config.epochs):
        lr = config.lr_at(epoch)
        update_masks = not config.masks_frozen(epoch)
        if velocities is not None and not update_masks:
            for v in velocities[-len(network.params):]:
                v[...] = 0
        task_sum = obj_sum = 0.0
        n_batches = 0
        for b, (xb, yb) in enumerate(batches(x, y, config.batch_size, config.seed, epoch)):
            task, obj = train_step(network, xb, yb, config, lr, update_masks, velocities)
            _check_finite(task, epoch, b)
            task_sum += task
            obj_sum += obj
            n_batches += 1
        rec = EpochRecord(
            epoch=epoch,
            objective=obj_sum / n_batches,
            task_loss=task_sum / n_batches,
            degree=degree(network),
            sparsity=sparsity(network),
            metric=accuracy(network, tx, ty),
        )
        history.append(rec)
        log.info(
            "epoch %d lr %g masks %s loss %.4f sparsity %.4f acc %.4f",
            epoch, lr, "train" if update_masks else "frozen", rec.task_loss, rec.sparsity, rec.metric,
        )
        if progress is not None:
            progress(rec)
    return network, history


# output-fitting experiment ----------------------------------------------------

MAPFIT_LR = 0.03
MAPFIT_STEPS = 1000
MAPFIT_INPUTS = 64


def fit_masks(network: Network, inputs, target, mask_init, ste: SteKind, normalize: bool,
              steps=MAPFIT_STEPS, lr=MAPFIT_LR, stat="batch") -> np.ndarray:
    """Gradient descent on mask variables only; weights stay fixed.

    Returns the MSE before each step and after the last one (``steps + 1`` values).
    """
    for p, m in zip(network.params, mask_init):
        p.mask = m.copy()
    curve = np.empty(steps + 1)
    n = len(inputs)
    for t in range(steps + 1):
        g = Graph()
        out = network.forward(g, g.leaf(inputs), training=True, ste=ste, track_stats=False)
        loss = mse(out, target)
        curve[t] = float(loss.value)
        if t == steps:
            break
        grads = C.backward(g, loss)
        mgrads = mask_task_gradients(network, grads, n, normalize, stat)
        masks = sgd_step([p.mask for p in network.params], mgrads, lr)
        for p, m in zip(network.params, masks):
            p.mask = m
    return curve


def mapfit_run(seed, stes=STE_NAMES, norms=(True, False), steps=MAPFIT_STEPS, lr=MAPFIT_LR,
               n_inputs=MAPFIT_INPUTS, width=64, layers=3, start_at_benchmark=False, stat="batch") -> dict:
    """All conditions for one seed; returns ``{(ste_name, norm): mse_curve}``."""
    ss = np.random.SeedSequence(seed)
    net_seed, input_seed, init_seed = ss.spawn(3)
    network = build_mapfit(width, layers, seed=np.random.default_rng(net_seed))
    inputs = gen_mapping_inputs(n_inputs, width, np.random.default_rng(input_seed))
    g = Graph()
    target = network.forward(g, g.leaf(inputs), training=True, track_stats=False).value
    if start_at_benchmark:
        init = [p.mask.copy() for p in network.params]
    else:
        rng = np.random.default_rng(init_seed)
        init = [rng.standard_normal(p.shape).astype(np.float32) for p in network.params]
    out = {}
    for name in stes:
        kind = name if isinstance(name, SteKind) else SteKind.parse(name)
        for norm in norms:
            out[(str(kind), bool(norm))] = fit_masks(network, inputs, target, init, kind, norm, steps, lr, stat)
    return out


def mapfit_experiment(stes=STE_NAMES, norms=(True, False), seeds=range(5), steps=MAPFIT_STEPS,
                      lr=MAPFIT_LR, n_inputs=MAPFIT_INPUTS, **kwargs) -> dict:
    """MSE trajectories per condition, stacked as ``len(seeds) × (steps + 1)`` arrays."""
    per_seed = [mapfit_run(s, stes, norms, steps, lr, n_inputs, **kwargs) for s in seeds]
    return {key: np.stack([r[key] for r in per_seed]) for key in per_seed[0]}
