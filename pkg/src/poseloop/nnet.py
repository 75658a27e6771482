"""Small dense-network substrate with hand-written reverse mode.

A :class:`Network` is a chain of affine layers, each followed by one of
``relu``, ``sigmoid``, ``softmax`` or ``identity``. Weights are stored as
``(out, in)`` matrices so a single example maps as ``W @ x + b``; batches are
rows. Composite models (attribution, reconstruction) reuse these networks and
do the chain rule between them themselves; anything that exposes
``parameters()`` and ``loss_and_grads(batch)`` can be trained with
:func:`train`.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "sigmoid", "softmax", "identity")
LOSSES = ("binary-cross-entropy", "cross-entropy", "chamfer")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


class WeightFileError(ValueError):
    pass


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if act == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    if act == "identity":
        return z
    raise ValueError(f"unknown activation {act!r}")


def _activation_backward(z: np.ndarray, y: np.ndarray, dy: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return dy * (z > 0)
    if act == "sigmoid":
        return dy * y * (1.0 - y)
    if act == "softmax":
        return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))
    return dy


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("weight/bias shapes do not match")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class Network:
    def __init__(self, layers: Sequence[Dense], init_seed: int | None = None):
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = list(layers)
        self.init_seed = init_seed

    @classmethod
    def build(cls, sizes: Sequence[int], activations: Sequence[str] | str = "relu",
              out_activation: str = "identity", seed: int = 0) -> Network:
        """Uniform scaled init, ``±sqrt(6 / (fan_in + fan_out))``.

        ``activations`` applies to hidden layers; the last layer gets
        ``out_activation``.
        """
        n = len(sizes) - 1
        if isinstance(activations, str):
            activations = [activations] * (n - 1)
        acts = list(activations) + [out_activation]
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Dense(rng.uniform(-lim, lim, size=(fan_out, fan_in)), np.zeros(fan_out), act))
        return cls(layers, init_seed=seed)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> Network:
        return copy.deepcopy(self)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {X.shape[-1]}")
        return X

    def __call__(self, X) -> np.ndarray:
        X = self._check(X)
        single = X.ndim == 1
        h = X.reshape(1, -1) if single else X
        for layer in self.layers:
            h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        return h[0] if single else h

    def forward_cached(self, X) -> tuple[np.ndarray, list]:
        """Batch forward pass keeping what :meth:`backward` needs."""
        h = self._check(X)
        cache = []
        for layer in self.layers:
            z = h @ layer.weight.T + layer.bias
            y = _activate(z, layer.activation)
            cache.append((h, z, y))
            h = y
        return h, cache

    def backward(self, cache: list, dY: np.ndarray, preact: bool = False
                 ) -> tuple[list[np.ndarray], np.ndarray]:
        """Reverse pass. Returns ``(grads, dX)``, grads aligned with ``parameters()``.

        With ``preact=True`` ``dY`` is taken as the gradient w.r.t. the last
        layer's pre-activation (used by the fused cross-entropy losses).
        """
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        g = dY
        for li in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[li]
            h, z, y = cache[li]
            if not (preact and li == len(self.layers) - 1):
                g = _activation_backward(z, y, g, layer.activation)
            grads[2 * li] = g.T @ h
            grads[2 * li + 1] = g.sum(axis=0)
            g = g @ layer.weight
        return grads, g

    # -- persistence -------------------------------------------------------
    def to_dict(self, metadata: dict | None = None) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "init_seed": self.init_seed,
            "layers": [
                {
                    "in": layer.in_dim,
                    "out": layer.out_dim,
                    "weights": [float(v) for v in layer.weight.reshape(-1)],
                    "bias": [float(v) for v in layer.bias],
                    "activation": layer.activation,
                }
                for layer in self.layers
            ],
            "metadata": metadata or {},
        }

    @classmethod
    def from_dict(cls, d: dict) -> Network:
        if d.get("format_version") != FORMAT_VERSION:
            raise WeightFileError(f"unsupported format_version {d.get('format_version')!r}")
        layers = []
        for spec in d["layers"]:
            W = np.array(spec["weights"], dtype=np.float64)
            if W.size != spec["out"] * spec["in"]:
                raise WeightFileError("weight array size does not match declared shape")
            layers.append(Dense(W.reshape(spec["out"], spec["in"]), spec["bias"], spec["activation"]))
        try:
            net = cls(layers, init_seed=d.get("init_seed"))
        except ValueError as exc:
            raise WeightFileError(str(exc)) from None
        if net.input_dim != d["input_dim"]:
            raise WeightFileError("input_dim does not match first layer")
        if not all(np.all(np.isfinite(p)) for p in net.parameters()):
            raise WeightFileError("non-finite weights")
        return net


def forward(net: Network, x) -> np.ndarray:
    return net(x)


def backward(net: Network, x, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Parameter gradients (and input gradient) of ``<upstream, net(x)>``."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    Xb = X.reshape(1, -1) if single else X
    U = np.asarray(upstream, dtype=np.float64)
    Ub = U.reshape(1, -1) if single else U
    if Ub.shape != (len(Xb), net.output_dim):
        raise ValueError("upstream gradient shape does not match network output")
    _, cache = net.forward_cached(Xb)
    grads, dX = net.backward(cache, Ub)
    return grads, (dX[0] if single else dX)


def pool_max(features) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or len(F) == 0:
        raise ValueError("pool_max needs a non-empty set of vectors")
    return F.max(axis=0)


def pool_mean(features) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or len(F) == 0:
        raise ValueError("pool_mean needs a non-empty set of vectors")
    return F.mean(axis=0)


# ---------------------------------------------------------------------------
# losses


_EPS = 1e-12


def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logit."""
    p = p.reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    pc = np.clip(p, _EPS, 1 - _EPS)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    return float(loss), ((p - y) / len(p)).reshape(-1, 1)


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    loss = -np.mean(np.log(np.clip(probs[np.arange(n), labels], _EPS, None)))
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def chamfer_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric mean nearest-neighbour distance and its gradient w.r.t. ``pred``.

    The nearest-neighbour assignment is held fixed for the gradient.
    """
    from scipy.spatial import cKDTree

    if not np.all(np.isfinite(pred)):
        return float("nan"), np.zeros_like(pred)
    d_pt, i_pt = cKDTree(target).query(pred)
    d_tp, i_tp = cKDTree(pred).query(target)
    loss = float(np.mean(d_pt) + np.mean(d_tp))
    grad = np.zeros_like(pred)
    diff = pred - target[i_pt]
    grad += diff / np.maximum(d_pt, _EPS)[:, None] / len(pred)
    diff2 = pred[i_tp] - target
    np.add.at(grad, i_tp, diff2 / np.maximum(d_tp, _EPS)[:, None] / len(target))
    return loss, grad


# ---------------------------------------------------------------------------
# training


class Trainable(Protocol):
    def parameters(self) -> list[np.ndarray]: ...

    def loss_and_grads(self, batch: list) -> tuple[float, list[np.ndarray]]: ...


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    loss_tag: str = "binary-cross-entropy"
    momentum: float = 0.9
    grad_clip: float | None = 5.0
    epoch_size: int | None = None  # samples per epoch when mixing sources

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.loss_tag not in LOSSES:
            raise ValueError(f"unknown loss {self.loss_tag!r}")


@dataclass(frozen=True)
class MixingStage:
    epoch_start: int
    weights: tuple[float, ...]


@dataclass(frozen=True)
class MixingSchedule:
    """Per-source sampling weights, switched at each stage's start epoch."""

    stages: tuple[MixingStage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        for st in self.stages:
            w = np.asarray(st.weights, dtype=np.float64)
            if np.any(w < 0) or not w.sum() > 0:
                raise ValueError("stage weights must be non-negative with positive sum")
        starts = [st.epoch_start for st in self.stages]
        if starts != sorted(starts) or starts[0] != 0:
            raise ValueError("stages must start at epoch 0 and be ordered")

    @classmethod
    def linear_ramp(cls, epochs: int, n_stages: int, final_share: float) -> MixingSchedule:
        """Two sources; the second's share rises linearly to ``final_share``."""
        stages = []
        for s in range(n_stages):
            share = final_share * s / max(n_stages - 1, 1)
            stages.append(MixingStage(epoch_start=s * epochs // n_stages, weights=(1.0 - share, share)))
        return cls(tuple(stages))

    def weights_at(self, epoch: int) -> np.ndarray:
        current = self.stages[0]
        for st in self.stages:
            if st.epoch_start <= epoch:
                current = st
        w = np.asarray(current.weights, dtype=np.float64)
        return w / w.sum()


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    source_counts: list[list[int]] = field(default_factory=list)


class SupervisedNetwork:
    """Adapter pairing a plain :class:`Network` with a classification loss."""

    def __init__(self, net: Network, loss_tag: str):
        if loss_tag == "chamfer":
            raise ValueError("chamfer loss needs a set-output model")
        self.net = net
        self.loss_tag = loss_tag

    def parameters(self):
        return self.net.parameters()

    def loss_and_grads(self, batch):
        X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
        y = np.array([t for _, t in batch])
        out, cache = self.net.forward_cached(X)
        last = self.net.layers[-1].activation
        if self.loss_tag == "binary-cross-entropy":
            if last != "sigmoid":
                raise ValueError("binary-cross-entropy expects a sigmoid output")
            loss, g = bce_loss(out, y)
        else:
            if last != "softmax":
                raise ValueError("cross-entropy expects a softmax output")
            loss, g = cross_entropy_loss(out, y)
        grads, _ = self.net.backward(cache, g, preact=True)
        return loss, grads


def _epoch_order(rng, sources, weights, size, cursors, orders):
    counts = [0] * len(sources)
    picks = []
    src_ids = rng.choice(len(sources), size=size, p=weights)
    for s in src_ids:
        s = int(s)
        if cursors[s] >= len(orders[s]):
            orders[s] = rng.permutation(len(sources[s]))
            cursors[s] = 0
        picks.append(sources[s][orders[s][cursors[s]]])
        cursors[s] += 1
        counts[s] += 1
    return picks, counts


def train(model, dataset: Sequence, config: TrainConfig, schedule: MixingSchedule | None = None):
    """Mini-batch gradient descent with momentum; returns ``(trained, history)``.

    Without a schedule ``dataset`` is a sequence of samples, reshuffled every
    epoch. With a schedule it is a sequence of sources (each a sequence of
    samples) and every epoch draws ``epoch_size`` samples, picking the source
    of each draw by the stage weights. The input model is not modified.
    """
    model = copy.deepcopy(model)
    trainable = SupervisedNetwork(model, config.loss_tag) if isinstance(model, Network) else model
    rng = np.random.default_rng(config.seed)

    if schedule is None:
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        sources = [list(dataset)]
    else:
        sources = [list(s) for s in dataset]
        if len(schedule.stages[0].weights) != len(sources):
            raise ValueError("schedule weights do not match number of sources")
        if sum(len(s) for s in sources) == 0:
            raise ValueError("empty dataset")
    epoch_size = config.epoch_size or sum(len(s) for s in sources)

    params = trainable.parameters()
    velocity = [np.zeros_like(p) for p in params]
    history = TrainHistory()
    cursors = [len(s) for s in sources]
    orders = [np.arange(len(s)) for s in sources]

    for epoch in range(config.epochs):
        if schedule is None:
            order = rng.permutation(len(sources[0]))
            samples = [sources[0][i] for i in order]
            counts = [len(samples)]
        else:
            w = schedule.weights_at(epoch)
            # never draw from an empty source
            w = np.where([len(s) > 0 for s in sources], w, 0.0)
            samples, counts = _epoch_order(rng, sources, w / w.sum(), epoch_size, cursors, orders)
        total, seen = 0.0, 0
        for start in range(0, len(samples), config.batch_size):
            batch = samples[start:start + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                loss, grads = trainable.loss_and_grads(batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            if config.grad_clip is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > config.grad_clip:
                    grads = [g * (config.grad_clip / norm) for g in grads]
            for p, g, v in zip(params, grads, velocity):
                v *= config.momentum
                v += g
                p -= config.learning_rate * v
            total += loss * len(batch)
            seen += len(batch)
        epoch_loss = total / max(seen, 1)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        history.losses.append(epoch_loss)
        history.source_counts.append(counts)
    return model, history


# ---------------------------------------------------------------------------
# weight files


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_network(path, net: Network, metadata: dict | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(net.to_dict(metadata)))


def load_network(path) -> tuple[Network, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    return Network.from_dict(doc), doc.get("metadata", {})


def write_loss_csv(path, history: TrainHistory) -> None:
    lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(history.losses)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
