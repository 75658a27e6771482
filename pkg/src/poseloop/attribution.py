"""Error-source attribution: noise, bad initialisation or occlusion.

A shared per-point encoder embeds every normalised scene point, the
features are max-pooled over the cloud and a small head turns the pooled
vector into class probabilities.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .geometry import as_points, farthest_point_sample
from .nnet import (
    FORMAT_VERSION,
    MixingSchedule,
    Network,
    TrainConfig,
    WeightFileError,
    cross_entropy_loss,
    dumps,
    train,
)


class ErrorClass(IntEnum):
    NOISE = 0
    BAD_INIT = 1
    OCCLUSION = 2

    @classmethod
    def from_case(cls, case: str) -> ErrorClass:
        return {"noise": cls.NOISE, "badinit": cls.BAD_INIT, "occlusion": cls.OCCLUSION}[case]

    @property
    def case(self) -> str:
        return ("noise", "badinit", "occlusion")[self.value]


class InvalidDatasetError(ValueError):
    pass


def normalize_cloud(cloud, n_points: int = 2048, seed: int = 0) -> np.ndarray:
    """Resample to ``n_points``, centre on the centroid and scale into the unit ball.

    Points are put in lexicographic order first so the result does not depend
    on the input order. Larger clouds are reduced by farthest point sampling
    started at the point farthest from the centroid; smaller ones are padded
    by seeded sampling with replacement.
    """
    pts = as_points(cloud)
    pts = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]
    if len(pts) > n_points:
        start = int(np.argmax(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
        pts = pts[np.sort(farthest_point_sample(pts, n_points, start))]
    elif len(pts) < n_points:
        rng = np.random.default_rng(seed)
        extra = rng.integers(0, len(pts), size=n_points - len(pts))
        pts = np.vstack([pts, pts[extra]])
    pts = pts - pts.mean(axis=0)
    scale = float(np.max(np.linalg.norm(pts, axis=1)))
    if scale < 1e-9:
        scale = 1.0
    return pts / scale


class AttributionModel:
    def __init__(self, encoder: Network, head: Network, n_points: int = 2048):
        if encoder.input_dim != 3 or encoder.output_dim != head.input_dim or head.output_dim != 3:
            raise ValueError("encoder/head dimensions do not chain (3 -> h -> 3)")
        if head.layers[-1].activation != "softmax":
            raise ValueError("head must end in softmax")
        self.encoder = encoder
        self.head = head
        self.n_points = n_points

    @classmethod
    def build(cls, hidden=(32, 64), head_hidden=(64,), n_points: int = 2048, seed: int = 0) -> AttributionModel:
        enc = Network.build([3, *hidden], "relu", out_activation="relu", seed=seed)
        head = Network.build([hidden[-1], *head_hidden, 3], "relu", out_activation="softmax", seed=seed + 1)
        return cls(enc, head, n_points)

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.parameters() + self.head.parameters()

    def probabilities_normalized(self, pts: np.ndarray) -> np.ndarray:
        pooled = self.encoder(pts).max(axis=0)
        p = self.head(pooled)
        return p / p.sum()

    def loss_and_grads(self, batch):
        """``batch`` holds ``(normalised points, label)`` pairs of equal size."""
        X = np.stack([b[0] for b in batch])  # (B, n, 3)
        y = np.array([int(b[1]) for b in batch])
        B, n, _ = X.shape
        feats, enc_cache = self.encoder.forward_cached(X.reshape(B * n, 3))
        feats = feats.reshape(B, n, -1)
        arg = feats.argmax(axis=1)  # (B, h)
        pooled = np.take_along_axis(feats, arg[:, None, :], axis=1)[:, 0, :]
        probs, head_cache = self.head.forward_cached(pooled)
        loss, g = cross_entropy_loss(probs, y)
        head_grads, d_pooled = self.head.backward(head_cache, g, preact=True)
        d_feats = np.zeros_like(feats)
        bi, hi = np.meshgrid(np.arange(B), np.arange(feats.shape[2]), indexing="ij")
        d_feats[bi, arg, hi] = d_pooled
        enc_grads, _ = self.encoder.backward(enc_cache, d_feats.reshape(B * n, -1))
        return loss, enc_grads + head_grads

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "attribution",
            "n_points": self.n_points,
            "class_order": [c.name for c in ErrorClass],
            "encoder": self.encoder.to_dict(),
            "head": self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> AttributionModel:
        if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "attribution":
            raise WeightFileError("not an attribution weight file of a supported version")
        if d.get("class_order") != [c.name for c in ErrorClass]:
            raise WeightFileError("unexpected class order")
        return cls(Network.from_dict(d["encoder"]), Network.from_dict(d["head"]), d["n_points"])

    def save(self, path, metadata: dict | None = None) -> None:
        doc = self.to_dict()
        doc["metadata"] = metadata or {}
        with open(path, "w") as fh:
            fh.write(dumps(doc))

    @classmethod
    def load(cls, path) -> AttributionModel:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class ClassProbabilities:
    noise: float
    bad_init: float
    occlusion: float

    @property
    def values(self) -> np.ndarray:
        return np.array([self.noise, self.bad_init, self.occlusion])

    @property
    def argmax(self) -> ErrorClass:
        return ErrorClass(int(np.argmax(self.values)))


def classify(model: AttributionModel, cloud, seed: int = 0) -> ClassProbabilities:
    p = model.probabilities_normalized(normalize_cloud(cloud, model.n_points, seed))
    return ClassProbabilities(*(float(v) for v in p))


def train_attribution(clouds, labels, config: TrainConfig | None = None,
                      schedule: MixingSchedule | None = None, model: AttributionModel | None = None,
                      n_points: int = 2048):
    """Cross-entropy training. Returns ``(model, history)``.

    With a schedule, ``clouds``/``labels`` are lists of per-source lists.
    """
    config = config or TrainConfig(loss_tag="cross-entropy", learning_rate=0.01, epochs=40, batch_size=16)
    if config.loss_tag != "cross-entropy":
        config = TrainConfig(**{**config.__dict__, "loss_tag": "cross-entropy"})
    sources_c = clouds if schedule is not None else [clouds]
    sources_y = labels if schedule is not None else [labels]
    present = {int(ErrorClass(int(y))) for ys in sources_y for y in ys}
    if present != {0, 1, 2}:
        raise InvalidDatasetError(f"all three error classes are required, got {sorted(present)}")
    if model is None:
        model = AttributionModel.build(n_points=n_points, seed=config.seed)
    sources = [[(normalize_cloud(c, model.n_points, seed=k), int(y)) for k, (c, y) in enumerate(zip(cs, ys))]
               for cs, ys in zip(sources_c, sources_y)]
    data = sources if schedule is not None else sources[0]
    return train(model, data, config, schedule)
