"""Success prediction for an ICP estimate from alignment metrics and the transform."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NearestNeighbors, RigidTransform
from .metrics import AlignmentReport, add_error, alignment_report
from .nnet import Network, TrainConfig, train
from .registration import IcpConfig, IcpResult, icp_or_last

N_FEATURES = 17
FEATURE_NAMES = (
    "fitness_1cm", "fitness_2cm", "rmse_inlier", "dist_mesh_to_scene", "dist_scene_to_mesh",
    "r00", "r01", "r02", "tx", "r10", "r11", "r12", "ty", "r20", "r21", "r22", "tz",
)
SUCCESS_THRESHOLD = 0.01


class InvalidDatasetError(ValueError):
    pass


def extract_features(icp_result: IcpResult, report: AlignmentReport) -> np.ndarray:
    """Pack the five alignment metrics followed by ``[R | t]`` row-major."""
    f = np.concatenate([np.asarray(report.as_tuple(), dtype=np.float64), icp_result.transform.flat()])
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite feature")
    return f


@dataclass(frozen=True)
class SuccessPrediction:
    probability: float
    label: bool


def predict_success(model: Network, features, threshold: float = 0.5) -> SuccessPrediction:
    if model.input_dim != N_FEATURES or model.output_dim != 1:
        raise ValueError(f"failure model must map {N_FEATURES} -> 1, got "
                         f"{model.input_dim} -> {model.output_dim}")
    if model.layers[-1].activation != "sigmoid":
        raise ValueError("failure model must end in a sigmoid")
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (N_FEATURES,):
        raise ValueError(f"expected {N_FEATURES} features, got shape {x.shape}")
    p = float(model(x)[0])
    return SuccessPrediction(p, p >= threshold)


def label_by_add(add: float, success_threshold: float = SUCCESS_THRESHOLD) -> bool:
    if add < 0:
        raise ValueError("ADD must be non-negative")
    return add < success_threshold


def alignment_examples(samples, icp_config: IcpConfig | None = None,
                       success_threshold: float = SUCCESS_THRESHOLD, restarts: int = 0,
                       restart_offset: float = 0.02, restart_angle: float = 0.15):
    """ICP alignments with ADD labels: ``(features, labels)``.

    Each sample gives one alignment from its hypothesis ``init_pose``, then
    ``restarts`` more from seeded perturbations of the true pose (offsets up to
    ``restart_offset`` per axis, angles up to ``restart_angle``). The restarts put
    successful estimates far from the hypothesis into the data, which is where
    mitigated estimates land.
    """
    if restarts < 0:
        raise ValueError("restarts must be >= 0")
    X, y = [], []
    for s in samples:
        index = NearestNeighbors(s.observed)
        rng = np.random.default_rng([s.seed, 104_729])
        inits = [s.init_pose]
        for _ in range(restarts):
            d = RigidTransform.from_euler(*rng.uniform(-restart_offset, restart_offset, 3),
                                          *rng.uniform(-restart_angle, restart_angle, 3))
            inits.append(s.gt_pose.compose(d))
        for init in inits:
            est = icp_or_last(s.mesh_cloud, None, init, icp_config, index)
            rep = alignment_report(est.transform.apply(s.mesh_cloud), s.observed, index)
            X.append(extract_features(est, rep))
            y.append(label_by_add(add_error(s.mesh_cloud, s.gt_pose, est.transform), success_threshold))
    return np.array(X).reshape(-1, N_FEATURES), np.array(y, dtype=bool)


def build_failure_network(hidden=(32, 16), seed: int = 0) -> Network:
    return Network.build([N_FEATURES, *hidden, 1], "relu", out_activation="sigmoid", seed=seed)


def _fold_standardisation(net: Network, mean: np.ndarray, std: np.ndarray) -> Network:
    # W (x - m) / s + b  ==  (W / s) x + (b - W m / s)
    out = net.copy()
    first = out.layers[0]
    W = first.weight / std[None, :]
    first.weight[...] = W
    first.bias[...] = first.bias - W @ mean
    return out


def train_failure_model(features, labels, config: TrainConfig | None = None,
                        hidden=(32, 16)) -> tuple[Network, list[float]]:
    """BCE training on standardised features.

    The standardisation is folded into the first layer afterwards, so the
    returned network consumes raw feature vectors.
    """
    X = np.asarray(features, dtype=np.float64).reshape(-1, N_FEATURES)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(X) != len(y):
        raise InvalidDatasetError("features and labels differ in length")
    if len(np.unique(y)) < 2:
        raise InvalidDatasetError("training data must contain both success and failure samples")
    config = config or TrainConfig(learning_rate=0.02, epochs=200, batch_size=32)
    if config.loss_tag != "binary-cross-entropy":
        raise ValueError("failure model trains with binary-cross-entropy")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-9, std, 1.0)
    Z = (X - mean) / std
    net = build_failure_network(hidden, seed=config.seed)
    trained, history = train(net, list(zip(Z, y)), config)
    return _fold_standardisation(trained, mean, std), history.losses


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}

    def report(self, title: str = "failure predictor") -> str:
        return (f"{title}\n"
                f"                 actual success  actual failure\n"
                f"pred success     {self.tp:>14d}  {self.fp:>14d}\n"
                f"pred failure     {self.fn:>14d}  {self.tn:>14d}\n"
                f"accuracy {self.accuracy:.4f} (n={self.total})\n")


def confusion(predicted, actual) -> ConfusionMatrix:
    p = np.asarray(predicted, dtype=bool)
    a = np.asarray(actual, dtype=bool)
    return ConfusionMatrix(int(np.sum(p & a)), int(np.sum(p & ~a)), int(np.sum(~p & a)), int(np.sum(~p & ~a)))


def evaluate(model: Network, features, labels, threshold: float = 0.5) -> ConfusionMatrix:
    X = np.asarray(features, dtype=np.float64).reshape(-1, N_FEATURES)
    probs = model(X).reshape(-1) if len(X) else np.zeros(0)
    return confusion(probs >= threshold, labels)
