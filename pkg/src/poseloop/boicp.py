"""Bayesian optimisation over the 6-DoF ICP initialisation.

Candidates ``(x, y, z, roll, pitch, yaw)`` are scored by running ICP from
them and measuring overlap between the aligned mesh cloud and the scene:

* if any mesh point is within ``TAU_3`` of the scene the score is
  ``fitness - rmse_inlier / TAU_3`` (both terms dimensionless);
* otherwise it is minus the distance between the two cloud centroids.

The surrogate is an exact Gaussian process with a squared-exponential
kernel on min-max normalised parameters; expected improvement is maximised
by seeded random search plus local refinement.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .geometry import InvalidInputError, NearestNeighbors, RigidTransform, as_points, farthest_point_sample
from .metrics import TAU_3, rmse_from_distances
from .registration import IcpConfig, IcpResult, icp_or_last

PARAM_NAMES = ("x", "y", "z", "roll", "pitch", "yaw")
RMSE_NORMALISATION = "rmse_inlier / tau3"

# ICP run inside the objective: a wide capture radius first, then the fine one.
OBJECTIVE_STAGES = (
    IcpConfig(max_iterations=20, correspondence_max_dist=0.3),
    IcpConfig(max_iterations=20, correspondence_max_dist=0.05),
    IcpConfig(max_iterations=20, correspondence_max_dist=0.01),
)


class SurrogateError(RuntimeError):
    def __init__(self, message: str, trace: BoTrace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SearchBounds:
    lower: tuple[float, ...] = (-0.5, -0.5, -0.25, -np.pi, -np.pi, -np.pi)
    upper: tuple[float, ...] = (0.5, 0.5, 0.25, np.pi, np.pi, np.pi)

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != (6,) or hi.shape != (6,):
            raise InvalidInputError("bounds need 6 entries (x, y, z, roll, pitch, yaw)")
        if not np.all(lo < hi):
            raise InvalidInputError("every lower bound must be below its upper bound")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=np.float64)

    def denormalise(self, u: np.ndarray) -> np.ndarray:
        return self.lo + np.asarray(u) * (self.hi - self.lo)

    def contains(self, params) -> bool:
        p = np.asarray(params)
        return bool(np.all(p >= self.lo - 1e-12) and np.all(p <= self.hi + 1e-12))


@dataclass(frozen=True)
class BoConfig:
    n_initial_random: int = 15
    n_iterations: int = 45
    length_scales: tuple[float, ...] = (0.15, 0.15, 0.3, 0.3, 0.3, 0.15)
    noise: float = 1e-4
    xi: float = 0.01
    n_acquisition_samples: int = 1024
    n_refine: int = 64
    rmse_scale: float = TAU_3
    coarse_points: int = 512  # mesh points used by every ICP stage but the last
    seed: int = 0

    def __post_init__(self):
        if self.n_initial_random < 1 or self.n_iterations < 0:
            raise InvalidInputError("n_initial_random must be >= 1 and n_iterations >= 0")
        if len(self.length_scales) != 6 or min(self.length_scales) <= 0:
            raise InvalidInputError("need 6 positive length-scales")


@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    overlap: bool  # True: fitness/RMSE branch, False: centroid-distance branch
    fitness: float
    icp_result: IcpResult


@dataclass
class TraceEntry:
    params: np.ndarray
    transform: RigidTransform
    value: float
    overlap: bool
    icp_result: IcpResult


@dataclass
class BoTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    rmse_normalisation: str = RMSE_NORMALISATION

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries])

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.values))

    @property
    def best(self) -> TraceEntry:
        return self.entries[self.best_index]

    def to_jsonl(self) -> str:
        lines = []
        for i, e in enumerate(self.entries):
            lines.append(json.dumps({
                "index": i,
                "params": dict(zip(PARAM_NAMES, (float(v) for v in e.params))),
                "value": e.value,
                "branch": "overlap" if e.overlap else "centroid_distance",
                "fitness": e.icp_result.fitness,
                "icp_transform": e.icp_result.transform.to_dict(),
                "is_best": i == self.best_index,
                "rmse_normalisation": self.rmse_normalisation,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"


def objective(P_M, P, T: RigidTransform, icp_config=None,
              scene_index: NearestNeighbors | None = None, rmse_scale: float = TAU_3,
              coarse_subset: np.ndarray | None = None) -> ObjectiveValue:
    """Run ICP from ``T`` and score the overlap of the result with ``P``.

    ``icp_config`` is one :class:`IcpConfig` or a sequence run in order, each
    stage starting where the previous one stopped. ``coarse_subset`` indexes
    the mesh points used by all stages except the last; the score always uses
    every point.
    """
    stages = _stages(icp_config)
    src = as_points(P_M, name="P_M")
    if scene_index is None:
        scene_index = NearestNeighbors(as_points(P, name="P"))
    res = None
    for k, stage in enumerate(stages):
        pts = src if coarse_subset is None or k == len(stages) - 1 else src[coarse_subset]
        res = icp_or_last(pts, None, T, stage, target_index=scene_index)
        T = res.transform
    aligned = res.transform.apply(src)
    d = scene_index.query(aligned)[0]
    fit = float(np.count_nonzero(d < TAU_3)) / len(d)
    if fit > 0:
        rmse = rmse_from_distances(d, TAU_3).value
        return ObjectiveValue(fit - rmse / rmse_scale, True, fit, res)
    gap = np.linalg.norm(aligned.mean(axis=0) - scene_index.points.mean(axis=0))
    return ObjectiveValue(-float(gap), False, fit, res)


def _stages(icp_config) -> list[IcpConfig]:
    if icp_config is None:
        return list(OBJECTIVE_STAGES)
    if isinstance(icp_config, IcpConfig):
        return [icp_config]
    return list(icp_config)


class GaussianProcess:
    """Exact GP regression with a squared-exponential kernel and unit signal variance."""

    def __init__(self, length_scales, noise: float = 1e-4):
        self.length_scales = np.asarray(length_scales, dtype=np.float64)
        self.noise = noise

    def kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        a = A / self.length_scales
        b = B / self.length_scales
        d2 = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2 * a @ b.T
        return np.exp(-0.5 * np.maximum(d2, 0.0))

    def fit(self, X: np.ndarray, y: np.ndarray, max_tries: int = 6) -> GaussianProcess:
        self.X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y_mean = y.mean()
        self.y_std = y.std() if y.std() > 0 else 1.0
        yn = (y - self.y_mean) / self.y_std
        K = self.kernel(self.X, self.X)
        jitter = self.noise
        for _ in range(max_tries):
            try:
                self._chol = cho_factor(K + jitter * np.eye(len(K)), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter = max(10 * jitter, 1e-10)
        else:
            raise np.linalg.LinAlgError("kernel matrix not positive definite after jitter")
        self._alpha = cho_solve(self._chol, yn)
        return self

    def predict(self, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Ks = self.kernel(Xs, self.X)
        mu = Ks @ self._alpha
        v = cho_solve(self._chol, Ks.T)
        var = np.maximum(1.0 - np.sum(Ks * v.T, axis=1), 1e-12)
        return mu * self.y_std + self.y_mean, np.sqrt(var) * self.y_std


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float, xi: float = 0.01) -> np.ndarray:
    imp = mu - best - xi
    z = imp / sigma
    return imp * norm.cdf(z) + sigma * norm.pdf(z)


def _maximise_ei(gp: GaussianProcess, best: float, cfg: BoConfig, rng) -> np.ndarray:
    cand = rng.random((cfg.n_acquisition_samples, 6))
    mu, sd = gp.predict(cand)
    ei = expected_improvement(mu, sd, best, cfg.xi)
    x = cand[int(np.argmax(ei))]
    top = float(ei.max())
    for scale in (0.05, 0.02, 0.005):
        local = np.clip(x + rng.normal(0.0, scale, size=(cfg.n_refine, 6)), 0.0, 1.0)
        mu, sd = gp.predict(local)
        ei = expected_improvement(mu, sd, best, cfg.xi)
        k = int(np.argmax(ei))
        if ei[k] > top:
            x, top = local[k], float(ei[k])
    return x


def bo_icp(P_M, P, bounds: SearchBounds | None = None, bo_config: BoConfig | None = None,
           icp_config=None) -> tuple[IcpResult, BoTrace]:
    """Search initial transforms inside ``bounds``; return the best ICP result and the trace."""
    bounds = bounds or SearchBounds()
    cfg = bo_config or BoConfig()
    src = as_points(P_M, name="P_M")
    index = NearestNeighbors(as_points(P, name="P"))
    subset = None
    if cfg.coarse_points < len(src):
        subset = farthest_point_sample(src, cfg.coarse_points)
    rng = np.random.default_rng(cfg.seed)
    gp = GaussianProcess(cfg.length_scales, cfg.noise)
    trace = BoTrace()
    U: list[np.ndarray] = []

    def evaluate(u):
        params = bounds.denormalise(u)
        T = RigidTransform.from_euler(*params)
        ov = objective(src, None, T, icp_config, scene_index=index, rmse_scale=cfg.rmse_scale,
                       coarse_subset=subset)
        U.append(np.asarray(u, dtype=np.float64))
        trace.entries.append(TraceEntry(params, T, ov.value, ov.overlap, ov.icp_result))

    for u in rng.random((cfg.n_initial_random, 6)):
        evaluate(u)
    for _ in range(cfg.n_iterations):
        try:
            gp.fit(np.array(U), trace.values)
        except np.linalg.LinAlgError as exc:
            raise SurrogateError(str(exc), trace) from None
        evaluate(_maximise_ei(gp, float(trace.values.max()), cfg, rng))
    return trace.best.icp_result, trace
