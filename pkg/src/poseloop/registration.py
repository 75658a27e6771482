"""Point-to-point ICP with a closed-form SVD alignment step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import InvalidInputError, NearestNeighbors, RigidTransform, as_points
from .metrics import rmse_from_distances


class DegenerateCorrespondenceError(ValueError):
    pass


class NoOverlapError(RuntimeError):
    """Too few correspondences; ``transform`` holds the last estimate."""

    def __init__(self, transform: RigidTransform, iteration: int, n_matches: int):
        super().__init__(f"only {n_matches} correspondences at iteration {iteration}")
        self.transform = transform
        self.iteration = iteration
        self.n_matches = n_matches


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    correspondence_max_dist: float = 0.01
    convergence_tol: float = 1e-6
    min_correspondences: int = 10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be >= 1")
        if not self.correspondence_max_dist > 0:
            raise InvalidInputError("correspondence_max_dist must be positive")
        if self.convergence_tol < 0:
            raise InvalidInputError("convergence_tol must be >= 0")


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iterations_used: int
    converged: bool
    rmse_history: tuple[float, ...] = ()


def kabsch(source_pts, target_pts) -> RigidTransform:
    """Least-squares rigid transform mapping ``source_pts`` onto ``target_pts``."""
    src = as_points(source_pts, name="source")
    dst = as_points(target_pts, name="target")
    if src.shape != dst.shape:
        raise DegenerateCorrespondenceError("point lists differ in length")
    if len(src) < 3:
        raise DegenerateCorrespondenceError("need at least 3 correspondences")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    a = src - cs
    b = dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateCorrespondenceError("source points are collinear or coincident")
    H = a.T @ b
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)


def icp(source, target, init: RigidTransform | None = None, config: IcpConfig | None = None,
        target_index: NearestNeighbors | None = None) -> IcpResult:
    """Align ``source`` (mesh cloud) to ``target`` (scene cloud) starting at ``init``.

    Raises :class:`NoOverlapError` when fewer than ``min_correspondences``
    source points find a target neighbour inside ``correspondence_max_dist``.
    """
    config = config or IcpConfig()
    src = as_points(source, name="source")
    if target_index is None:
        target_index = NearestNeighbors(as_points(target, name="target"))
    tgt = target_index.points
    T = init if init is not None else RigidTransform.identity()
    max_d = config.correspondence_max_dist

    history = []
    converged = False
    iterations = 0
    prev = None
    for it in range(1, config.max_iterations + 1):
        iterations = it
        moved = T.apply(src)
        d, j = target_index.query(moved, max_d)
        mask = d < max_d
        n = int(np.count_nonzero(mask))
        if n < config.min_correspondences:
            raise NoOverlapError(T, it, n)
        rmse = float(np.sqrt(np.mean(d[mask] ** 2)))
        history.append(rmse)
        if prev is not None and abs(prev - rmse) < config.convergence_tol:
            converged = True
            break
        prev = rmse
        try:
            step = kabsch(moved[mask], tgt[j[mask]])
        except DegenerateCorrespondenceError:
            break
        T = step @ T

    return evaluate_transform(src, target_index, T, max_d, iterations, converged, tuple(history))


def evaluate_transform(source, target_index: NearestNeighbors, T: RigidTransform, max_dist: float,
                       iterations: int = 0, converged: bool = False, history: tuple = ()) -> IcpResult:
    """Package ``T`` as an :class:`IcpResult` with fitness and inlier RMSE at ``max_dist``."""
    src = as_points(source, name="source")
    d = target_index.query(T.apply(src))[0]
    rm = rmse_from_distances(d, max_dist)
    return IcpResult(
        transform=T,
        fitness=float(np.count_nonzero(d < max_dist)) / len(d),
        inlier_rmse=rm.value,
        iterations_used=iterations,
        converged=converged,
        rmse_history=history,
    )


def icp_or_last(source, target, init: RigidTransform | None = None, config: IcpConfig | None = None,
                target_index: NearestNeighbors | None = None) -> IcpResult:
    """:func:`icp`, but a run that loses overlap returns its last estimate instead of raising."""
    config = config or IcpConfig()
    if target_index is None:
        target_index = NearestNeighbors(as_points(target, name="target"))
    try:
        return icp(source, None, init, config, target_index)
    except NoOverlapError as exc:
        return evaluate_transform(source, target_index, exc.transform, config.correspondence_max_dist,
                                  exc.iteration)
