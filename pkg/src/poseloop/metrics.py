"""Alignment-quality and pose-error measures.

All distances are Euclidean and in meters. Mesh points are always the first
argument where the direction matters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import InvalidInputError, NearestNeighbors, RigidTransform, as_points

TAU_1 = 0.01
TAU_2 = 0.02
TAU_3 = 0.01


def nearest_distances(A, B, index: NearestNeighbors | None = None) -> np.ndarray:
    """Distance from every point of ``A`` to its nearest neighbour in ``B``."""
    A = as_points(A, name="A")
    if index is None:
        index = NearestNeighbors(as_points(B, name="B"))
    return index.query(A)[0]


def fitness(P_M, P, tau: float, index: NearestNeighbors | None = None) -> float:
    """Fraction of ``P_M`` with a point of ``P`` strictly closer than ``tau``."""
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    d = nearest_distances(P_M, P, index)
    return float(np.count_nonzero(d < tau)) / len(d)


class InlierRmse(NamedTuple):
    value: float
    n_inliers: int

    @property
    def has_inliers(self) -> bool:
        return self.n_inliers > 0


def rmse_from_distances(d: np.ndarray, tau: float) -> InlierRmse:
    mask = d < tau
    n = int(np.count_nonzero(mask))
    if n == 0:
        # no-inlier sentinel: bounded and finite
        return InlierRmse(float(tau), 0)
    return InlierRmse(float(np.sqrt(np.mean(d[mask] ** 2))), n)


def rmse_inlier(P_M, P, tau: float = TAU_3, index: NearestNeighbors | None = None) -> InlierRmse:
    """RMS nearest-neighbour distance over mesh points within ``tau``.

    Returns ``InlierRmse(tau, 0)`` when no mesh point has a neighbour inside
    the threshold.
    """
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    return rmse_from_distances(nearest_distances(P_M, P, index), tau)


def directed_distance(A, B) -> float:
    return float(np.mean(nearest_distances(A, B)))


def chamfer(A, B) -> float:
    return directed_distance(A, B) + directed_distance(B, A)


def add_error(P_M, gt: RigidTransform, est: RigidTransform) -> float:
    """Average distance of model points between the two poses."""
    pts = as_points(P_M, name="P_M")
    diff = gt.apply(pts) - est.apply(pts)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


@dataclass(frozen=True)
class AlignmentReport:
    fitness_1cm: float
    fitness_2cm: float
    rmse_inlier: float
    dist_mesh_to_scene: float
    dist_scene_to_mesh: float
    has_inliers: bool = True

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.fitness_1cm, self.fitness_2cm, self.rmse_inlier,
                self.dist_mesh_to_scene, self.dist_scene_to_mesh)


def alignment_report(P_M_aligned, P, scene_index: NearestNeighbors | None = None) -> AlignmentReport:
    """Fitness at 1 and 2 cm, inlier RMSE at 1 cm and both directed distances."""
    mesh = as_points(P_M_aligned, name="P_M_aligned")
    scene = as_points(P, name="P")
    if scene_index is None:
        scene_index = NearestNeighbors(scene)
    d_ms = scene_index.query(mesh)[0]
    d_sm = NearestNeighbors(mesh).query(scene)[0]
    rmse = rmse_from_distances(d_ms, TAU_3)
    return AlignmentReport(
        fitness_1cm=float(np.count_nonzero(d_ms < TAU_1)) / len(d_ms),
        fitness_2cm=float(np.count_nonzero(d_ms < TAU_2)) / len(d_ms),
        rmse_inlier=rmse.value,
        dist_mesh_to_scene=float(np.mean(d_ms)),
        dist_scene_to_mesh=float(np.mean(d_sm)),
        has_inliers=rmse.has_inliers,
    )
