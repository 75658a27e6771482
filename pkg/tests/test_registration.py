import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_transform, unit_cube
from poseloop.geometry import NearestNeighbors, RigidTransform, compose, from_euler, sample_mesh
from poseloop.metrics import add_error
from poseloop.registration import (
    DegenerateCorrespondenceError,
    IcpConfig,
    NoOverlapError,
    icp,
    icp_or_last,
    kabsch,
)
from poseloop.geometry import InvalidInputError

seeds = st.integers(0, 2**31 - 1)


def cube_cloud(n=3000, side=0.1, seed=0):
    return sample_mesh(unit_cube(), n, seed) * side - side / 2


def sse(T, src, dst):
    return float(np.sum((T.apply(src) - dst) ** 2))


# kabsch

def test_kabsch_identity(rng):
    P = rng.normal(size=(20, 3))
    assert kabsch(P, P).allclose(RigidTransform.identity(), atol=1e-12)


def test_kabsch_exact_recovery(rng):
    P = rng.normal(size=(50, 3))
    T = random_transform(rng)
    est = kabsch(P, T.apply(P))
    assert np.linalg.norm(est.rotation - T.rotation) < 1e-9
    assert np.linalg.norm(est.translation - T.translation) < 1e-9


def test_kabsch_noisy_is_least_squares(rng):
    for _ in range(20):
        P = rng.normal(scale=0.1, size=(100, 3))
        T = random_transform(rng)
        Q = T.apply(P) + rng.normal(scale=0.001, size=P.shape)
        assert sse(kabsch(P, Q), P, Q) <= sse(T, P, Q)


def test_kabsch_excludes_reflection(rng):
    P = rng.normal(size=(30, 3))
    Q = P * np.array([1.0, 1.0, -1.0])
    assert np.linalg.det(kabsch(P, Q).rotation) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize(
    "src",
    [
        [[0, 0, 0], [1, 0, 0]],
        [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]],
    ],
)
def test_kabsch_degenerate(src):
    with pytest.raises(DegenerateCorrespondenceError):
        kabsch(src, src)


def test_kabsch_length_mismatch(rng):
    with pytest.raises(DegenerateCorrespondenceError):
        kabsch(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))


@given(seeds)
def test_kabsch_output_valid(seed):
    r = np.random.default_rng(seed)
    R = kabsch(r.normal(size=(8, 3)), r.normal(size=(8, 3))).rotation
    assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-9
    assert abs(np.linalg.det(R) - 1) <= 1e-9


# icp

def test_config_validation():
    for bad in ({"max_iterations": 0}, {"correspondence_max_dist": 0.0}, {"convergence_tol": -1.0}):
        with pytest.raises(InvalidInputError):
            IcpConfig(**bad)


def test_icp_self_alignment():
    P = cube_cloud()
    res = icp(P, P)
    assert res.transform.allclose(RigidTransform.identity(), atol=1e-9)
    assert res.fitness == 1.0
    assert res.inlier_rmse == pytest.approx(0.0, abs=1e-12)
    assert res.converged


def test_icp_small_offset_recovered():
    P = cube_cloud(4000)
    gt = from_euler(0.005, 0, 0, 0, 0, np.deg2rad(5))
    res = icp(P, gt.apply(P), RigidTransform.identity())
    assert add_error(P, gt, res.transform) < 1e-3


def test_icp_no_overlap_carries_estimate():
    P = cube_cloud(500)
    init = RigidTransform.identity()
    with pytest.raises(NoOverlapError) as exc:
        icp(P, P + np.array([1.0, 0, 0]), init)
    assert exc.value.transform.allclose(init, atol=0)


def test_icp_or_last_returns_estimate():
    P = cube_cloud(500)
    res = icp_or_last(P, P + np.array([1.0, 0, 0]))
    assert res.fitness == 0.0
    assert res.transform.allclose(RigidTransform.identity(), atol=0)


def test_icp_rmse_descends_with_fixed_correspondences():
    P = cube_cloud(2000)
    target = from_euler(0.004, -0.003, 0.002, 0.02, -0.03, 0.05).apply(P)
    index = NearestNeighbors(target)
    cfg = IcpConfig(max_iterations=25, convergence_tol=0.0, correspondence_max_dist=0.02)
    full = icp(P, target, config=cfg).rmse_history
    prev_set = None
    checked = 0
    for k in range(1, len(full) + 1):
        # estimate used at iteration k is the result after k-1 steps
        T = RigidTransform.identity() if k == 1 else icp(
            P, target, config=IcpConfig(max_iterations=k - 1, convergence_tol=0.0, correspondence_max_dist=0.02)
        ).transform
        d, j = index.query(T.apply(P))
        cur = frozenset(zip(np.flatnonzero(d < 0.02).tolist(), j[d < 0.02].tolist()))
        if prev_set is not None and cur == prev_set:
            assert full[k - 1] <= full[k - 2] + 1e-15
            checked += 1
        prev_set = cur
    assert checked > 0


@given(seeds)
def test_icp_self_is_identity(seed):
    P = np.random.default_rng(seed).normal(scale=0.05, size=(60, 3))
    res = icp(P, P, config=IcpConfig(min_correspondences=3))
    assert res.transform.allclose(RigidTransform.identity(), atol=1e-9)


@given(seeds)
def test_icp_equivariance(seed):
    r = np.random.default_rng(seed)
    P = cube_cloud(800, seed=seed % 1000)
    target = from_euler(*r.uniform(-0.004, 0.004, 3), *r.uniform(-0.05, 0.05, 3)).apply(P)
    init = from_euler(*r.uniform(-0.002, 0.002, 3), *r.uniform(-0.02, 0.02, 3))
    G = random_transform(r)
    cfg = IcpConfig(max_iterations=30)
    base = icp(P, target, init, cfg).transform
    moved = icp(P, G.apply(target), compose(G, init), cfg).transform
    assert compose(G, base).allclose(moved, atol=1e-6)
    R = moved.rotation
    assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-9
