import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import fd_check
from poseloop.geometry import k_nearest
from poseloop.metrics import chamfer
from poseloop.nnet import TrainConfig, WeightFileError
from poseloop.reconstruct import (
    FusedTokens,
    PatchSet,
    ReconConfig,
    ReconstructionError,
    ReconstructionModel,
    patchify,
    prepare_sample,
    propagate,
    reconstruct,
    train_reconstruction,
)

seeds = st.integers(0, 2**31 - 1)
SMALL = ReconConfig(n_centers=8, n_proxies=6, patch_size=5, n_propagate=3, dim=6, hidden=5, edge_k=3)


def propagate_oracle(P, C, D, K):
    out = []
    for p in P:
        d = [float(np.sqrt(np.sum((p - c) ** 2))) for c in C]
        order = sorted(range(len(C)), key=lambda k: (d[k], k))[:K]
        if d[order[0]] < 1e-9:
            out.append(p + D[order[0]])
            continue
        a = [1.0 / d[k] for k in order]
        s = sum(a)
        out.append(p + sum(ai / s * D[k] for ai, k in zip(a, order)))
    return np.array(out)


def cloud(seed, n=200):
    return np.random.default_rng(seed).normal(scale=0.05, size=(n, 3))


# patchify

def test_patchify_every_point_own_patch():
    P = cloud(0, 30)
    ps = patchify(P, 30, 1)
    assert sorted(ps.center_index.tolist()) == list(range(30))
    assert np.array_equal(ps.members[:, 0], ps.center_index)


def test_patchify_matches_knn_oracle():
    P = cloud(1, 300)
    ps = patchify(P, 16, 12)
    assert len(ps) == 16
    for c, mem in zip(ps.centers, ps.members):
        assert mem.tolist() == k_nearest(P, c, 12).tolist()


def test_patchify_deterministic():
    P = cloud(2)
    a, b = patchify(P, 10, 8), patchify(P, 10, 8)
    assert np.array_equal(a.members, b.members) and np.array_equal(a.centers, b.centers)


def test_patchify_too_few_points():
    with pytest.raises(ReconstructionError):
        patchify(cloud(3, 5), 6, 2)


# encode_patches

def test_token_invariant_to_order_within_patch():
    model = ReconstructionModel.build(SMALL, seed=1)
    P = cloud(4)
    ps = patchify(P, 8, 5)
    r = np.random.default_rng(0)
    shuffled = PatchSet(ps.center_index, ps.centers, np.array([r.permutation(m) for m in ps.members]))
    assert np.array_equal(model.encode_patches(ps, P), model.encode_patches(shuffled, P))


def test_identical_patches_differ_by_position_code_only():
    model = ReconstructionModel.build(SMALL, seed=2)
    model.encoder_mixer.enabled = False
    local = np.random.default_rng(1).normal(scale=0.01, size=(5, 3))
    local -= local[0]
    shift = np.array([0.1, -0.05, 0.02])
    P = np.vstack([local, local + shift])
    ps = PatchSet(np.array([0, 5]), P[[0, 5]], np.array([np.arange(5), np.arange(5, 10)]))
    V = model.encode_patches(ps, P)
    pos = model.nets["pos_encoder"](model._unit(ps.centers - model.origin(P)))
    assert np.allclose(V[0] - V[1], pos[0] - pos[1], rtol=0, atol=1e-12)


def test_token_count():
    model = ReconstructionModel.build(SMALL)
    P = cloud(5)
    assert model.encode_patches(patchify(P, 8, 5), P).shape == (8, SMALL.dim)


# mesh_proxies

def test_single_proxy_is_fps_start():
    model = ReconstructionModel.build(SMALL)
    M = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float) * 0.05
    single = model.mesh_proxies(M, 1)
    full = model.mesh_proxies(M, 6)
    assert single.source_index.tolist() == [0]
    assert np.array_equal(single.features[0], full.features[0])


def test_difference_channels_translation_invariant():
    model = ReconstructionModel.build(SMALL, seed=3)
    # silence the absolute-position inputs so only the x_j - x_i channels remain
    model.nets["edge_net"].layers[0].weight[:, :3] = 0.0
    M = cloud(6, 100)
    a = model.mesh_proxies(M)
    b = model.mesh_proxies(M + np.array([0.3, -0.2, 0.1]))
    assert np.allclose(a.features, b.features, rtol=0, atol=1e-12)
    assert np.array_equal(a.source_index, b.source_index)


def test_proxy_count_and_too_small_mesh():
    model = ReconstructionModel.build(SMALL)
    assert len(model.mesh_proxies(cloud(7, 50)).features) == SMALL.n_proxies
    with pytest.raises(ReconstructionError):
        model.mesh_proxies(cloud(7, 4))


# fuse

def _weighted_sum(fused, O):
    return fused.weights @ O


def test_fuse_constant_scorer_closed_form():
    model = ReconstructionModel.build(SMALL, seed=4)
    last = model.nets["fusion_scorer"].layers[-1]
    last.weight[...] = 0.0
    last.bias[...] = 0.7
    o = np.random.default_rng(0).normal(size=SMALL.dim)
    O = np.tile(o, (5, 1))
    V = np.random.default_rng(1).normal(size=(4, SMALL.dim))
    fused = model.fuse(V, O)
    assert np.allclose(_weighted_sum(fused, O), np.tile(5 * 0.7 * o, (4, 1)), rtol=0, atol=1e-12)


def test_fuse_zero_scorer():
    model = ReconstructionModel.build(SMALL, seed=5)
    for p in model.nets["fusion_scorer"].parameters():
        p[...] = 0.0
    r = np.random.default_rng(2)
    O = r.normal(size=(3, SMALL.dim))
    fused = model.fuse(r.normal(size=(4, SMALL.dim)), O)
    assert np.all(_weighted_sum(fused, O) == 0.0)


def test_fuse_matches_double_loop():
    model = ReconstructionModel.build(SMALL, seed=6)
    r = np.random.default_rng(3)
    V, O = r.normal(size=(2, SMALL.dim)), r.normal(size=(3, SMALL.dim))
    fused = model.fuse(V, O)
    scorer, comb = model.nets["fusion_scorer"], model.nets["fusion_combiner"]
    U = []
    for i in range(2):
        s = np.zeros(SMALL.dim)
        for j in range(3):
            w = scorer(np.concatenate([V[i], O[j]]))[0]
            assert abs(w - fused.weights[i, j]) <= 1e-12
            s = s + w * O[j]
        U.append(comb(np.concatenate([V[i], s])))
    U = np.array(U)
    mix = model.nets["decoder_mixer"]
    H = np.array([U[i] + mix(np.concatenate([U[i], U.mean(axis=0)])) for i in range(2)])
    assert np.allclose(fused.tokens, H, rtol=0, atol=1e-12)


def test_fuse_dimension_mismatch():
    model = ReconstructionModel.build(SMALL)
    with pytest.raises(ValueError):
        model.fuse(np.zeros((2, SMALL.dim)), np.zeros((3, SMALL.dim + 1)))


# predict_displacements

def test_zero_head_gives_zero_displacements():
    model = ReconstructionModel.build(SMALL)
    for p in model.nets["displacement_head"].parameters():
        p[...] = 0.0
    r = np.random.default_rng(0)
    D = model.predict_displacements(FusedTokens(r.normal(size=(8, SMALL.dim)), np.zeros((8, 1))),
                                    r.normal(size=(8, 3)), np.zeros(3))
    assert D.shape == (8, 3) and np.all(D == 0)


def test_displacements_finite_fuzz():
    model = ReconstructionModel.build(SMALL, seed=7)
    r = np.random.default_rng(1)
    H = r.normal(scale=10, size=(10000, SMALL.dim))
    C = r.uniform(-1, 1, size=(10000, 3))
    D = model.predict_displacements(H, C, np.zeros(3))
    assert D.shape == (10000, 3) and np.all(np.isfinite(D))


def test_displacement_count_mismatch():
    model = ReconstructionModel.build(SMALL)
    with pytest.raises(ReconstructionError):
        model.predict_displacements(np.zeros((3, SMALL.dim)), np.zeros((4, 3)), np.zeros(3))


# propagate

def test_propagate_k1_takes_nearest_centre():
    P = cloud(8, 50)
    C = P[:5]
    D = np.random.default_rng(0).normal(size=(5, 3))
    out = propagate(P, C, D, 1)
    nearest = [k_nearest(C, p, 1)[0] for p in P]
    assert np.allclose(out - P, D[nearest], rtol=0, atol=1e-15)


def test_propagate_equidistant_midpoint():
    C = np.array([[-1.0, 0, 0], [1.0, 0, 0]])
    D = np.array([[0, 0, 1.0], [0, 2.0, 0]])
    out = propagate([[0, 0.5, 0]], C, D, 2)
    assert np.allclose(out, [[0, 0.5 + 1.0, 0.5]], atol=1e-15)


def test_propagate_centres_move_exactly():
    P = cloud(9, 40)
    D = np.random.default_rng(1).normal(size=(6, 3))
    out = propagate(P, P[:6], D, 4)
    assert np.array_equal(out[:6], P[:6] + D)


def test_propagate_matches_double_loop():
    r = np.random.default_rng(10)
    P = r.normal(size=(200, 3))
    C = P[r.choice(200, 16, replace=False)]
    D = r.normal(size=(16, 3))
    assert np.max(np.abs(propagate(P, C, D, 4) - propagate_oracle(P, C, D, 4))) <= 1e-12


def test_propagate_k_too_large():
    with pytest.raises(ReconstructionError):
        propagate(cloud(0, 10), cloud(1, 3), np.zeros((3, 3)), 4)


@given(seeds)
def test_propagate_zero_field_is_identity(seed):
    P = cloud(seed % 10000, 60)
    assert np.array_equal(propagate(P, P[:7], np.zeros((7, 3)), 3), P)


@given(seeds)
def test_propagate_translation_equivariant(seed):
    r = np.random.default_rng(seed)
    P = r.normal(size=(50, 3))
    C = r.normal(size=(6, 3))
    D = r.normal(size=(6, 3))
    v = r.normal(size=3)
    a = propagate(P + v, C + v, D, 3)
    b = propagate(P, C, D, 3) + v
    assert np.allclose(a, b, rtol=0, atol=1e-9)


# full model

def test_reconstruct_preserves_count_and_order():
    model = ReconstructionModel.build(SMALL, seed=8)
    P, M = cloud(11, 120), cloud(12, 80)
    out = reconstruct(model, P, M)
    assert out.shape == P.shape
    patches, D = model.forward(P, M)
    assert np.array_equal(out, propagate(P, patches.centers, D, SMALL.n_propagate))


def test_full_model_gradient_matches_finite_differences():
    model = ReconstructionModel.build(SMALL, seed=9)
    # zero biases put the patch centre (local offset 0) exactly on a ReLU kink
    r = np.random.default_rng(1)
    for net in model.nets.values():
        for layer in net.layers:
            layer.bias[...] = r.normal(scale=0.1, size=layer.bias.shape)
    sample = prepare_sample(cloud(13, 60), cloud(13, 60) + 0.003, cloud(14, 40), SMALL)
    _, grads = model.sample_loss_and_grads(sample)
    worst = fd_check(model.parameters(), grads, lambda: model.sample_loss_and_grads(sample)[0],
                     max_per_param=6, rng=np.random.default_rng(0))
    assert worst < 1e-4


def test_identity_data_is_fixed_point():
    data = [(cloud(s, 120), cloud(s, 120), cloud(100 + s, 80)) for s in range(6)]
    cfg = TrainConfig(loss_tag="chamfer", learning_rate=0.01, epochs=15, batch_size=3)
    model, hist = train_reconstruction(data, cfg, SMALL)
    P = cloud(50, 120)
    assert chamfer(reconstruct(model, P, cloud(51, 80)), P) < 1e-3


def test_training_reproducible_and_round_trips(tmp_path):
    data = [(cloud(s, 100) + 0.002, cloud(s, 100), cloud(100 + s, 80)) for s in range(4)]
    cfg = TrainConfig(loss_tag="chamfer", learning_rate=0.01, epochs=2, batch_size=2, seed=5)
    a, ha = train_reconstruction(data, cfg, SMALL)
    b, hb = train_reconstruction(data, cfg, SMALL)
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert ha.losses == hb.losses
    back = ReconstructionModel.load(tmp_path / "a.json")
    P, M = cloud(60, 100), cloud(61, 80)
    assert np.array_equal(reconstruct(back, P, M), reconstruct(a, P, M))


def test_weight_file_validates_chaining():
    doc = ReconstructionModel.build(SMALL).to_dict()
    doc["config"]["dim"] = SMALL.dim + 1
    with pytest.raises(WeightFileError):
        ReconstructionModel.from_dict(doc)


def test_rejects_non_chamfer_loss():
    with pytest.raises(ValueError):
        train_reconstruction([(cloud(0), cloud(0), cloud(1))], TrainConfig(loss_tag="cross-entropy"), SMALL)


def test_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(n_centers=2, n_propagate=3)
    with pytest.raises(ValueError):
        ReconConfig(dim=0)
