"""Structured-noise removal by a learned displacement field.

The scene cloud is split into patches around farthest-point centres. Each
patch becomes a token (pooled per-point features plus a positional code),
tokens exchange information through a residual mixer, and are fused with
edge-convolution features of the canonical mesh cloud. A head predicts one
displacement per centre and every point moves by the inverse-distance
average of the displacements of its ``K`` nearest centres.

Coordinates enter the networks centred on the scene centroid and divided by
``coord_scale``; displacements leave the head in the same units.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import NearestNeighbors, as_points, farthest_point_sample
from .nnet import (
    FORMAT_VERSION,
    Network,
    TrainConfig,
    WeightFileError,
    chamfer_loss,
    dumps,
    train,
)

SINGULAR_DIST = 1e-9


class ReconstructionError(ValueError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    n_centers: int = 64  # I
    n_proxies: int = 64  # J
    patch_size: int = 32  # m
    n_propagate: int = 4  # K
    dim: int = 64  # d
    hidden: int = 32
    edge_k: int = 8
    coord_scale: float = 0.1
    local_scale: float = 0.01  # unit for patch-relative offsets and mesh edge vectors
    center_input: bool = False  # True: scene centroid as origin, False: hypothesis frame

    def __post_init__(self):
        for name in ("n_centers", "n_proxies", "patch_size", "n_propagate", "dim", "hidden", "edge_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_propagate > self.n_centers:
            raise ValueError("n_propagate cannot exceed n_centers")
        if not (self.coord_scale > 0 and self.local_scale > 0):
            raise ValueError("coord_scale and local_scale must be positive")


# ---------------------------------------------------------------------------
# geometry stages


@dataclass(frozen=True, eq=False)
class PatchSet:
    center_index: np.ndarray  # (I,) indices into P
    centers: np.ndarray  # (I, 3)
    members: np.ndarray  # (I, m) indices into P

    def __len__(self) -> int:
        return len(self.centers)


def patchify(P, n_centers: int, patch_size: int, index: NearestNeighbors | None = None) -> PatchSet:
    pts = as_points(P, name="P")
    if len(pts) < n_centers:
        raise ReconstructionError(f"cloud has {len(pts)} points, fewer than {n_centers} centres")
    if patch_size < 1 or patch_size > len(pts):
        raise ReconstructionError(f"patch size {patch_size} outside [1, {len(pts)}]")
    ci = farthest_point_sample(pts, n_centers, 0)
    index = index or NearestNeighbors(pts)
    members = index.k_nearest_batch(pts[ci], patch_size)
    return PatchSet(ci, pts[ci], members)


def propagation_weights(P, centers, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-distance weights of every point over its ``K`` nearest centres.

    Returns ``(neighbours (N, K), weights (N, K))``; rows sum to one. A point
    closer than ``SINGULAR_DIST`` to a centre takes that centre's weight 1.
    """
    pts = as_points(P, name="P")
    C = as_points(centers, name="centers")
    if not 1 <= K <= len(C):
        raise ReconstructionError(f"K={K} outside [1, {len(C)}]")
    d = np.sqrt(np.sum((pts[:, None, :] - C[None, :, :]) ** 2, axis=2))
    order = np.argsort(d, axis=1, kind="stable")[:, :K]
    dk = np.take_along_axis(d, order, axis=1)
    w = np.zeros_like(dk)
    singular = dk[:, 0] < SINGULAR_DIST
    w[singular, 0] = 1.0
    regular = ~singular
    inv = 1.0 / dk[regular]
    w[regular] = inv / inv.sum(axis=1, keepdims=True)
    return order, w


def propagate(P, centers, field, K: int) -> np.ndarray:
    pts = as_points(P, name="P")
    D = np.asarray(field, dtype=np.float64).reshape(-1, 3)
    if len(D) != len(as_points(centers, name="centers")):
        raise ReconstructionError("one displacement per centre is required")
    nb, w = propagation_weights(pts, centers, K)
    return pts + np.einsum("nk,nkc->nc", w, D[nb])


def _dense_weights(nb: np.ndarray, w: np.ndarray, n_centers: int) -> np.ndarray:
    W = np.zeros((len(nb), n_centers))
    np.add.at(W, (np.repeat(np.arange(len(nb)), nb.shape[1]), nb.reshape(-1)), w.reshape(-1))
    return W


# ---------------------------------------------------------------------------
# model


class TokenMixer:
    """Residual per-token block fed with the token and the mean over all tokens."""

    def __init__(self, net: Network):
        if net.input_dim != 2 * net.output_dim:
            raise ValueError("token mixer must map 2d -> d")
        self.net = net
        self.enabled = True

    @property
    def dim(self) -> int:
        return self.net.output_dim

    def forward(self, T: np.ndarray):
        if not self.enabled:
            return T, None
        ctx = np.broadcast_to(T.mean(axis=0), T.shape)
        out, cache = self.net.forward_cached(np.hstack([T, ctx]))
        return T + out, cache

    def backward(self, cache, dOut: np.ndarray):
        if cache is None:
            return [np.zeros_like(p) for p in self.net.parameters()], dOut
        grads, dZ = self.net.backward(cache, dOut)
        d = self.dim
        return grads, dOut + dZ[:, :d] + dZ[:, d:].mean(axis=0, keepdims=True)


@dataclass(frozen=True, eq=False)
class ProxySet:
    features: np.ndarray  # (J, d)
    source_index: np.ndarray  # (J,) FPS order
    points: np.ndarray  # (J, 3)


@dataclass(frozen=True, eq=False)
class FusedTokens:
    tokens: np.ndarray  # (I, d) after the decoder mixer
    weights: np.ndarray  # (I, J)


class ReconstructionModel:
    NETS = ("patch_encoder", "pos_encoder", "encoder_mixer", "edge_net", "fusion_scorer",
            "fusion_combiner", "decoder_mixer", "displacement_head")

    def __init__(self, config: ReconConfig, nets: dict[str, Network]):
        self.config = config
        d = config.dim
        expect = {
            "patch_encoder": (3, d), "pos_encoder": (3, d), "encoder_mixer": (2 * d, d),
            "edge_net": (6, d), "fusion_scorer": (2 * d, 1), "fusion_combiner": (2 * d, d),
            "decoder_mixer": (2 * d, d), "displacement_head": (3 + d, 3),
        }
        for name, (i, o) in expect.items():
            net = nets[name]
            if (net.input_dim, net.output_dim) != (i, o):
                raise ValueError(f"{name} must map {i} -> {o}, got {net.input_dim} -> {net.output_dim}")
        self.nets = {k: nets[k] for k in self.NETS}
        self.encoder_mixer = TokenMixer(self.nets["encoder_mixer"])
        self.decoder_mixer = TokenMixer(self.nets["decoder_mixer"])

    @classmethod
    def build(cls, config: ReconConfig | None = None, seed: int = 0) -> ReconstructionModel:
        c = config or ReconConfig()
        d, h = c.dim, c.hidden
        nets = {
            "patch_encoder": Network.build([3, h, d], "relu", "relu", seed=seed),
            "pos_encoder": Network.build([3, h, d], "relu", "identity", seed=seed + 1),
            "encoder_mixer": Network.build([2 * d, d, d], "relu", "identity", seed=seed + 2),
            "edge_net": Network.build([6, h, d], "relu", "relu", seed=seed + 3),
            "fusion_scorer": Network.build([2 * d, h, 1], "relu", "identity", seed=seed + 4),
            "fusion_combiner": Network.build([2 * d, d, d], "relu", "identity", seed=seed + 5),
            "decoder_mixer": Network.build([2 * d, d, d], "relu", "identity", seed=seed + 6),
            "displacement_head": Network.build([3 + d, h, 3], "relu", "identity", seed=seed + 7),
        }
        # start from the identity map: no displacement until trained
        head = nets["displacement_head"].layers[-1]
        head.weight[...] *= 0.1
        return cls(c, nets)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for name in self.NETS:
            out += self.nets[name].parameters()
        return out

    # -- stages --------------------------------------------------------------
    def _unit(self, x: np.ndarray) -> np.ndarray:
        return x / self.config.coord_scale

    def origin(self, pts: np.ndarray) -> np.ndarray:
        return pts.mean(axis=0) if self.config.center_input else np.zeros(3)

    def encode_patches(self, patches: PatchSet, P, origin=None, _cache: dict | None = None) -> np.ndarray:
        pts = as_points(P, name="P")
        origin = self.origin(pts) if origin is None else origin
        I, m = patches.members.shape
        local = ((pts[patches.members] - patches.centers[:, None, :]) / self.config.local_scale).reshape(I * m, 3)
        feats, enc_cache = self.nets["patch_encoder"].forward_cached(local)
        feats = feats.reshape(I, m, -1)
        arg = feats.argmax(axis=1)
        pooled = np.take_along_axis(feats, arg[:, None, :], axis=1)[:, 0, :]
        pos, pos_cache = self.nets["pos_encoder"].forward_cached(self._unit(patches.centers - origin))
        V, mix_cache = self.encoder_mixer.forward(pooled + pos)
        if _cache is not None:
            _cache.update(patch=(enc_cache, arg, I, m), pos=pos_cache, enc_mix=mix_cache)
        return V

    def mesh_proxies(self, P_M, J: int | None = None, _cache: dict | None = None) -> ProxySet:
        pts = as_points(P_M, name="P_M")
        J = self.config.n_proxies if J is None else J
        if len(pts) < J:
            raise ReconstructionError(f"mesh cloud has {len(pts)} points, fewer than {J} proxies")
        sel = farthest_point_sample(pts, J, 0)
        k = min(self.config.edge_k, len(pts) - 1)
        if k >= 1:
            nb = NearestNeighbors(pts).k_nearest_batch(pts[sel], k + 1)[:, 1:]
        else:
            nb = sel[:, None]
            k = 1
        xi = np.repeat(pts[sel][:, None, :], k, axis=1)
        edge_in = np.concatenate([self._unit(xi), (pts[nb] - xi) / self.config.local_scale], axis=2).reshape(J * k, 6)
        feats, edge_cache = self.nets["edge_net"].forward_cached(edge_in)
        feats = feats.reshape(J, k, -1)
        arg = feats.argmax(axis=1)
        O = np.take_along_axis(feats, arg[:, None, :], axis=1)[:, 0, :]
        if _cache is not None:
            _cache.update(edge=(edge_cache, arg, J, k))
        return ProxySet(O, sel, pts[sel])

    def fuse(self, V: np.ndarray, proxies: ProxySet, _cache: dict | None = None) -> FusedTokens:
        O = proxies.features if isinstance(proxies, ProxySet) else np.asarray(proxies)
        V = np.asarray(V, dtype=np.float64)
        if V.shape[1] != O.shape[1]:
            raise ValueError("token and proxy dims differ")
        I, J = len(V), len(O)
        pairs = np.concatenate([np.repeat(V[:, None, :], J, axis=1),
                                np.repeat(O[None, :, :], I, axis=0)], axis=2).reshape(I * J, -1)
        w, score_cache = self.nets["fusion_scorer"].forward_cached(pairs)
        w = w.reshape(I, J)
        S = w @ O
        U, comb_cache = self.nets["fusion_combiner"].forward_cached(np.hstack([V, S]))
        H, mix_cache = self.decoder_mixer.forward(U)
        if _cache is not None:
            _cache.update(score=score_cache, w=w, O=O, V=V, comb=comb_cache, dec_mix=mix_cache)
        return FusedTokens(H, w)

    def predict_displacements(self, fused: FusedTokens, centers, origin, _cache: dict | None = None) -> np.ndarray:
        H = fused.tokens if isinstance(fused, FusedTokens) else np.asarray(fused)
        C = as_points(centers, name="centers")
        if len(H) != len(C):
            raise ReconstructionError("token count differs from centre count")
        out, head_cache = self.nets["displacement_head"].forward_cached(np.hstack([self._unit(C - origin), H]))
        if _cache is not None:
            _cache.update(head=head_cache)
        return out * self.config.coord_scale

    # -- full pass -------------------------------------------------------------
    def forward(self, P, P_M, patches: PatchSet | None = None, _cache: dict | None = None):
        pts = as_points(P, name="P")
        c = self.config
        patches = patches or patchify(pts, c.n_centers, c.patch_size)
        origin = self.origin(pts)
        V = self.encode_patches(patches, pts, origin, _cache)
        fused = self.fuse(V, self.mesh_proxies(P_M, _cache=_cache), _cache)
        D = self.predict_displacements(fused, patches.centers, origin, _cache)
        return patches, D

    def reconstruct(self, P, P_M) -> np.ndarray:
        pts = as_points(P, name="P")
        patches, D = self.forward(pts, P_M)
        return propagate(pts, patches.centers, D, self.config.n_propagate)

    def backward(self, cache: dict, dD: np.ndarray) -> list[np.ndarray]:
        """Gradients of all parameters given the gradient w.r.t. the displacements."""
        grads: dict[str, list[np.ndarray]] = {}
        d = self.config.dim
        g_head, dX = self.nets["displacement_head"].backward(cache["head"], dD * self.config.coord_scale)
        grads["displacement_head"] = g_head
        g_dec, dU = self.decoder_mixer.backward(cache["dec_mix"], dX[:, 3:])
        grads["decoder_mixer"] = g_dec
        g_comb, dVS = self.nets["fusion_combiner"].backward(cache["comb"], dU)
        grads["fusion_combiner"] = g_comb
        dV = dVS[:, :d].copy()
        dS = dVS[:, d:]
        w, O = cache["w"], cache["O"]
        dw = dS @ O.T
        dO = w.T @ dS
        I, J = w.shape
        g_score, dpairs = self.nets["fusion_scorer"].backward(cache["score"], dw.reshape(I * J, 1))
        grads["fusion_scorer"] = g_score
        dpairs = dpairs.reshape(I, J, 2 * d)
        dV += dpairs[:, :, :d].sum(axis=1)
        dO += dpairs[:, :, d:].sum(axis=0)

        edge_cache, arg, Jn, k = cache["edge"]
        dfe = np.zeros((Jn, k, d))
        ji, hi = np.meshgrid(np.arange(Jn), np.arange(d), indexing="ij")
        dfe[ji, arg, hi] = dO
        grads["edge_net"], _ = self.nets["edge_net"].backward(edge_cache, dfe.reshape(Jn * k, d))

        g_mix, dT0 = self.encoder_mixer.backward(cache["enc_mix"], dV)
        grads["encoder_mixer"] = g_mix
        grads["pos_encoder"], _ = self.nets["pos_encoder"].backward(cache["pos"], dT0)
        enc_cache, arg, In, m = cache["patch"]
        dfp = np.zeros((In, m, d))
        ii, hi = np.meshgrid(np.arange(In), np.arange(d), indexing="ij")
        dfp[ii, arg, hi] = dT0
        grads["patch_encoder"], _ = self.nets["patch_encoder"].backward(enc_cache, dfp.reshape(In * m, d))
        out = []
        for name in self.NETS:
            out += grads[name]
        return out

    def sample_loss_and_grads(self, sample: ReconSample) -> tuple[float, list[np.ndarray]]:
        cache: dict = {}
        _, D = self.forward(sample.corrupted, sample.mesh_cloud, sample.patches, cache)
        pred = sample.corrupted + sample.prop @ D
        loss, dpred = chamfer_loss(pred, sample.clean)
        return loss, self.backward(cache, sample.prop.T @ dpred)

    def loss_and_grads(self, batch) -> tuple[float, list[np.ndarray]]:
        total = 0.0
        acc = [np.zeros_like(p) for p in self.parameters()]
        for s in batch:
            loss, g = self.sample_loss_and_grads(s)
            total += loss
            for a, gi in zip(acc, g):
                a += gi
        n = len(batch)
        return total / n, [a / n for a in acc]

    # -- persistence -------------------------------------------------------------
    def to_dict(self, metadata: dict | None = None) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "reconstruction",
            "config": asdict(self.config),
            "nets": {k: v.to_dict() for k, v in self.nets.items()},
            "metadata": metadata or {},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ReconstructionModel:
        if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "reconstruction":
            raise WeightFileError("not a reconstruction weight file of a supported version")
        try:
            config = ReconConfig(**d["config"])
            return cls(config, {k: Network.from_dict(v) for k, v in d["nets"].items()})
        except (KeyError, TypeError, ValueError) as exc:
            raise WeightFileError(f"inconsistent reconstruction model: {exc}") from None

    def save(self, path, metadata: dict | None = None) -> None:
        with open(path, "w") as fh:
            fh.write(dumps(self.to_dict(metadata)))

    @classmethod
    def load(cls, path) -> ReconstructionModel:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def reconstruct(model: ReconstructionModel, P, P_M) -> np.ndarray:
    return model.reconstruct(P, P_M)


@dataclass(frozen=True, eq=False)
class ReconSample:
    corrupted: np.ndarray
    clean: np.ndarray
    mesh_cloud: np.ndarray
    patches: PatchSet
    prop: np.ndarray  # (N, I) dense propagation weights


def prepare_sample(corrupted, clean, mesh_cloud, config: ReconConfig) -> ReconSample:
    """Precompute the patches and propagation weights, which do not depend on weights."""
    P = as_points(corrupted, name="corrupted")
    patches = patchify(P, config.n_centers, config.patch_size)
    nb, w = propagation_weights(P, patches.centers, config.n_propagate)
    return ReconSample(P, as_points(clean, name="clean"), as_points(mesh_cloud, name="mesh_cloud"),
                       patches, _dense_weights(nb, w, config.n_centers))


def train_reconstruction(dataset, config: TrainConfig | None = None, recon: ReconConfig | None = None,
                         model: ReconstructionModel | None = None):
    """Chamfer-loss training on ``(corrupted, clean, mesh_cloud)`` triples.

    Returns ``(model, history)``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ReconstructionError("empty training set")
    config = config or TrainConfig(loss_tag="chamfer", learning_rate=0.01, epochs=30, batch_size=8)
    if config.loss_tag != "chamfer":
        raise ValueError("reconstruction trains with the chamfer loss")
    model = model or ReconstructionModel.build(recon, seed=config.seed)
    samples = [prepare_sample(a, b, c, model.config) for a, b, c in dataset]
    return train(model, samples, config)
