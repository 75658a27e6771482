"""Ray-cast depth rendering, visibility and discrete next-best-view selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import TriangleMesh, sample_mesh_with_faces

JITTER_SIGMA = 0.001


class NoViewError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    name: str
    mesh: TriangleMesh  # posed, world frame
    is_target: bool = False


@dataclass
class Scene:
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def target(self) -> SceneObject:
        for obj in self.objects:
            if obj.is_target:
                return obj
        raise ValueError("scene has no target object")

    def without_occluders(self) -> Scene:
        return Scene([o for o in self.objects if o.is_target])

    def triangles(self) -> tuple[np.ndarray, np.ndarray]:
        """All triangles ``(F, 3, 3)`` and the owning object index per face."""
        tris, owner = [], []
        for k, obj in enumerate(self.objects):
            tris.append(obj.mesh.triangles)
            owner.append(np.full(len(obj.mesh.faces), k))
        if not tris:
            return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64)
        return np.vstack(tris), np.concatenate(owner)


@dataclass(frozen=True)
class Viewpoint:
    """Camera on a hemisphere centred at ``center``, aimed at ``look_at``."""

    radius: float
    azimuth: float
    elevation: float
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not 0 < self.elevation <= np.pi / 2 + 1e-12:
            raise ValueError("elevation must lie in (0, pi/2]")

    @property
    def position(self) -> np.ndarray:
        ce = np.cos(self.elevation)
        return np.asarray(self.center) + self.radius * np.array([
            ce * np.cos(self.azimuth), ce * np.sin(self.azimuth), np.sin(self.elevation),
        ])

    def aimed_at(self, look_at) -> Viewpoint:
        return Viewpoint(self.radius, self.azimuth, self.elevation, tuple(float(v) for v in look_at), self.center)

    def to_dict(self) -> dict:
        return {"radius": self.radius, "azimuth": self.azimuth, "elevation": self.elevation,
                "look_at": list(self.look_at), "center": list(self.center)}

    @classmethod
    def from_dict(cls, d: dict) -> Viewpoint:
        return cls(d["radius"], d["azimuth"], d["elevation"], tuple(d["look_at"]), tuple(d["center"]))


DEFAULT_VIEWPOINT = Viewpoint(radius=0.8, azimuth=0.0, elevation=np.pi / 4)


def hemisphere_candidates(radius: float = 0.8, n_azimuth: int = 16,
                          elevations=(np.pi / 4, np.pi / 3), look_at=(0.0, 0.0, 0.0)) -> list[Viewpoint]:
    """Default discrete ring: ``n_azimuth`` steps at each elevation."""
    out = []
    for el in elevations:
        for k in range(n_azimuth):
            out.append(Viewpoint(radius, 2 * np.pi * k / n_azimuth, float(el), tuple(look_at)))
    return out


def ray_triangle_hits(origins: np.ndarray, dirs: np.ndarray, tris: np.ndarray,
                      eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit per ray (Moller-Trumbore). Returns ``(t, face)``; misses get ``inf, -1``.

    ``origins`` may be a single point or one per ray.
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), (n, 3))
    best_t = np.full(n, np.inf)
    best_f = np.full(n, -1, dtype=np.int64)
    if len(tris) == 0 or n == 0:
        return best_t, best_f
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    chunk = max(1, 400_000 // max(len(tris), 1))
    for s in range(0, n, chunk):
        d = dirs[s:s + chunk, None, :]
        o = origins[s:s + chunk, None, :]
        p = np.cross(d, e2[None])
        det = np.einsum("rfk,fk->rf", p, e1)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv = o - v0[None]
        u = np.einsum("rfk,rfk->rf", tv, p) * inv
        q = np.cross(tv, e1[None])
        v = np.einsum("rk,rfk->rf", d[:, 0], q) * inv
        t = np.einsum("fk,rfk->rf", e2, q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        f = np.argmin(t, axis=1)
        tmin = t[np.arange(len(f)), f]
        best_t[s:s + chunk] = tmin
        best_f[s:s + chunk] = np.where(np.isfinite(tmin), f, -1)
    return best_t, best_f


def _view_basis(forward: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    return right, np.cross(right, forward)


def ray_directions(viewpoint: Viewpoint, n_rays: int, seed: int, aperture: float) -> np.ndarray:
    """Unit directions from the camera through a disk of radius ``aperture`` at the look-at point."""
    cam = viewpoint.position
    target = np.asarray(viewpoint.look_at, dtype=np.float64)
    fwd = target - cam
    fwd /= np.linalg.norm(fwd)
    right, up = _view_basis(fwd)
    rng = np.random.default_rng(seed)
    r = aperture * np.sqrt(rng.random(n_rays))
    a = 2 * np.pi * rng.random(n_rays)
    pts = target + (r * np.cos(a))[:, None] * right + (r * np.sin(a))[:, None] * up
    d = pts - cam
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Rendering:
    points: np.ndarray  # (M, 3) hit points, jitter applied
    tags: np.ndarray  # (M,) index into scene.objects
    ray_ids: np.ndarray  # (M,) which ray produced each point

    def of(self, k: int) -> np.ndarray:
        return self.points[self.tags == k]


def render_visible(scene: Scene, viewpoint: Viewpoint, n_rays: int, seed: int = 0,
                   aperture: float = 0.15, jitter: float = JITTER_SIGMA) -> Rendering:
    """Cast ``n_rays`` seeded rays and keep the nearest intersection of each.

    Points are tagged by the object they hit; rays that miss everything are
    dropped. Gaussian jitter of ``jitter`` meters is added per coordinate.
    """
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    dirs = ray_directions(viewpoint, n_rays, seed, aperture)
    cam = viewpoint.position
    tris, owner = scene.triangles()
    t, f = ray_triangle_hits(cam, dirs, tris)
    hit = f >= 0
    pts = cam + t[hit, None] * dirs[hit]
    if jitter > 0:
        noise_rng = np.random.default_rng([seed, 7919])
        pts = pts + noise_rng.normal(0.0, jitter, size=pts.shape)
    return Rendering(pts, owner[f[hit]], np.nonzero(hit)[0])


def surface_samples(scene: Scene, n: int = 1024, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Points on the target surface with their outward face normals."""
    mesh = scene.target.mesh
    pts, faces = sample_mesh_with_faces(mesh, n, seed)
    return pts, mesh.face_normals[faces]


def visibility(scene: Scene, viewpoint: Viewpoint, n_rays: int = 1024, seed: int = 0) -> float:
    """Fraction of target surface samples that the camera sees.

    A sample counts when its outward normal faces the camera and the segment
    to the camera hits nothing before reaching it.
    """
    pts, normals = surface_samples(scene, n_rays, seed)
    cam = viewpoint.position
    to_cam = cam - pts
    dist = np.linalg.norm(to_cam, axis=1)
    dirs = to_cam / dist[:, None]
    facing = np.einsum("ij,ij->i", normals, dirs) > 0
    if not facing.any():
        return 0.0
    tris, _ = scene.triangles()
    # offset the origin slightly off the surface to avoid self-hits
    origins = pts[facing] + 1e-6 * dirs[facing]
    t, f = ray_triangle_hits(origins, dirs[facing], tris)
    clear = t >= dist[facing] - 1e-6
    return float(np.count_nonzero(clear)) / len(pts)


def next_best_view(scene: Scene, candidates: list[Viewpoint], n_rays: int = 1024, seed: int = 0,
                   render_rays: int = 3000, aperture: float = 0.15) -> tuple[Viewpoint, Rendering, list[float]]:
    """Pick the candidate with the highest target visibility (first on ties) and re-render."""
    if not candidates:
        raise ValueError("need at least one candidate viewpoint")
    scores = [visibility(scene, vp, n_rays, seed) for vp in candidates]
    best = int(np.argmax(scores))
    if scores[best] <= 0:
        raise NoViewError("target is invisible from every candidate")
    vp = candidates[best]
    return vp, render_visible(scene, vp, render_rays, seed, aperture), scores
