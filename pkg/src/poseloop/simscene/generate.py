"""Synthetic scenes for the clean case and the three error cases.

Objects rest on the table plane ``z = 0``; the pose hypothesis is the
identity, i.e. the object expected at the workspace origin in its canonical
orientation. The table itself is cropped away, so rendered clouds contain the
target and, for occlusion scenes, the occluder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..geometry import RigidTransform, sample_mesh
from .corrupt import CorruptionSpec, corrupt_detailed
from .meshes import DEFAULT_OBJECTS, get_object, make_occluder
from .render import (
    DEFAULT_VIEWPOINT,
    Scene,
    SceneObject,
    Viewpoint,
    hemisphere_candidates,
    render_visible,
    visibility,
)

CASES = ("clean", "noise", "badinit", "occlusion")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_rays: int = 4000
    aperture_scale: float = 1.2  # ray disk radius / object bounding radius
    mesh_points: int = 2048
    clean_offset_max: float = 0.01
    clean_yaw_max: float = np.deg2rad(5.0)
    badinit_offset: tuple[float, float] = (0.15, 0.4)
    badinit_yaw: tuple[float, float] = (np.deg2rad(30.0), np.pi)
    occlusion_window: tuple[float, float] = (0.1, 0.5)
    occlusion_retries: int = 50
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    viewpoint: Viewpoint = DEFAULT_VIEWPOINT
    visibility_samples: int = 512


@dataclass(frozen=True)
class Occluder:
    width: float
    height: float
    pose: RigidTransform
    thickness: float = 0.02

    def mesh(self):
        return make_occluder(self.width, self.height, self.thickness).transformed(self.pose)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "thickness": self.thickness,
                "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> Occluder:
        return cls(d["width"], d["height"], RigidTransform.from_dict(d["pose"]), d.get("thickness", 0.02))


@dataclass(frozen=True, eq=False)
class SceneSample:
    case: str
    object_name: str
    seed: int
    observed: np.ndarray
    clean: np.ndarray
    mesh_cloud: np.ndarray
    gt_pose: RigidTransform
    init_pose: RigidTransform
    viewpoint: Viewpoint
    occluders: tuple[Occluder, ...] = ()
    aperture: float = 0.1
    n_rays: int = 4000
    visible_fraction: float = 1.0
    pose_offset: float = 0.0

    def scene(self) -> Scene:
        objs = [SceneObject(self.object_name, get_object(self.object_name).transformed(self.gt_pose), True)]
        objs += [SceneObject(f"occluder{i}", o.mesh()) for i, o in enumerate(self.occluders)]
        return Scene(objs)

    @property
    def target_center(self) -> np.ndarray:
        return object_center(self.object_name, self.gt_pose)


@lru_cache(maxsize=None)
def _canonical_cloud(name: str, n: int) -> np.ndarray:
    pts = sample_mesh(get_object(name), n, seed=0)
    pts.setflags(write=False)
    return pts


def mesh_cloud(name: str, n: int = 2048) -> np.ndarray:
    """The canonical model cloud used as ``P_M`` for object ``name``."""
    return _canonical_cloud(name, n)


def object_center(name: str, pose: RigidTransform) -> np.ndarray:
    v = get_object(name).vertices
    c = 0.5 * (v.min(axis=0) + v.max(axis=0))
    return pose.apply(c)[0]


def _yaw_pose(x: float, y: float, yaw: float) -> RigidTransform:
    return RigidTransform.from_euler(x, y, 0.0, 0.0, 0.0, yaw)


def _near_pose(rng, cfg: GenConfig) -> RigidTransform:
    r = cfg.clean_offset_max * np.sqrt(rng.random()) * 0.999
    a = rng.uniform(0, 2 * np.pi)
    yaw = rng.uniform(-cfg.clean_yaw_max, cfg.clean_yaw_max) * 0.999
    return _yaw_pose(r * np.cos(a), r * np.sin(a), yaw)


def _far_pose(rng, cfg: GenConfig) -> RigidTransform:
    r = rng.uniform(*cfg.badinit_offset)
    a = rng.uniform(0, 2 * np.pi)
    yaw = rng.uniform(*cfg.badinit_yaw) * rng.choice([-1.0, 1.0])
    return _yaw_pose(r * np.cos(a), r * np.sin(a), yaw)


def _render_target(scene: Scene, vp: Viewpoint, cfg: GenConfig, aperture: float, seed: int):
    return render_visible(scene, vp, cfg.n_rays, seed=seed, aperture=aperture)


def _place_occluder(rng, name: str, pose: RigidTransform, vp: Viewpoint,
                    cfg: GenConfig, aperture: float, seed: int, clean_count: int):
    base = get_object(name).transformed(pose)
    c = object_center(name, pose)
    r_xy = float(np.max(np.linalg.norm(base.vertices[:, :2] - c[:2], axis=1)))
    cam = vp.position
    u = cam[:2] - c[:2]
    u /= np.linalg.norm(u)
    perp = np.array([-u[1], u[0]])
    yaw = float(np.arctan2(u[1], u[0]))
    ring = hemisphere_candidates(vp.radius, look_at=tuple(c))
    for _ in range(cfg.occlusion_retries):
        dist = r_xy + rng.uniform(0.012, 0.03)
        lateral = rng.uniform(-0.05, 0.05)
        width = rng.uniform(0.08, 0.16)
        height = rng.uniform(0.10, 0.22)
        xy = c[:2] + dist * u + lateral * perp
        occ = Occluder(width, height, _yaw_pose(xy[0], xy[1], yaw))
        scene = Scene([SceneObject(name, base, True), SceneObject("occluder0", occ.mesh())])
        rend = _render_target(scene, vp, cfg, aperture, seed)
        frac = np.count_nonzero(rend.tags == 0) / max(clean_count, 1)
        lo, hi = cfg.occlusion_window
        if not lo <= frac <= hi:
            continue
        here = visibility(scene, vp, cfg.visibility_samples, seed)
        if max(visibility(scene, cand, cfg.visibility_samples, seed) for cand in ring) <= here:
            continue
        return occ, rend, frac
    raise GenerationError(f"no occluder placement inside {cfg.occlusion_window} after "
                          f"{cfg.occlusion_retries} tries (object={name}, seed={seed})")


def generate(case: str, object_name: str, seed: int, config: GenConfig | None = None) -> SceneSample:
    """Build one synthetic scene; deterministic in ``(case, object_name, seed)``."""
    cfg = config or GenConfig()
    if case not in CASES:
        raise ValueError(f"unknown case {case!r}; choose from {CASES}")
    rng = np.random.default_rng([seed, CASES.index(case), sum(map(ord, object_name))])
    init = RigidTransform.identity()
    pose = _far_pose(rng, cfg) if case == "badinit" else _near_pose(rng, cfg)

    mesh = get_object(object_name)
    center = object_center(object_name, pose)
    aperture = cfg.aperture_scale * mesh.bounding_radius(object_center(object_name, RigidTransform.identity()))
    vp = cfg.viewpoint.aimed_at(center)
    target_scene = Scene([SceneObject(object_name, mesh.transformed(pose), True)])
    clean = _render_target(target_scene, vp, cfg, aperture, seed).points
    if len(clean) == 0:
        raise GenerationError("object not visible from the recorded viewpoint")

    observed = clean
    occluders: tuple[Occluder, ...] = ()
    visible = 1.0
    if case == "noise":
        observed = corrupt_detailed(clean, cfg.corruption, seed).points
    elif case == "occlusion":
        occ, rend, visible = _place_occluder(rng, object_name, pose, vp, cfg, aperture, seed, len(clean))
        occluders = (occ,)
        observed = rend.points

    return SceneSample(
        case=case,
        object_name=object_name,
        seed=seed,
        observed=observed,
        clean=clean,
        mesh_cloud=mesh_cloud(object_name, cfg.mesh_points),
        gt_pose=pose,
        init_pose=init,
        viewpoint=vp,
        occluders=occluders,
        aperture=aperture,
        n_rays=cfg.n_rays,
        visible_fraction=float(visible),
        pose_offset=float(np.linalg.norm(pose.translation - init.translation)),
    )


def generate_many(cases, per_case: int, seed: int, objects=DEFAULT_OBJECTS,
                  config: GenConfig | None = None) -> list[SceneSample]:
    """``per_case`` samples of each case, cycling through ``objects``."""
    out = []
    for case in cases:
        for i in range(per_case):
            out.append(generate(case, objects[i % len(objects)], seed * 100_003 + i, config))
    return out
