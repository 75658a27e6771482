"""Built-in parametric object meshes.

Every object is built in its canonical frame: resting on ``z = 0`` with its
footprint roughly centred on the origin. Faces are wound counter-clockwise
seen from outside so face normals point outward.
"""
from __future__ import annotations

import numpy as np

from ..geometry import RigidTransform, TriangleMesh

_BOX_FACES = np.array([
    [0, 2, 1], [0, 3, 2],  # bottom (z-)
    [4, 5, 6], [4, 6, 7],  # top (z+)
    [0, 1, 5], [0, 5, 4],  # y-
    [2, 3, 7], [2, 7, 6],  # y+
    [1, 2, 6], [1, 6, 5],  # x+
    [3, 0, 4], [3, 4, 7],  # x-
])


def make_box(size, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    sx, sy, sz = (float(s) / 2 for s in size)
    cx, cy, cz = center
    v = np.array([
        [-sx, -sy, -sz], [sx, -sy, -sz], [sx, sy, -sz], [-sx, sy, -sz],
        [-sx, -sy, sz], [sx, -sy, sz], [sx, sy, sz], [-sx, sy, sz],
    ]) + [cx, cy, cz]
    return TriangleMesh(v, _BOX_FACES)


def make_cylinder(radius: float, height: float, segments: int = 24, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed cylinder along z, ``center`` is the middle of its axis."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.hstack([ring, np.full((segments, 1), -height / 2)])
    top = np.hstack([ring, np.full((segments, 1), height / 2)])
    v = np.vstack([bottom, top, [[0, 0, -height / 2], [0, 0, height / 2]]]) + np.asarray(center)
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + j], [i, segments + j, segments + i]]
        faces += [[cb, j, i], [ct, segments + i, segments + j]]
    return TriangleMesh(v, np.array(faces))


def combine(*meshes: TriangleMesh) -> TriangleMesh:
    out = meshes[0]
    for m in meshes[1:]:
        out = out.merged(m)
    return out


def make_l_bracket() -> TriangleMesh:
    """Two unequal slabs forming an L; no proper rotational symmetry."""
    base = make_box((0.14, 0.06, 0.02), center=(0.0, 0.0, 0.01))
    upright = make_box((0.02, 0.06, 0.08), center=(-0.06, 0.0, 0.06))
    return combine(base, upright)


def make_mug() -> TriangleMesh:
    body = make_cylinder(0.04, 0.10, segments=24, center=(0.0, 0.0, 0.05))
    # handle sits above the mid-height so top/bottom flips are distinguishable
    handle = make_box((0.035, 0.015, 0.05), center=(0.055, 0.0, 0.065))
    return combine(body, handle)


def make_step_block() -> TriangleMesh:
    lower = make_box((0.12, 0.08, 0.04), center=(0.0, 0.0, 0.02))
    upper = make_box((0.05, 0.04, 0.05), center=(0.03, 0.015, 0.065))
    return combine(lower, upper)


def make_occluder(width: float, height: float, thickness: float = 0.02) -> TriangleMesh:
    """Upright wall, canonical normal along +x, standing on ``z = 0``."""
    return make_box((thickness, width, height), center=(0.0, 0.0, height / 2))


OBJECT_LIBRARY = {
    "box": lambda: make_box((0.12, 0.08, 0.06), center=(0.0, 0.0, 0.03)),
    "cylinder": lambda: make_cylinder(0.04, 0.10, center=(0.0, 0.0, 0.05)),
    "l_bracket": make_l_bracket,
    "mug": make_mug,
    "step_block": make_step_block,
}

# symmetric shapes (box, cylinder) have ambiguous poses and stay out of generation
DEFAULT_OBJECTS = ("l_bracket", "mug", "step_block")


def get_object(name: str) -> TriangleMesh:
    try:
        return OBJECT_LIBRARY[name]()
    except KeyError:
        raise ValueError(f"unknown object {name!r}; choose from {sorted(OBJECT_LIBRARY)}") from None


def posed(mesh: TriangleMesh, pose: RigidTransform) -> TriangleMesh:
    return mesh.transformed(pose)
