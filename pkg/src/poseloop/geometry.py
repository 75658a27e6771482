"""Core 3-D primitives shared by every other module.

Point clouds are plain ``(N, 3)`` float64 arrays in meters. Rigid transforms,
triangle meshes, farthest point sampling and nearest-neighbour search live
here, together with the ASCII point-cloud and OBJ-subset readers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class InvalidInputError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class ParseError(InvalidInputError):
    """Malformed cloud or mesh file; ``line`` is 1-based."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def as_points(points, name: str = "cloud", allow_empty: bool = False) -> np.ndarray:
    """Validate and return ``points`` as a contiguous ``(N, 3)`` float array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return arr


# ---------------------------------------------------------------------------
# rigid transforms


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3) acting on column vectors as ``R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("transform contains non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidInputError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_euler(cls, x, y, z, roll, pitch, yaw) -> RigidTransform:
        vals = np.array([x, y, z, roll, pitch, yaw], dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("from_euler needs finite inputs")
        R = _rot_z(vals[5]) @ _rot_y(vals[4]) @ _rot_x(vals[3])
        return cls(R, vals[:3])

    def to_euler(self) -> tuple[float, float, float, float, float, float]:
        """Inverse of :meth:`from_euler` (valid away from |pitch| = pi/2)."""
        R = self.rotation
        pitch = float(np.arcsin(np.clip(-R[2, 0], -1.0, 1.0)))
        roll = float(np.arctan2(R[2, 1], R[2, 2]))
        yaw = float(np.arctan2(R[1, 0], R[0, 0]))
        x, y, z = (float(v) for v in self.translation)
        return x, y, z, roll, pitch, yaw

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        pts = as_points(points, allow_empty=True)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        R = self.rotation @ other.rotation
        # re-orthonormalise to keep long composition chains inside the invariants
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return RigidTransform(R, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return self.compose(other)

    def flat(self) -> np.ndarray:
        """The 12 entries of ``[R | t]`` in row-major order."""
        return np.hstack([self.rotation, self.translation[:, None]]).reshape(-1)

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        return cls(np.array(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"])


def from_euler(x, y, z, roll, pitch, yaw) -> RigidTransform:
    return RigidTransform.from_euler(x, y, z, roll, pitch, yaw)


def apply_transform(T: RigidTransform, cloud) -> np.ndarray:
    return T.apply(cloud)


def invert(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    return A.compose(B)


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        V = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        F = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(V)):
            raise InvalidInputError("mesh vertices must be finite")
        if F.size and (F.min() < 0 or F.max() >= len(V)):
            raise InvalidInputError("face index out of range")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @property
    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def transformed(self, T: RigidTransform) -> TriangleMesh:
        return TriangleMesh(T.apply(self.vertices), self.faces)

    def merged(self, other: TriangleMesh) -> TriangleMesh:
        return TriangleMesh(
            np.vstack([self.vertices, other.vertices]),
            np.vstack([self.faces, other.faces + len(self.vertices)]),
        )

    def bounding_radius(self, center=None) -> float:
        c = self.vertices.mean(axis=0) if center is None else np.asarray(center)
        return float(np.max(np.linalg.norm(self.vertices - c, axis=1)))


def sample_mesh_with_faces(mesh: TriangleMesh, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted surface sampling; also returns the source face of each point."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if len(mesh.faces) == 0:
        raise InvalidInputError("mesh has no faces")
    areas = mesh.face_areas
    total = areas.sum()
    if not total > 0:
        raise InvalidInputError("mesh has only degenerate faces")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.triangles[face_idx]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return pts, face_idx


def sample_mesh(mesh: TriangleMesh, n: int = 2048, seed: int = 0) -> np.ndarray:
    return sample_mesh_with_faces(mesh, n, seed)[0]


# ---------------------------------------------------------------------------
# sampling and neighbour search


def farthest_point_sample(cloud, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidInputError(f"k={k} outside [1, {n}]")
    if not 0 <= start_index < n:
        raise InvalidInputError("start_index out of range")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start_index
    min_d2 = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
    return selected


def _sq_dists(pts: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.sum((pts - q) ** 2, axis=1)


_KD_THRESHOLD = 1000


def k_nearest(cloud, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points, ascending by distance, ties by index."""
    pts = as_points(cloud)
    q = np.asarray(query, dtype=np.float64).reshape(3)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidInputError(f"k={k} outside [1, {n}]")
    if n <= _KD_THRESHOLD:
        d2 = _sq_dists(pts, q)
        return np.lexsort((np.arange(n), d2))[:k]
    return NearestNeighbors(pts).k_nearest(q, k)


class NearestNeighbors:
    """Read-only kd-tree over a cloud; shareable across threads once built."""

    def __init__(self, cloud):
        self.points = as_points(cloud)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries, upper_bound: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Nearest neighbour of every query point: ``(distances, indices)``.

        Queries with no neighbour closer than ``upper_bound`` get distance
        ``inf`` and index ``len(self)``.
        """
        q = as_points(queries, name="queries", allow_empty=True)
        d, i = self._tree.query(q, k=1, distance_upper_bound=upper_bound)
        return np.asarray(d, dtype=np.float64), np.asarray(i, dtype=np.int64)

    def k_nearest(self, query, k: int) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64).reshape(3)
        n = len(self.points)
        if not 1 <= k <= n:
            raise InvalidInputError(f"k={k} outside [1, {n}]")
        d, _ = self._tree.query(q, k=k)
        radius = float(np.atleast_1d(d)[-1])
        # pull every point tied with the k-th one so the index tie rule is exact
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-15), dtype=np.int64)
        d2 = _sq_dists(self.points[cand], q)
        order = np.lexsort((cand, d2))
        return cand[order][:k]

    def k_nearest_batch(self, queries, k: int) -> np.ndarray:
        """kd-tree k-NN for many queries (tie order as returned by the tree)."""
        q = as_points(queries, name="queries")
        _, idx = self._tree.query(q, k=k)
        return np.asarray(idx, dtype=np.int64).reshape(len(q), k)


def centroid(cloud) -> np.ndarray:
    return as_points(cloud).mean(axis=0)


# ---------------------------------------------------------------------------
# file formats


def read_xyz(path) -> np.ndarray:
    """Read an ASCII ``x y z`` cloud; ``#`` lines are comments."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(path, lineno, "non-numeric field") from None
    if not rows:
        return np.zeros((0, 3))
    pts = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError(f"{path}: non-finite coordinate")
    return pts


def write_xyz(path, cloud, comment: str | None = None) -> None:
    pts = as_points(cloud, allow_empty=True)
    lines = [] if comment is None else [f"# {comment}"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    """Read the ``v``/``f`` subset of OBJ; only triangular faces are accepted."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if parts[0] == "v":
                if len(parts) != 4:
                    raise ParseError(path, lineno, "vertex needs 3 coordinates")
                try:
                    verts.append([float(p) for p in parts[1:]])
                except ValueError:
                    raise ParseError(path, lineno, "non-numeric vertex") from None
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ParseError(path, lineno, f"face with {len(parts) - 1} vertices, only triangles allowed")
                try:
                    faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
                except ValueError:
                    raise ParseError(path, lineno, "bad face index") from None
            else:
                raise ParseError(path, lineno, f"unsupported record '{parts[0]}'")
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
