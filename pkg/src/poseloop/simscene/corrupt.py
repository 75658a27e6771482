"""Structured noise: rigid translations of random surface patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import as_points


@dataclass(frozen=True)
class CorruptionSpec:
    n_patches: int = 2
    radius_range: tuple[float, float] = (0.05, 0.08)
    magnitude_range: tuple[float, float] = (0.01, 0.02)

    def __post_init__(self):
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius_range must be positive and ordered")
        lo, hi = self.magnitude_range
        if not 0 <= lo <= hi:
            raise ValueError("magnitude_range must be non-negative and ordered")
        if self.n_patches < 0:
            raise ValueError("n_patches must be >= 0")


@dataclass(frozen=True, eq=False)
class Corruption:
    points: np.ndarray
    anchors: np.ndarray  # (n_patches, 3)
    radii: np.ndarray
    shifts: np.ndarray  # (n_patches, 3)
    patch_of: np.ndarray  # (N,) index of the patch that moved each point, -1 if untouched


def corrupt_detailed(clean, spec: CorruptionSpec, seed: int) -> Corruption:
    """Shift every point within a patch radius of a seeded anchor by that patch's vector.

    Patches are applied in order; a point inside several patches takes the
    first one. Point order and count are preserved.
    """
    pts = as_points(clean, name="clean")
    rng = np.random.default_rng(seed)
    k = min(spec.n_patches, len(pts))
    anchor_idx = rng.choice(len(pts), size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    anchors = pts[anchor_idx]
    radii = rng.uniform(*spec.radius_range, size=k)
    dirs = rng.normal(size=(k, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    shifts = dirs * rng.uniform(*spec.magnitude_range, size=k)[:, None]
    patch_of = np.full(len(pts), -1, dtype=np.int64)
    for i in range(k):
        inside = (np.linalg.norm(pts - anchors[i], axis=1) <= radii[i]) & (patch_of < 0)
        patch_of[inside] = i
    out = pts.copy()
    moved = patch_of >= 0
    out[moved] += shifts[patch_of[moved]]
    return Corruption(out, anchors, radii, shifts, patch_of)


def corrupt(clean, spec: CorruptionSpec, seed: int) -> np.ndarray:
    return corrupt_detailed(clean, spec, seed).points
