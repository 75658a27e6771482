"""On-disk datasets: a JSON-lines manifest plus ASCII XYZ clouds.

Layout::

    DIR/manifest.jsonl          one record per sample
    DIR/samples/<id>.json       the same record, for single-sample tools
    DIR/clouds/<id>_observed.xyz
    DIR/clouds/<id>_clean.xyz
    DIR/meshes/<object>.xyz     canonical mesh cloud, shared by samples

Paths inside records are relative to the record's dataset root.
"""
from __future__ import annotations

import json
from pathlib import Path

from ..geometry import RigidTransform, read_xyz, write_xyz
from .generate import CASES, Occluder, SceneSample
from .render import Viewpoint

MANIFEST = "manifest.jsonl"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


def sample_id(sample: SceneSample, index: int) -> str:
    return f"{index:05d}_{sample.case}_{sample.object_name}_{sample.seed}"


def _pose(T: RigidTransform) -> dict:
    return T.to_dict()


def sample_record(sample: SceneSample, sid: str) -> dict:
    return {
        "format_version": DATASET_VERSION,
        "id": sid,
        "case": sample.case,
        "object": sample.object_name,
        "seed": sample.seed,
        "observed": f"clouds/{sid}_observed.xyz",
        "clean": f"clouds/{sid}_clean.xyz",
        "mesh_cloud": f"meshes/{sample.object_name}.xyz",
        "gt_pose": _pose(sample.gt_pose),
        "init_pose": _pose(sample.init_pose),
        "viewpoint": sample.viewpoint.to_dict(),
        "occluders": [o.to_dict() for o in sample.occluders],
        "aperture": sample.aperture,
        "n_rays": sample.n_rays,
        "visible_fraction": sample.visible_fraction,
        "pose_offset": sample.pose_offset,
    }


def write_dataset(samples, out_dir) -> Path:
    """Write ``samples`` under ``out_dir``; returns the manifest path."""
    root = Path(out_dir)
    for sub in ("clouds", "meshes", "samples"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    written_meshes = set()
    for i, s in enumerate(samples):
        sid = sample_id(s, i)
        rec = sample_record(s, sid)
        write_xyz(root / rec["observed"], s.observed)
        write_xyz(root / rec["clean"], s.clean)
        if s.object_name not in written_meshes:
            write_xyz(root / rec["mesh_cloud"], s.mesh_cloud)
            written_meshes.add(s.object_name)
        text = json.dumps(rec, sort_keys=True)
        (root / "samples" / f"{sid}.json").write_text(text + "\n")
        lines.append(text)
    manifest = root / MANIFEST
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def record_to_sample(rec: dict, root) -> SceneSample:
    root = Path(root)
    if rec.get("format_version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset format_version {rec.get('format_version')!r}")
    if rec.get("case") not in CASES:
        raise DatasetError(f"unknown case {rec.get('case')!r}")
    try:
        return SceneSample(
            case=rec["case"],
            object_name=rec["object"],
            seed=int(rec["seed"]),
            observed=read_xyz(root / rec["observed"]),
            clean=read_xyz(root / rec["clean"]),
            mesh_cloud=read_xyz(root / rec["mesh_cloud"]),
            gt_pose=RigidTransform.from_dict(rec["gt_pose"]),
            init_pose=RigidTransform.from_dict(rec["init_pose"]),
            viewpoint=Viewpoint.from_dict(rec["viewpoint"]),
            occluders=tuple(Occluder.from_dict(o) for o in rec["occluders"]),
            aperture=float(rec["aperture"]),
            n_rays=int(rec["n_rays"]),
            visible_fraction=float(rec["visible_fraction"]),
            pose_offset=float(rec["pose_offset"]),
        )
    except KeyError as exc:
        raise DatasetError(f"record {rec.get('id', '?')} lacks field {exc}") from None


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.is_file():
        raise DatasetError(f"no manifest at {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc.msg}") from None
    return records


def load_dataset(path) -> list[SceneSample]:
    """Load every sample of a dataset directory (or manifest file)."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    return [record_to_sample(r, root) for r in read_manifest(path)]


def load_sample(path) -> SceneSample:
    """Load one ``samples/<id>.json`` record; cloud paths resolve against its dataset root."""
    path = Path(path)
    try:
        rec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{exc.lineno}: {exc.msg}") from None
    root = path.parent.parent if path.parent.name == "samples" else path.parent
    return record_to_sample(rec, root)
