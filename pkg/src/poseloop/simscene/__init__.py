"""Synthetic scene generation, ray-cast rendering and next-best-view selection."""
from .corrupt import Corruption, CorruptionSpec, corrupt, corrupt_detailed
from .generate import (
    CASES,
    GenConfig,
    GenerationError,
    Occluder,
    SceneSample,
    generate,
    generate_many,
    mesh_cloud,
    object_center,
)
from .meshes import DEFAULT_OBJECTS, OBJECT_LIBRARY, get_object
from .render import (
    DEFAULT_VIEWPOINT,
    NoViewError,
    Rendering,
    Scene,
    SceneObject,
    Viewpoint,
    hemisphere_candidates,
    next_best_view,
    ray_triangle_hits,
    render_visible,
    visibility,
)
from .dataset import (
    DatasetError,
    load_dataset,
    load_sample,
    read_manifest,
    record_to_sample,
    sample_record,
    write_dataset,
)
