from ..camera import CameraIntrinsics
from .dataset import (
    SPLITS, Sample, build_dataset, caption_tokens, caption_vocabulary, generate_sample, make_caption,
    split_sizes, stratified_assignment,
)
from .relations import (
    PREDICATES, SUPPORTED_RELATIONS, UnsupportedRelationError, compute_relation, evaluate_relation,
    supported_by_category,
)
from .scene import (
    CATEGORIES, GenerationError, Scene, SceneConfig, SceneObject, SpatialMaps, contains,
    generate_scene, on_screen, render, silhouette_edges, surface_distance,
)

__all__ = [
    "CATEGORIES", "CameraIntrinsics", "GenerationError", "PREDICATES", "SPLITS", "SUPPORTED_RELATIONS",
    "Sample", "Scene", "SceneConfig", "SceneObject", "SpatialMaps", "UnsupportedRelationError",
    "build_dataset", "caption_tokens", "caption_vocabulary", "compute_relation", "contains",
    "evaluate_relation", "generate_sample", "generate_scene", "make_caption", "on_screen", "render",
    "silhouette_edges", "split_sizes", "stratified_assignment", "supported_by_category",
    "surface_distance",
]
