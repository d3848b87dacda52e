"""Reconstruction, correspondence and evaluation."""

from .correspond import (CorrespondencePair, Correspondences, correspondence_map, deformation_errors,
                         ede_tde)
from .latent import SUBSETS, PCAResult, interpolate_codes, pca_embeddings, swap_codes
from .mcubes import VoxelGrid, extract_mesh, marching_cubes, sample_field
from .metrics import (N_EVAL_SAMPLES, MetricError, MetricReport, brute_force_distances, chamfer,
                      crop_to_footprint, evaluate_meshes, fscore, nearest_distances, normal_consistency, surface_points)

__all__ = [
    "CorrespondencePair", "Correspondences", "crop_to_footprint", "MetricError", "MetricReport", "N_EVAL_SAMPLES",
    "PCAResult", "SUBSETS", "VoxelGrid", "brute_force_distances", "chamfer", "correspondence_map",
    "deformation_errors", "ede_tde", "evaluate_meshes", "extract_mesh", "fscore", "interpolate_codes",
    "marching_cubes", "nearest_distances", "normal_consistency", "pca_embeddings", "sample_field",
    "surface_points", "swap_codes",
]
