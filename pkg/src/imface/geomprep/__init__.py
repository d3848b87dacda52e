"""Scan preprocessing: alignment, hidden-surface removal, re-triangulation and SDF sampling."""

from .align import (NOSE_DEPTH_MM, SPHERE_RADIUS_MM, AlignmentError, canonical_landmarks,
                    crop_to_sphere, normalize_and_crop, procrustes)
from .bvh import (BVH, brute_force_closest_points, closest_point_on_mesh,
                  closest_point_on_triangle, closest_points, closest_points_on_triangles)
from .delaunay import TriangulationError, delaunay_triangles, delaunay_xy, is_delaunay
from .mesh import (MeshError, TriangleMesh, load_mesh, read_landmarks, read_obj,
                   write_landmarks, write_obj)
from .predicates import incircle, orient2d
from .raycast import Hit, occluded_faces, ray_triangle_intersect, remove_hidden_surfaces
from .sampling import (SampleTriplet, Triplets, sample_training_points,
                       signed_distance_sample, signed_distance_samples)
from .scanrecord import ScanRecord, ScanRecordError, read_scan_record, write_scan_record


def preprocess(mesh: TriangleMesh, landmarks=None, align: str = "rigid",
               radius: float = SPHERE_RADIUS_MM) -> TriangleMesh:
    """Full surface pipeline: normalize and crop, drop occluded faces, re-triangulate on x-y."""
    out = normalize_and_crop(mesh, landmarks, align=align, radius=radius)
    out = remove_hidden_surfaces(out)
    out = delaunay_xy(out)
    return out.drop_degenerate()
