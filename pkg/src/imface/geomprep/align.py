"""Rigid landmark alignment and sphere cropping."""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh

SPHERE_RADIUS_MM = 100.0
NOSE_DEPTH_MM = 40.0


class AlignmentError(ValueError):
    pass


def canonical_landmarks(k: int = 5) -> np.ndarray:
    """Frontal reference layout (mm); the nose tip (index 2) sits 40 mm in front of the origin."""
    from ..model import default_landmarks
    return default_landmarks(k)


def procrustes(src: np.ndarray, dst: np.ndarray, scale: bool = False):
    """Least-squares ``s R src + t ~ dst`` (Kabsch/Umeyama, proper rotation)."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    ms, md = src.mean(0), dst.mean(0)
    a, b = src - ms, dst - md
    _, sv, _ = np.linalg.svd(a)
    if len(sv) < 2 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise AlignmentError("landmarks are collinear; alignment is undefined")
    u, sig, vt = np.linalg.svd(b.T @ a)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    D = np.diag([1.0, 1.0, d])
    R = u @ D @ vt
    s = float(np.trace(np.diag(sig) @ D) / np.sum(a * a)) if scale else 1.0
    return s, R, md - s * R @ ms


def crop_to_sphere(mesh: TriangleMesh, radius: float = SPHERE_RADIUS_MM) -> TriangleMesh:
    """Drop triangles with any vertex outside the sphere, then unreferenced vertices."""
    inside = np.linalg.norm(mesh.vertices, axis=1) <= radius
    keep = inside[mesh.faces].all(axis=1)
    cropped = mesh.with_faces(mesh.faces[keep])
    if cropped.landmark_indices is not None and not inside[cropped.landmark_indices].all():
        cropped.landmark_indices = None
    out, _ = cropped.compact()
    return out


def normalize_and_crop(mesh: TriangleMesh, landmarks: np.ndarray | None = None,
                       canonical: np.ndarray | None = None, nose_index: int = 2,
                       align: str = "rigid", radius: float = SPHERE_RADIUS_MM,
                       nose_depth: float = NOSE_DEPTH_MM) -> TriangleMesh:
    """Align a raw scan to the canonical frontal frame and crop it to the sampling sphere.

    ``align``: ``"rigid"`` (rotation from Procrustes on landmarks), ``"similarity"``
    (rotation plus uniform scale) or ``"none"`` (crop only). The translation
    always places the nose tip ``nose_depth`` mm in front of the origin on +z.
    """
    if landmarks is None:
        if mesh.landmark_indices is None:
            raise AlignmentError("no landmarks supplied")
        landmarks = mesh.vertices[mesh.landmark_indices]
    lm = np.asarray(landmarks, dtype=np.float64)
    if align not in ("rigid", "similarity", "none"):
        raise ValueError(f"unknown alignment mode {align!r}")
    out = mesh.copy()
    if align != "none":
        ref = canonical_landmarks(len(lm)) if canonical is None else np.asarray(canonical, float)
        s, R, _ = procrustes(lm, ref, scale=align == "similarity")
        v = s * out.vertices @ R.T
        nose = s * R @ lm[nose_index]
        out.vertices = v + (np.array([0.0, 0.0, nose_depth]) - nose)
    return crop_to_sphere(out, radius)
