"""Möller–Trumbore ray casting and frontal hidden-surface removal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh

DET_EPS = 1e-12


@dataclass(frozen=True)
class Hit:
    t: float
    u: float
    v: float


def ray_triangles(origins, dirs, v0, v1, v2, t_min: float = 0.0):
    """Vectorised Möller–Trumbore over broadcast rays and triangles.

    Returns ``(hit, t, u, v)``; a hit needs ``t > t_min``, ``u, v >= 0`` and
    ``u + v <= 1``. Rays parallel to the triangle plane miss.
    """
    o, d = np.asarray(origins, float), np.asarray(dirs, float)
    v0, v1, v2 = (np.asarray(a, float) for a in (v0, v1, v2))
    e1, e2 = v1 - v0, v2 - v0
    pv = np.cross(d, e2)
    det = np.sum(e1 * pv, axis=-1)
    ok = np.abs(det) > DET_EPS * np.linalg.norm(e1, axis=-1) * np.linalg.norm(e2, axis=-1)
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    tv = o - v0
    u = np.sum(tv * pv, axis=-1) * inv
    qv = np.cross(tv, e1)
    v = np.sum(d * qv, axis=-1) * inv
    t = np.sum(e2 * qv, axis=-1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min)
    return hit, t, u, v


def ray_triangle_intersect(origin, direction, v0, v1, v2, eps: float = 0.0) -> Hit | None:
    """Single ray/triangle test; ``None`` on a miss."""
    if not np.linalg.norm(direction) > 0:
        raise ValueError("ray direction must be non-zero")
    hit, t, u, v = ray_triangles(origin, direction, v0, v1, v2, t_min=eps)
    return Hit(float(t), float(u), float(v)) if bool(hit) else None


def _xy_bins(tri: np.ndarray, n_bins: int):
    lo, hi = tri[..., :2].min(axis=(0, 1)), tri[..., :2].max(axis=(0, 1))
    size = np.maximum(hi - lo, 1e-12) / n_bins
    return lo, size


def occluded_faces(mesh: TriangleMesh, eps: float | None = None) -> np.ndarray:
    """Boolean mask of faces whose centroid ray toward +z hits another face."""
    tri = mesh.triangles()
    m = len(tri)
    if m == 0:
        return np.zeros(0, bool)
    scale = float(np.abs(mesh.vertices).max()) or 1.0
    eps = 1e-6 * scale if eps is None else eps
    cen = tri.mean(axis=1)
    origins = cen + np.array([0.0, 0.0, eps])
    # all rays are vertical, so only triangles whose xy box covers the centroid matter
    n_bins = max(1, int(np.sqrt(m / 4)))
    lo, size = _xy_bins(tri, n_bins)
    bmin = np.clip(((tri[..., :2].min(1) - lo) / size).astype(int), 0, n_bins - 1)
    bmax = np.clip(((tri[..., :2].max(1) - lo) / size).astype(int), 0, n_bins - 1)
    cells: dict[tuple[int, int], list[int]] = {}
    for f in range(m):
        for i in range(bmin[f, 0], bmax[f, 0] + 1):
            for j in range(bmin[f, 1], bmax[f, 1] + 1):
                cells.setdefault((i, j), []).append(f)
    qc = np.clip(((cen[:, :2] - lo) / size).astype(int), 0, n_bins - 1)
    rays, cands = [], []
    for f in range(m):
        c = cells.get((qc[f, 0], qc[f, 1]), ())
        rays.extend([f] * len(c))
        cands.extend(c)
    rays, cands = np.array(rays, np.int64), np.array(cands, np.int64)
    keep = rays != cands
    rays, cands = rays[keep], cands[keep]
    out = np.zeros(m, bool)
    if len(rays):
        up = np.array([0.0, 0.0, 1.0])
        hit, *_ = ray_triangles(origins[rays], up, tri[cands, 0], tri[cands, 1], tri[cands, 2], eps)
        out[rays[hit]] = True
    return out


def remove_hidden_surfaces(mesh: TriangleMesh, eps: float | None = None) -> TriangleMesh:
    """Keep only faces visible from the frontal (+z) view; unreferenced vertices are dropped."""
    keep = ~occluded_faces(mesh, eps)
    out, _ = mesh.with_faces(mesh.faces[keep]).compact()
    return out
