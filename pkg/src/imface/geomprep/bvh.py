"""Closest-point queries on triangle meshes: exact per-triangle projection and a BVH.

Ties between triangles at equal distance resolve to the lowest face index, so
the accelerated query and the brute-force scan agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh

LEAF_SIZE = 8


def _dot(u, v):
    # explicit elementwise sum: the rounding must not depend on array layout
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def closest_points_on_triangles(p, a, b, c) -> np.ndarray:
    """Nearest point of each triangle ``(a, b, c)`` to ``p`` (broadcast, Voronoi-region tests)."""
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, float) for x in (p, a, b, c)))
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va, vb, vc = d3 * d6 - d5 * d4, d5 * d2 - d1 * d6, d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(p.shape[:-1], bool)

    def put(mask, value):
        nonlocal done
        m = mask & ~done
        out[m] = value[m]
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        t = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t[..., None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t[..., None] * ac)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + t[..., None] * (c - b))
        denom = va + vb + vc
        v, w = vb / denom, vc / denom
        put(np.ones_like(done), a + v[..., None] * ab + w[..., None] * ac)
    return out


def closest_point_on_triangle(p, a, b, c) -> np.ndarray:
    return closest_points_on_triangles(p, a, b, c)


@dataclass
class BVH:
    """Median-split bounding volume hierarchy over mesh faces.

    ``left[i] < 0`` marks a leaf whose faces are ``order[start[i]:start[i] + count[i]]``.
    """

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    kdtree: cKDTree

    @classmethod
    def build(cls, mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> BVH:
        tri = mesh.triangles()
        if not len(tri):
            raise ValueError("cannot build a BVH over an empty mesh")
        tlo, thi, cen = tri.min(1), tri.max(1), tri.mean(1)
        order = np.arange(len(tri))
        lo, hi, left, right, start, count = [], [], [], [], [], []
        stack = [(0, len(tri), -1, False)]
        while stack:
            s, e, parent, is_right = stack.pop()
            node = len(lo)
            idx = order[s:e]
            lo.append(tlo[idx].min(0))
            hi.append(thi[idx].max(0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            if parent >= 0:
                (right if is_right else left)[parent] = node
            if e - s <= leaf_size:
                continue
            c = cen[idx]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            order[s:e] = idx[np.argsort(c[:, axis], kind="stable")]
            mid = (s + e) // 2
            stack.append((mid, e, node, True))
            stack.append((s, mid, node, False))
        arr = lambda x, dt=np.int64: np.asarray(x, dt)
        return cls(np.array(lo), np.array(hi), arr(left), arr(right), arr(start), arr(count),
                   order, cKDTree(mesh.vertices))

    @property
    def n_nodes(self) -> int:
        return len(self.lo)


def _update_best(qi, face, d2, best_d2, best_face):
    """Per-query minimum of ``d2`` with lowest-face tie-breaking, merged into the running best."""
    o = np.lexsort((face, d2, qi))
    qi, face, d2 = qi[o], face[o], d2[o]
    first = np.ones(len(qi), bool)
    first[1:] = qi[1:] != qi[:-1]
    qi, face, d2 = qi[first], face[first], d2[first]
    better = (d2 < best_d2[qi]) | ((d2 == best_d2[qi]) & (face < best_face[qi]))
    best_d2[qi[better]] = d2[better]
    best_face[qi[better]] = face[better]


def _finish(points, tri, face):
    q = closest_points_on_triangles(points, tri[face, 0], tri[face, 1], tri[face, 2])
    return q, np.linalg.norm(points - q, axis=1), face


def closest_points(points, mesh: TriangleMesh, bvh: BVH | None = None):
    """Vectorised nearest surface points: returns ``(q (n,3), dist (n,), face (n,))``."""
    points = np.asarray(points, float).reshape(-1, 3)
    bvh = BVH.build(mesh) if bvh is None else bvh
    tri = mesh.triangles()
    n = len(points)
    # any vertex distance bounds the answer; inflate so rounding never prunes the optimum
    ub, _ = bvh.kdtree.query(points)
    thresh = (ub * (1 + 1e-9) + 1e-12) ** 2
    best_d2 = np.full(n, np.inf)
    best_face = np.full(n, np.iinfo(np.int64).max)
    qi = np.arange(n)
    node = np.zeros(n, np.int64)
    while len(qi):
        p = points[qi]
        gap = np.maximum(bvh.lo[node] - p, 0) + np.maximum(p - bvh.hi[node], 0)
        keep = _dot(gap, gap) <= np.minimum(thresh[qi], best_d2[qi])
        qi, node = qi[keep], node[keep]
        leaf = bvh.left[node] < 0
        lq, ln = qi[leaf], node[leaf]
        if len(lq):
            cnt = bvh.count[ln]
            rq = np.repeat(lq, cnt)
            offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            face = bvh.order[np.repeat(bvh.start[ln], cnt) + offs]
            qp = points[rq]
            cp = closest_points_on_triangles(qp, tri[face, 0], tri[face, 1], tri[face, 2])
            d = qp - cp
            _update_best(rq, face, _dot(d, d), best_d2, best_face)
        iq, inode = qi[~leaf], node[~leaf]
        qi = np.concatenate([iq, iq])
        node = np.concatenate([bvh.left[inode], bvh.right[inode]])
    return _finish(points, tri, best_face)


def brute_force_closest_points(points, mesh: TriangleMesh, chunk: int = 64):
    """O(n·m) reference for :func:`closest_points`."""
    points = np.asarray(points, float).reshape(-1, 3)
    tri = mesh.triangles()
    m = len(tri)
    best_d2 = np.full(len(points), np.inf)
    best_face = np.full(len(points), np.iinfo(np.int64).max)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, :]
        cp = closest_points_on_triangles(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        d = p - cp
        k = len(p)
        qi = np.repeat(np.arange(s, s + k), m)
        face = np.tile(np.arange(m), k)
        _update_best(qi, face, _dot(d, d).ravel(), best_d2, best_face)
    return _finish(points, tri, best_face)


def closest_point_on_mesh(p, mesh: TriangleMesh, bvh: BVH | None = None):
    """Single query: ``(q, dist, face_index)``."""
    q, d, f = closest_points(np.asarray(p, float)[None], mesh, bvh)
    return q[0], float(d[0]), int(f[0])
