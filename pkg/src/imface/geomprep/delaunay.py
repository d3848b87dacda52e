"""Delaunay re-triangulation of a mesh on its x-y projection.

Incremental Bowyer–Watson insertion over a triangulation of the whole plane:
every hull edge carries an "infinite" triangle whose third vertex is a
symbolic point at infinity (index -1). All geometric decisions use exact
predicates. Cocircular ties are broken by a symbolic perturbation that lowers
the paraboloid lift of lower-indexed points first, so the output is unique
and does not depend on insertion order or platform.
"""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh
from .predicates import incircle_many, incircle_scalar, orient2d_scalar

INF = -1


class TriangulationError(ValueError):
    pass


class _Triangulation:
    def __init__(self, pts: np.ndarray):
        self.x = pts[:, 0].tolist()
        self.y = pts[:, 1].tolist()
        self.tris: list[list[int]] = []
        self.nbr: list[list[int]] = []
        self.free: list[int] = []
        self.alive: list[bool] = []
        self.step = 0

    def orient(self, a: int, b: int, c: int) -> int:
        x, y = self.x, self.y
        return orient2d_scalar(x[a], y[a], x[b], y[b], x[c], y[c])

    def between(self, p: int, a: int, b: int) -> bool:
        """``p`` strictly inside segment ``ab``; collinearity is assumed."""
        x, y = self.x, self.y
        if x[a] != x[b]:
            return min(x[a], x[b]) < x[p] < max(x[a], x[b])
        return min(y[a], y[b]) < y[p] < max(y[a], y[b])

    def in_circle(self, a: int, b: int, c: int, d: int) -> bool:
        """Perturbed test: is ``d`` inside the circle through CCW ``a, b, c``?"""
        x, y = self.x, self.y
        s = incircle_scalar(x[a], y[a], x[b], y[b], x[c], y[c], x[d], y[d])
        if s:
            return s > 0
        q = min(a, b, c, d)
        if q == d:
            return True
        # lowering q's lift puts d inside iff d is across the edge opposite q
        if q == a:
            return self.orient(b, c, d) < 0
        if q == b:
            return self.orient(c, a, d) < 0
        return self.orient(a, b, d) < 0

    def hull_side(self, v: list[int], p: int) -> bool:
        """Does ``p`` lie in the open region of the infinite triangle ``v``?"""
        k = v.index(INF)
        a, b = v[(k + 1) % 3], v[(k + 2) % 3]
        o = self.orient(a, b, p)
        return o > 0 or (o == 0 and self.between(p, a, b))

    def conflict(self, t: int, p: int) -> bool:
        v = self.tris[t]
        if INF in v:
            return self.hull_side(v, p)
        return self.in_circle(v[0], v[1], v[2], p)

    def new(self, v: list[int]) -> int:
        if self.free:
            t = self.free.pop()
            self.tris[t] = v
            self.nbr[t] = [-1, -1, -1]
            self.alive[t] = True
            return t
        self.tris.append(v)
        self.nbr.append([-1, -1, -1])
        self.alive.append(True)
        return len(self.tris) - 1

    def start(self, a: int, b: int, c: int) -> int:
        if self.orient(a, b, c) < 0:
            b, c = c, b
        ts = [self.new([a, b, c]), self.new([c, b, INF]), self.new([a, c, INF]),
              self.new([b, a, INF])]
        edges = {}
        for t in ts:
            v = self.tris[t]
            for i in range(3):
                edges[(v[(i + 1) % 3], v[(i + 2) % 3])] = (t, i)
        for (e0, e1), (t, i) in edges.items():
            self.nbr[t][i] = edges[(e1, e0)][0]
        return ts[0]

    def locate(self, p: int, t: int) -> int:
        """Visibility walk to a triangle in conflict with ``p``."""
        for _ in range(4 * len(self.tris) + 100):
            v = self.tris[t]
            if INF in v:
                if self.hull_side(v, p):
                    return t
                t = self.nbr[t][v.index(INF)]
                continue
            # rotating the first edge tested avoids cycling on degenerate walks
            self.step += 1
            r = self.step % 3
            for j in range(3):
                i = (r + j) % 3
                if self.orient(v[(i + 1) % 3], v[(i + 2) % 3], p) < 0:
                    t = self.nbr[t][i]
                    break
            else:
                return t
        raise TriangulationError("point location did not terminate")

    def insert(self, p: int, hint: int) -> int:
        t0 = self.locate(p, hint)
        cavity = {t0}
        stack = [t0]
        while stack:
            t = stack.pop()
            for u in self.nbr[t]:
                if u not in cavity and self.conflict(u, p):
                    cavity.add(u)
                    stack.append(u)
        boundary = []
        for t in cavity:
            v = self.tris[t]
            for i, u in enumerate(self.nbr[t]):
                if u not in cavity:
                    boundary.append((v[(i + 1) % 3], v[(i + 2) % 3], u))
        for t in cavity:
            self.alive[t] = False
            self.free.append(t)
        side = {}
        created = []
        for a, b, u in boundary:
            t = self.new([a, b, p])
            self.nbr[t][2] = u
            vu, nu = self.tris[u], self.nbr[u]
            for i in range(3):
                if vu[(i + 1) % 3] == b and vu[(i + 2) % 3] == a:
                    nu[i] = t
            side[(b, p)] = t
            side[(p, a)] = t
            created.append(t)
        for t in created:
            a, b, _ = self.tris[t]
            try:
                self.nbr[t][0] = side[(p, b)]
                self.nbr[t][1] = side[(a, p)]
            except KeyError as exc:
                raise TriangulationError("insertion cavity is not star-shaped") from exc
        return created[0]

    def finite(self) -> np.ndarray:
        out = [v for v, ok in zip(self.tris, self.alive) if ok and INF not in v]
        return np.array(out, dtype=np.int64).reshape(-1, 3)


def _insertion_order(xy: np.ndarray) -> np.ndarray:
    """Serpentine sweep over coarse rows so consecutive insertions are close."""
    n = len(xy)
    rows = max(1, int(np.sqrt(n / 4)))
    lo, hi = xy.min(0), xy.max(0)
    span = max(hi[1] - lo[1], 1e-300)
    r = np.minimum(((xy[:, 1] - lo[1]) / span * rows).astype(np.int64), rows - 1)
    key = np.where(r % 2 == 0, xy[:, 0], -xy[:, 0])
    return np.lexsort((key, r))


def delaunay_triangles(xy: np.ndarray) -> np.ndarray:
    """CCW Delaunay triangles of 2-D points (exact predicates, index tie-breaking)."""
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    n = len(xy)
    if n < 3:
        raise TriangulationError("need at least 3 points")
    if not np.all(np.isfinite(xy)):
        raise TriangulationError("non-finite coordinates")
    if len(np.unique(xy, axis=0)) != n:
        raise TriangulationError("duplicate x-y projections")
    tri = _Triangulation(xy)
    order = [int(k) for k in _insertion_order(xy)]
    a, b = order[0], order[1]
    c = next((k for k in order[2:] if tri.orient(a, b, k) != 0), None)
    if c is None:
        raise TriangulationError("all points are collinear in projection")
    hint = tri.start(a, b, c)
    for k in order[2:]:
        if k != c:
            hint = tri.insert(k, hint)
    return tri.finite()


def delaunay_xy(mesh: TriangleMesh) -> TriangleMesh:
    """Replace the faces with the x-y Delaunay triangulation of all vertices."""
    tris = delaunay_triangles(mesh.vertices[:, :2])
    return TriangleMesh(mesh.vertices, tris, mesh.landmark_indices, mesh.vertex_ids)


def is_delaunay(xy: np.ndarray, tris: np.ndarray) -> bool:
    """Exact empty-circumcircle check of every triangle against every point (O(n m))."""
    xy = np.asarray(xy, float)
    for t in tris:
        a, b, c = xy[t[0]], xy[t[1]], xy[t[2]]
        others = np.setdiff1d(np.arange(len(xy)), t)
        k = len(others)
        s = incircle_many(np.repeat(a[None], k, 0), np.repeat(b[None], k, 0),
                          np.repeat(c[None], k, 0), xy[others])
        if np.any(s > 0):
            return False
    return True
