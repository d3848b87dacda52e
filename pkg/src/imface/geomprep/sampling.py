"""Signed-distance labelling of query points against an open, +z-facing surface."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .align import SPHERE_RADIUS_MM
from .bvh import BVH, closest_points
from .mesh import TriangleMesh

log = logging.getLogger(__name__)

ON_SURFACE_EPS = 1e-9
SIGN_EPS = 1e-12
NEAR_SIGMA_MM = 10.0
N_NEAR = 4000
N_UNIFORM = 4000


@dataclass(frozen=True)
class SampleTriplet:
    point: np.ndarray
    sdf: float
    gradient: np.ndarray


@dataclass
class Triplets:
    """Column storage for many triplets: ``points (n,3)``, ``sdf (n,)``, ``gradients (n,3)``."""

    points: np.ndarray
    sdf: np.ndarray
    gradients: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, np.float64).reshape(-1, 3)
        self.sdf = np.asarray(self.sdf, np.float64).reshape(-1)
        self.gradients = np.asarray(self.gradients, np.float64).reshape(-1, 3)
        if not len(self.points) == len(self.sdf) == len(self.gradients):
            raise ValueError("triplet columns differ in length")

    def __len__(self) -> int:
        return len(self.sdf)

    def __getitem__(self, i) -> SampleTriplet:
        return SampleTriplet(self.points[i].copy(), float(self.sdf[i]), self.gradients[i].copy())

    def packed(self) -> np.ndarray:
        """``(n, 7)`` rows of ``(p, s, n)``."""
        return np.concatenate([self.points, self.sdf[:, None], self.gradients], axis=1)

    @classmethod
    def from_packed(cls, rows: np.ndarray) -> Triplets:
        rows = np.asarray(rows, np.float64).reshape(-1, 7)
        return cls(rows[:, :3], rows[:, 3], rows[:, 4:])

    def subset(self, idx) -> Triplets:
        return Triplets(self.points[idx], self.sdf[idx], self.gradients[idx])


def _barycentric(q, a, b, c):
    v0, v1, v2 = b - a, c - a, q - a
    d00, d01, d11 = (v0 * v0).sum(-1), (v0 * v1).sum(-1), (v1 * v1).sum(-1)
    d20, d21 = (v2 * v0).sum(-1), (v2 * v1).sum(-1)
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.stack([1 - v - w, v, w], axis=-1)


def signed_distance_samples(points, mesh: TriangleMesh, bvh: BVH | None = None,
                            vertex_normals: np.ndarray | None = None) -> Triplets:
    """Label query points with signed distance and unit field gradient.

    A query is behind the surface (negative) when the direction toward its
    closest surface point has a positive z component. Exact ties resolve to
    the front side.
    """
    p = np.asarray(points, np.float64).reshape(-1, 3)
    bvh = BVH.build(mesh) if bvh is None else bvh
    q, dist, face = closest_points(p, mesh, bvh)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (q - p) / dist[:, None]
    on = dist < ON_SURFACE_EPS
    uz = np.where(on, 0.0, u[:, 2])
    tie = ~on & (np.abs(uz) <= SIGN_EPS)
    if tie.any():
        log.info("resolved %d ambiguous sdf signs to the front side", int(tie.sum()))
    sign = np.where(uz > SIGN_EPS, -1.0, 1.0)
    grad = np.where(on[:, None], 0.0, -sign[:, None] * u)
    if on.any():
        vn = mesh.vertex_normals() if vertex_normals is None else vertex_normals
        f = mesh.faces[face[on]]
        tri = mesh.vertices[f]
        bc = _barycentric(q[on], tri[:, 0], tri[:, 1], tri[:, 2])
        n = np.einsum("nk,nkd->nd", bc, vn[f])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        n *= np.where(n[:, 2] < 0, -1.0, 1.0)[:, None]
        grad[on] = n
    sdf = np.where(on, 0.0, sign * dist)
    return Triplets(p, sdf, grad)


def signed_distance_sample(p, mesh: TriangleMesh, bvh: BVH | None = None) -> SampleTriplet:
    return signed_distance_samples(np.asarray(p, float)[None], mesh, bvh)[0]


def _random_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def near_surface_points(mesh, n, sigma, radius, rng):
    """Surface samples displaced along random directions; returns ``(points, displacement)``."""
    out, disp = np.empty((0, 3)), np.empty(0)
    while len(out) < n:
        k = n - len(out)
        base, _ = mesh.sample_surface(k, rng)
        step = rng.normal(0.0, sigma, size=k)
        cand = base + step[:, None] * _random_directions(k, rng)
        ok = np.linalg.norm(cand, axis=1) <= radius
        out, disp = np.concatenate([out, cand[ok]]), np.concatenate([disp, step[ok]])
    return out, disp


def _uniform_ball(n, radius, rng):
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return r[:, None] * _random_directions(n, rng)


def sample_training_points(mesh: TriangleMesh, n_near: int = N_NEAR, n_uniform: int = N_UNIFORM,
                           sigma_near: float = NEAR_SIGMA_MM, rng: np.random.Generator | None = None,
                           radius: float = SPHERE_RADIUS_MM, bvh: BVH | None = None) -> Triplets:
    """Near-surface plus uniform-in-sphere queries, labelled by :func:`signed_distance_samples`.

    Near points are area-weighted surface samples moved along a random unit
    direction by ``N(0, sigma_near)``; draws leaving the sphere are redrawn.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    pts = np.concatenate([near_surface_points(mesh, n_near, sigma_near, radius, rng)[0],
                          _uniform_ball(n_uniform, radius, rng)])
    return signed_distance_samples(pts, mesh, bvh)
