"""Zero-level-set extraction of scalar fields sampled on a regular grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from skimage.measure import marching_cubes as _skimage_marching_cubes

from ..geomprep import SPHERE_RADIUS_MM, TriangleMesh

log = logging.getLogger(__name__)


@dataclass
class VoxelGrid:
    """``resolution`` samples per axis over the cube ``[lo, hi]^3`` (mm)."""

    resolution: int = 64
    lo: float = -SPHERE_RADIUS_MM
    hi: float = SPHERE_RADIUS_MM
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("grid resolution must be at least 8")
        if not self.hi > self.lo:
            raise ValueError("grid bounds must satisfy hi > lo")
        if self.values is not None:
            self.values = np.asarray(self.values, np.float64)
            if self.values.shape != (self.resolution,) * 3:
                raise ValueError("grid values do not match the resolution")
            if not np.isfinite(self.values).all():
                raise ValueError("grid values must be finite")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.resolution - 1)

    @property
    def cell_diagonal(self) -> float:
        return self.spacing * np.sqrt(3.0)

    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.resolution)

    def points(self) -> np.ndarray:
        a = self.axis()
        return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3)


def sample_field(f, grid: VoxelGrid, band: int | None = None) -> VoxelGrid:
    """Evaluate ``f`` on every grid node.

    With ``band`` the field is first sampled every ``band`` nodes; fine nodes
    whose interpolated value is more than 1.5 coarse cell diagonals from zero
    keep the interpolated value, the rest are evaluated exactly. This assumes
    ``f`` is close to a distance function.
    """
    res = grid.resolution
    if band is None or band <= 1:
        vals = np.asarray(f(grid.points()), np.float64).reshape((res,) * 3)
        return VoxelGrid(res, grid.lo, grid.hi, vals)
    idx = np.unique(np.append(np.arange(0, res, band), res - 1))
    a = grid.axis()[idx]
    coarse = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3)
    cv = np.asarray(f(coarse), np.float64).reshape((len(idx),) * 3)
    pts = grid.points()
    vals = RegularGridInterpolator((a, a, a), cv)(pts)
    near = np.abs(vals) < 1.5 * band * grid.cell_diagonal
    if near.any():
        vals[near] = np.asarray(f(pts[near]), np.float64)
    log.debug("narrow band evaluated %d of %d nodes", int(near.sum()), len(pts))
    return VoxelGrid(res, grid.lo, grid.hi, vals.reshape((res,) * 3))


def extract_mesh(grid: VoxelGrid, level: float = 0.0) -> TriangleMesh:
    """Marching cubes on sampled values; faces oriented toward increasing ``f``."""
    if grid.values is None:
        raise ValueError("grid has no samples")
    v = grid.values
    if not v.min() < level < v.max():
        log.warning("no zero crossing in the grid; returning an empty mesh")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    verts, faces, _, _ = _skimage_marching_cubes(v, level=level, spacing=(grid.spacing,) * 3)
    return TriangleMesh(verts.astype(np.float64) + grid.lo, faces.astype(np.int64))


def marching_cubes(f, codes=None, grid: VoxelGrid | None = None, band: int | None = None) -> TriangleMesh:
    """Extract the zero level set of ``f(points)`` or ``f(points, codes)`` (mm in, mm out)."""
    grid = VoxelGrid() if grid is None else grid
    field = f if codes is None else (lambda p: f(p, codes))
    return extract_mesh(sample_field(field, grid, band))
