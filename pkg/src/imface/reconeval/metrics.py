"""Surface reconstruction metrics in millimetres."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..geomprep import BVH, TriangleMesh, closest_points

log = logging.getLogger(__name__)

N_EVAL_SAMPLES = 50_000


class MetricError(ValueError):
    pass


def _points(a, name) -> np.ndarray:
    a = np.asarray(a, np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise MetricError(f"{name} point set is empty")
    return a


def nearest_distances(src, dst) -> np.ndarray:
    """For each point of ``src`` the distance to its nearest neighbour in ``dst`` (KD-tree)."""
    return cKDTree(dst).query(src, k=1)[0]


def brute_force_distances(src, dst, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(src))
    for i in range(0, len(src), chunk):
        d = src[i:i + chunk, None, :] - dst[None]
        out[i:i + chunk] = np.sqrt((d * d).sum(-1)).min(1)
    return out


def chamfer(a, b, brute_force: bool = False) -> float:
    """Symmetric Chamfer distance: half the sum of both mean nearest-neighbour distances."""
    a, b = _points(a, "first"), _points(b, "second")
    nn = brute_force_distances if brute_force else nearest_distances
    return 0.5 * (float(nn(a, b).mean()) + float(nn(b, a).mean()))


def fscore(pred, gt, tau_mm: float = 1.0) -> float:
    """F-score in percent; a point counts when its nearest neighbour is closer than ``tau_mm``."""
    pred, gt = _points(pred, "predicted"), _points(gt, "ground-truth")
    precision = float((nearest_distances(pred, gt) < tau_mm).mean())
    recall = float((nearest_distances(gt, pred) < tau_mm).mean())
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def surface_points(mesh: TriangleMesh, n: int = N_EVAL_SAMPLES, seed: int = 0):
    """Area-weighted surface samples ``(points, face_index)`` from a fixed seed."""
    if mesh.n_faces == 0:
        raise MetricError("mesh has no faces")
    return mesh.sample_surface(n, np.random.default_rng(seed))


def _directed_nc(src: TriangleMesh, dst: TriangleMesh, n: int, seed: int, absolute: bool):
    pts, fi = surface_points(src, n, seed)
    n_src = src.face_normals()[fi]
    _, _, fd = closest_points(pts, dst, BVH.build(dst))
    n_dst = dst.face_normals()[fd]
    ok = (np.linalg.norm(n_src, axis=1) > 0) & (np.linalg.norm(n_dst, axis=1) > 0)
    dots = (n_src[ok] * n_dst[ok]).sum(1)
    if absolute:
        dots = np.abs(dots)
    return dots, int((~ok).sum())


def normal_consistency(pred: TriangleMesh, gt: TriangleMesh, n: int = N_EVAL_SAMPLES, seed: int = 0,
                       absolute: bool = False) -> float:
    """Mean dot product of unit normals at nearest surface points, averaged over both directions.

    Samples whose own or matched face is degenerate are skipped and logged.
    """
    d1, s1 = _directed_nc(pred, gt, n, seed, absolute)
    d2, s2 = _directed_nc(gt, pred, n, seed + 1, absolute)
    if s1 + s2:
        log.warning("skipped %d samples with degenerate normals", s1 + s2)
    if len(d1) == 0 or len(d2) == 0:
        raise MetricError("no valid normals to compare")
    return float(np.clip(0.5 * (d1.mean() + d2.mean()), -1.0, 1.0))


@dataclass
class MetricReport:
    chamfer_mm: float
    fscore_pct: float
    tau_mm: float
    normal_consistency: float
    ede_mm: float | None = None
    tde_mm: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.fscore_pct <= 100.0:
            raise MetricError("fscore must lie in [0, 100]")
        if not -1.0 <= self.normal_consistency <= 1.0:
            raise MetricError("normal consistency must lie in [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def table(self) -> str:
        rows = [("Chamfer (mm)", self.chamfer_mm), (f"F-score@{self.tau_mm:g}mm (%)", self.fscore_pct),
                ("Normal consistency", self.normal_consistency)]
        if self.ede_mm is not None:
            rows.append(("EDE (mm)", self.ede_mm))
        if self.tde_mm is not None:
            rows.append(("TDE (mm)", self.tde_mm))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{w}}  {value:.4f}" for name, value in rows)


def evaluate_meshes(pred: TriangleMesh, gt: TriangleMesh, tau_mm: float = 1.0, n: int = N_EVAL_SAMPLES,
                    seed: int = 0, absolute_normals: bool = False) -> MetricReport:
    pp, _ = surface_points(pred, n, seed)
    pg, _ = surface_points(gt, n, seed + 1)
    return MetricReport(chamfer(pp, pg), fscore(pp, pg, tau_mm), tau_mm,
                        normal_consistency(pred, gt, n, seed + 2, absolute_normals))


def crop_to_footprint(pred: TriangleMesh, gt: TriangleMesh) -> TriangleMesh:
    """Keep predicted faces whose centroid projects (along z) onto the ground-truth surface.

    Implicit reconstructions of an open face continue past the scanned
    region; ground truth is a height field over xy after preprocessing, so
    its xy projection delimits the region that is compared.
    """
    if pred.n_faces == 0:
        return pred
    flat = TriangleMesh(gt.vertices * np.array([1.0, 1.0, 0.0]), gt.faces)
    c = pred.triangles().mean(1) * np.array([1.0, 1.0, 0.0])
    _, d, _ = closest_points(c, flat, BVH.build(flat))
    return pred.with_faces(pred.faces[d < 1e-9]).compact()[0]
