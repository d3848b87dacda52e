"""Dense correspondence through the shared template space, and deformation errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..geomprep import TriangleMesh
from ..model import ImFaceModel, LatentCodes


@dataclass(frozen=True)
class CorrespondencePair:
    source: np.ndarray
    target: np.ndarray
    anchor: np.ndarray  # template-space position of the source point
    distance: float  # template-space match distance


@dataclass
class Correspondences:
    """Columnar storage of many :class:`CorrespondencePair` rows."""

    source: np.ndarray
    target: np.ndarray
    anchor: np.ndarray
    distance: np.ndarray
    target_index: np.ndarray

    def __len__(self) -> int:
        return len(self.distance)

    def __getitem__(self, i) -> CorrespondencePair:
        return CorrespondencePair(self.source[i], self.target[i], self.anchor[i], float(self.distance[i]))

    def to_dict(self) -> dict:
        return {"source": self.source.tolist(), "target": self.target.tolist(),
                "anchor": self.anchor.tolist(), "distance": self.distance.tolist()}


def correspondence_map(points_a, target_b, codes_a: LatentCodes, codes_b: LatentCodes,
                       model: ImFaceModel, n_samples: int = 20_000, seed: int = 0) -> Correspondences:
    """Match points of scan A to surface points of scan B by nearest template-space anchors.

    ``target_b`` is either B's mesh (sampled with ``n_samples`` points) or an
    explicit ``(m, 3)`` array of B's surface points.
    """
    pa = np.asarray(points_a, np.float64).reshape(-1, 3)
    if isinstance(target_b, TriangleMesh):
        pb, _ = target_b.sample_surface(n_samples, np.random.default_rng(seed))
    else:
        pb = np.asarray(target_b, np.float64).reshape(-1, 3)
    anchors_a = model.template_correspondence(pa, codes_a)
    anchors_b = model.template_correspondence(pb, codes_b)
    dist, j = cKDTree(anchors_b).query(anchors_a, k=1)
    return Correspondences(pa, pb[j], anchors_a, dist, j)


def deformation_errors(points, neutral_gt, template_gt, model: ImFaceModel,
                       codes: LatentCodes) -> tuple[np.ndarray, np.ndarray]:
    """Per-point expression (to neutral) and total (to template) deformation errors in mm."""
    p = np.asarray(points, np.float64).reshape(-1, 3)
    if neutral_gt is None or template_gt is None:
        raise ValueError("ground-truth correspondences are required")
    neutral_gt = np.asarray(neutral_gt, np.float64).reshape(-1, 3)
    template_gt = np.asarray(template_gt, np.float64).reshape(-1, 3)
    if not len(p) == len(neutral_gt) == len(template_gt):
        raise ValueError("points and ground-truth correspondences differ in length")
    if not (np.isfinite(neutral_gt).all() and np.isfinite(template_gt).all()):
        raise ValueError("ground-truth correspondences contain missing values")
    x_id = model.exp_deform(p, codes)
    x_tmp, _ = model.id_deform(x_id, codes)
    return np.linalg.norm(x_id - neutral_gt, axis=1), np.linalg.norm(x_tmp - template_gt, axis=1)


def ede_tde(points, neutral_gt, template_gt, model: ImFaceModel, codes: LatentCodes) -> tuple[float, float]:
    """Mean expression deformation error and mean total deformation error (mm)."""
    e, t = deformation_errors(points, neutral_gt, template_gt, model, codes)
    return float(e.mean()), float(t.mean())
