"""Triangle meshes and their minimal OBJ / landmark-sidecar IO."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    """Vertices in mm, faces as vertex-index triples.

    ``vertex_ids`` optionally carries a stable key per vertex (e.g. the grid
    index of a synthetic scan) that survives cropping and re-triangulation.
    """

    vertices: np.ndarray
    faces: np.ndarray
    landmark_indices: np.ndarray | None = None
    vertex_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise MeshError("face index out of range")
        if self.landmark_indices is not None:
            self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.int64)
            if self.landmark_indices.size and (self.landmark_indices.min() < 0
                                               or self.landmark_indices.max() >= n):
                raise MeshError("landmark index out of range")
        if self.vertex_ids is not None:
            self.vertex_ids = np.asarray(self.vertex_ids, dtype=np.int64)
            if len(self.vertex_ids) != n:
                raise MeshError("vertex_ids length must match vertex count")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """``(m, 3, 3)`` corner coordinates."""
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        t = self.triangles()
        return np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return np.divide(c, n, out=np.zeros_like(c), where=n > 0)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals (unnormalised cross products summed)."""
        c = self.face_cross()
        out = np.zeros_like(self.vertices)
        for j in range(3):
            np.add.at(out, self.faces[:, j], c)
        n = np.linalg.norm(out, axis=1, keepdims=True)
        return np.divide(out, n, out=np.zeros_like(out), where=n > 0)

    def copy(self) -> TriangleMesh:
        return TriangleMesh(self.vertices.copy(), self.faces.copy(),
                            None if self.landmark_indices is None else self.landmark_indices.copy(),
                            None if self.vertex_ids is None else self.vertex_ids.copy())

    def with_faces(self, faces: np.ndarray) -> TriangleMesh:
        return TriangleMesh(self.vertices, faces, self.landmark_indices, self.vertex_ids)

    def drop_degenerate(self, tol: float = 0.0) -> TriangleMesh:
        return self.with_faces(self.faces[self.face_areas() > tol])

    def compact(self) -> tuple[TriangleMesh, np.ndarray]:
        """Remove unreferenced vertices; landmarks are always kept.

        Returns the new mesh and ``old_index`` for each kept vertex.
        """
        used = np.zeros(self.n_vertices, bool)
        used[self.faces.ravel()] = True
        if self.landmark_indices is not None:
            used[self.landmark_indices] = True
        old = np.flatnonzero(used)
        remap = np.full(self.n_vertices, -1, np.int64)
        remap[old] = np.arange(len(old))
        lm = None if self.landmark_indices is None else remap[self.landmark_indices]
        ids = None if self.vertex_ids is None else self.vertex_ids[old]
        return TriangleMesh(self.vertices[old], remap[self.faces], lm, ids), old

    def sample_surface(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-weighted uniform surface samples; returns ``(points, face_index)``."""
        area = self.face_areas()
        if area.sum() <= 0:
            raise MeshError("cannot sample a mesh with zero area")
        fi = rng.choice(self.n_faces, size=n, p=area / area.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
        return np.einsum("nk,nkd->nd", w, self.triangles()[fi]), fi


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated, texture/normal refs ignored."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces += [[idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1)]
        except (ValueError, IndexError) as exc:
            raise MeshError(f"{path}:{lineno}: malformed record") from exc
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_landmarks(path, indices) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def read_landmarks(path) -> np.ndarray:
    return np.array([int(s) for s in Path(path).read_text().split()], dtype=np.int64)


def load_mesh(obj_path, landmark_path=None) -> TriangleMesh:
    mesh = read_obj(obj_path)
    if landmark_path is not None:
        mesh.landmark_indices = read_landmarks(landmark_path)
        mesh.__post_init__()
    return mesh
