"""Parametric face-like heightfields with exact ground-truth correspondences.

Every scan is a displaced copy of one fixed (u, v) grid over a disk, so the
grid index of a vertex is its true correspondent in every other scan. Identity
is a sum of broad Gaussian bumps, expression a landmark-anchored smooth
displacement with tangential sliding, and detail a set of windowed sinusoidal
wrinkles along the surface normal.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geomprep import (ScanRecord, TriangleMesh, delaunay_xy, normalize_and_crop,
                       read_scan_record, remove_hidden_surfaces, sample_training_points,
                       write_landmarks, write_obj, write_scan_record)

log = logging.getLogger(__name__)

HALF_EXTENT_MM = 90.0
DISK_RADIUS_MM = 85.0
NOSE_TIP_MM = 40.0
LANDMARK_SITES = np.array([[-45.0, 35.0], [45.0, 35.0], [0.0, 0.0], [-25.0, -35.0], [25.0, -35.0]])
WRINKLE_SITES = np.array([[0.0, 62.0], [-50.0, -5.0], [50.0, -5.0], [-20.0, -20.0], [20.0, -20.0]])
MIN_JACOBIAN = 0.2
# shared expressions must leave margin for every identity they are applied to
EXPRESSION_MIN_JACOBIAN = 0.4
MAX_ATTEMPTS = 50


class SynthError(ValueError):
    """Parameters produce a fold (the surface would stop being a heightfield)."""


def _rng(seed, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


@dataclass
class IdentityParams:
    centers: np.ndarray
    widths: np.ndarray
    amplitudes: np.ndarray
    seed: int = 0

    @classmethod
    def sample(cls, seed: int, n_bumps: int = 5) -> IdentityParams:
        r = _rng(seed, 1)
        rad = 60.0 * np.sqrt(r.random(n_bumps))
        ang = r.uniform(0, 2 * np.pi, n_bumps)
        return cls(np.c_[rad * np.cos(ang), rad * np.sin(ang)], r.uniform(15.0, 40.0, n_bumps),
                   r.uniform(-15.0, 15.0, n_bumps), seed)

    def height(self, u, v):
        z = np.zeros_like(u)
        for (cx, cy), w, a in zip(self.centers, self.widths, self.amplitudes):
            z += a * np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * w * w))
        return z


@dataclass
class ExpressionParams:
    widths: np.ndarray
    tangential: np.ndarray
    normal: np.ndarray
    magnitude: float = 1.0
    seed: int = 0

    @classmethod
    def neutral(cls) -> ExpressionParams:
        k = len(LANDMARK_SITES)
        return cls(np.full(k, 15.0), np.zeros((k, 2)), np.zeros(k), 0.0, -1)

    @classmethod
    def sample(cls, seed: int, magnitude: float = 1.0) -> ExpressionParams:
        r = _rng(seed, 2)
        k = len(LANDMARK_SITES)
        ang = r.uniform(0, 2 * np.pi, k)
        t = r.uniform(0.0, 10.0, k)[:, None] * np.c_[np.cos(ang), np.sin(ang)]
        return cls(r.uniform(10.0, 25.0, k), t, r.uniform(-10.0, 10.0, k), magnitude, seed)

    @property
    def is_neutral(self) -> bool:
        return self.magnitude == 0

    def weights(self, u, v):
        """``(n, k)`` Gaussian windows around the landmark sites."""
        d2 = (u[:, None] - LANDMARK_SITES[:, 0]) ** 2 + (v[:, None] - LANDMARK_SITES[:, 1]) ** 2
        return np.exp(-d2 / (2 * self.widths ** 2))


@dataclass
class DetailParams:
    wavelengths: np.ndarray
    directions: np.ndarray
    phases: np.ndarray
    amplitudes: np.ndarray
    window_mm: float = 14.0
    seed: int = 0

    @classmethod
    def zero(cls) -> DetailParams:
        k = len(WRINKLE_SITES)
        return cls(np.full(k, 6.0), np.zeros(k), np.zeros(k), np.zeros(k), 14.0, -1)

    @classmethod
    def sample(cls, seed: int, max_amplitude: float = 1.5) -> DetailParams:
        r = _rng(seed, 3)
        k = len(WRINKLE_SITES)
        return cls(r.uniform(5.0, 8.0, k), r.uniform(0, np.pi, k), r.uniform(0, 2 * np.pi, k),
                   r.uniform(0.5 * max_amplitude, max_amplitude, k), 14.0, seed)

    def height(self, u, v):
        h = np.zeros_like(u)
        for (cx, cy), lam, th, ph, a in zip(WRINKLE_SITES, self.wavelengths, self.directions,
                                            self.phases, self.amplitudes):
            s = (u - cx) * np.cos(th) + (v - cy) * np.sin(th)
            win = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * self.window_mm ** 2))
            h += a * win * np.sin(2 * np.pi * s / lam + ph)
        return h


@dataclass(frozen=True)
class Grid:
    """Square lattice clipped to a disk; ``ids`` are row-major lattice indices."""

    res: int = 128
    half_extent: float = HALF_EXTENT_MM
    radius: float = DISK_RADIUS_MM

    def __post_init__(self):
        if self.res < 32:
            raise ValueError("grid_res must be at least 32")

    @property
    def spacing(self) -> float:
        return 2 * self.half_extent / (self.res - 1)

    def lattice(self):
        g = np.linspace(-self.half_extent, self.half_extent, self.res)
        return np.meshgrid(g, g)

    @property
    def mask(self) -> np.ndarray:
        u, v = self.lattice()
        return (np.hypot(u, v) <= self.radius).ravel()

    @property
    def ids(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def site_ids(self, sites: np.ndarray) -> np.ndarray:
        """Lattice ids nearest to the given (u, v) sites."""
        u, v = self.lattice()
        d = (u.ravel()[None] - sites[:, :1]) ** 2 + (v.ravel()[None] - sites[:, 1:2]) ** 2
        return np.argmin(d, axis=1)

    def landmark_ids(self) -> np.ndarray:
        return self.site_ids(LANDMARK_SITES)

    def dense_ids(self, stride_mm: float = 12.0, radius: float = 70.0, offset_mm: float = 0.0) -> np.ndarray:
        """Sparse lattice subset; the default is the one used for consistency supervision."""
        g = np.arange(-radius, radius + 1e-9, stride_mm) + offset_mm
        su, sv = np.meshgrid(g, g)
        sites = np.c_[su.ravel(), sv.ravel()]
        sites = sites[np.hypot(*sites.T) <= radius]
        return np.unique(self.site_ids(sites))

    def eval_ids(self) -> np.ndarray:
        """Evaluation vertices on a 6 mm lattice offset from the supervised ones."""
        return np.setdiff1d(self.dense_ids(6.0, 70.0, 3.0), self.dense_ids())

    def faces(self) -> np.ndarray:
        """Lattice quads split into CCW triangles, kept when all corners are in the disk."""
        n = self.res
        i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
        a = (i * n + j).ravel()
        b, c, d = a + 1, a + n, a + n + 1
        f = np.r_[np.c_[a, b, d], np.c_[a, d, c]]
        return f[self.mask[f].all(axis=1)]


def base_height(u, v):
    """Shared face-like dome: broad forehead/cheek dome, nose, eye sockets, mouth ridge."""
    z = 22.0 * np.exp(-(u ** 2 / (2 * 50.0 ** 2) + v ** 2 / (2 * 60.0 ** 2)))
    z += 18.0 * np.exp(-(u ** 2 / (2 * 7.0 ** 2) + v ** 2 / (2 * 14.0 ** 2)))
    for sx in (-1, 1):
        z -= 8.0 * np.exp(-((u - sx * 45.0) ** 2 + (v - 35.0) ** 2) / (2 * 12.0 ** 2))
    z += 4.0 * np.exp(-(u ** 2 / (2 * 20.0 ** 2) + (v + 35.0) ** 2 / (2 * 8.0 ** 2)))
    return z


def _grid_normals(P: np.ndarray) -> np.ndarray:
    """Unit normals of an (n, n, 3) lattice surface from central differences, oriented +z."""
    pu = np.gradient(P, axis=1)
    pv = np.gradient(P, axis=0)
    n = np.cross(pu, pv)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return n * np.where(n[..., 2:] < 0, -1.0, 1.0)


def _min_jacobian(P: np.ndarray, mask: np.ndarray, spacing: float) -> float:
    xu, xv = np.gradient(P[..., 0], spacing, axis=1), np.gradient(P[..., 0], spacing, axis=0)
    yu, yv = np.gradient(P[..., 1], spacing, axis=1), np.gradient(P[..., 1], spacing, axis=0)
    return float((xu * yv - xv * yu).ravel()[mask].min())


def identity_offset(ident: IdentityParams) -> float:
    """z shift placing the neutral nose tip at ``NOSE_TIP_MM``."""
    return NOSE_TIP_MM - float(base_height(np.zeros(1), np.zeros(1))[0] + ident.height(np.zeros(1), np.zeros(1))[0])


def synth_positions(ident: IdentityParams, expr: ExpressionParams, det: DetailParams,
                    grid: Grid = Grid(), min_jacobian: float = MIN_JACOBIAN) -> np.ndarray:
    """Displaced lattice positions ``(res*res, 3)``; entries outside the disk are meaningless."""
    u, v = grid.lattice()
    z = base_height(u, v) + ident.height(u, v) + identity_offset(ident)
    P = np.stack([u, v, z], -1)
    if not expr.is_neutral:
        n0 = _grid_normals(P)
        w = expr.weights(u.ravel(), v.ravel())
        tang = w @ expr.tangential
        nrm = (w @ expr.normal)[:, None] * n0.reshape(-1, 3)
        disp = expr.magnitude * (np.c_[tang, np.zeros(len(tang))] + nrm)
        P = P + disp.reshape(P.shape)
    if np.any(det.amplitudes):
        h = det.height(u, v)
        P = P + h[..., None] * _grid_normals(P)
    jac = _min_jacobian(P, grid.mask, grid.spacing)
    if jac < min_jacobian:
        raise SynthError(f"surface folds over (min x-y Jacobian {jac:.3f})")
    return P.reshape(-1, 3)


@dataclass
class SynthScan:
    mesh: TriangleMesh
    identity: str
    expression: str
    is_neutral: bool
    positions: np.ndarray = field(repr=False)
    """Ground-truth lattice positions, indexed by lattice id."""

    def landmarks(self) -> np.ndarray:
        return self.mesh.vertices[self.mesh.landmark_indices]


def synth_mesh(ident: IdentityParams, expr: ExpressionParams, det: DetailParams,
               grid_res: int = 128, identity: str = "id", expression: str = "exp") -> SynthScan:
    """Build one scan and run it through the surface preprocessing pipeline."""
    grid = Grid(grid_res)
    P = synth_positions(ident, expr, det, grid)
    ids = grid.ids
    remap = np.full(len(P), -1, np.int64)
    remap[ids] = np.arange(len(ids))
    raw = TriangleMesh(P[ids], remap[grid.faces()], remap[grid.landmark_ids()], ids)
    # the lattice is already in the canonical frame, so only the crop applies
    mesh = normalize_and_crop(raw, align="none")
    mesh = delaunay_xy(remove_hidden_surfaces(mesh)).drop_degenerate()
    return SynthScan(mesh, identity, expression, expr.is_neutral, P)


@dataclass
class SynthDataset:
    records: list
    scans: list
    grid: Grid
    dense_ids: np.ndarray
    config: dict

    def neutral_scan(self, identity: str) -> SynthScan:
        for s in self.scans:
            if s.identity == identity and s.is_neutral:
                return s
        raise KeyError(identity)

    def neutral_dense(self, identity: str) -> np.ndarray:
        return self.neutral_scan(identity).positions[self.dense_ids]

    def template_positions(self) -> np.ndarray:
        """Ground-truth template: mean neutral position of every lattice vertex."""
        return np.mean([s.positions for s in self.scans if s.is_neutral], axis=0)

    def correspondence_truth(self, i: int, template: np.ndarray | None = None, ids=None):
        """``(points, neutral_gt, template_gt)`` for scan ``i`` at lattice ``ids``.

        ``template`` defaults to this dataset's own; pass the training set's
        template when evaluating held-out scans.
        """
        ids = self.grid.eval_ids() if ids is None else ids
        template = self.template_positions() if template is None else template
        sc = self.scans[i]
        return sc.positions[ids], self.neutral_scan(sc.identity).positions[ids], template[ids]


def _seed(*key) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def draw_expression(seed: int, e: int, magnitude: float = 1.0, grid: Grid = Grid()) -> ExpressionParams:
    """First fold-free draw for expression ``e``, checked on the identity-free base face."""
    flat = IdentityParams(np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    for attempt in range(MAX_ATTEMPTS):
        ex = ExpressionParams.sample(_seed(seed, 20, e, attempt), magnitude)
        try:
            synth_positions(flat, ex, DetailParams.zero(), grid, EXPRESSION_MIN_JACOBIAN)
            return ex
        except SynthError as exc:
            log.info("expression %d attempt %d rejected: %s", e, attempt, exc)
    raise SynthError(f"expression {e}: no fold-free parameters after {MAX_ATTEMPTS} draws")


def generate_dataset(n_identities: int = 20, n_expressions: int = 4, seed: int = 0,
                     grid_res: int = 128, n_near: int = 4000, n_uniform: int = 4000,
                     detail: bool = True, first_identity: int = 0,
                     expression_magnitude: float = 1.0) -> SynthDataset:
    """Identities x expressions scans; expression 0 of each identity is neutral.

    Expressions are shared across identities (same displacement parameters),
    identity ``first_identity + i`` always gets the same parameters, so extra
    held-out identities can be generated with a larger ``first_identity``.
    """
    grid = Grid(grid_res)
    dense_ids = grid.dense_ids()
    exprs = [ExpressionParams.neutral()]
    for e in range(1, n_expressions):
        exprs.append(draw_expression(seed, e, expression_magnitude, grid))
    records, scans = [], []
    for i in range(first_identity, first_identity + n_identities):
        scan_row = None
        for attempt in range(MAX_ATTEMPTS):
            s_id = _seed(seed, 10, i, attempt)
            ident = IdentityParams.sample(s_id)
            dp = DetailParams.sample(s_id) if detail else DetailParams.zero()
            try:
                scan_row = [synth_mesh(ident, ex, dp, grid_res, f"id{i:03d}", f"exp{e}")
                            for e, ex in enumerate(exprs)]
                break
            except SynthError as exc:
                log.info("identity %d attempt %d rejected: %s", i, attempt, exc)
        if scan_row is None:
            raise SynthError(f"identity {i}: no fold-free parameters after {MAX_ATTEMPTS} draws")
        for e, sc in enumerate(scan_row):
            rng = _rng(seed, 30, i, e)
            trip = sample_training_points(sc.mesh, n_near, n_uniform, rng=rng)
            records.append(ScanRecord(sc.identity, sc.expression, sc.is_neutral, sc.landmarks(), trip,
                                      sc.positions[dense_ids], dense_ids))
            scans.append(sc)
    cfg = dict(n_identities=n_identities, n_expressions=n_expressions, seed=seed, grid_res=grid_res,
               n_near=n_near, n_uniform=n_uniform, detail=detail, first_identity=first_identity,
               expression_magnitude=expression_magnitude)
    return SynthDataset(records, scans, grid, dense_ids, cfg)


def scan_name(rec) -> str:
    return f"{rec.identity}_{rec.expression}"


def write_dataset(ds: SynthDataset, out_dir) -> list[Path]:
    """Top level: one OBJ and one ScanRecord per scan; sidecars and GT tables under ``meta/``."""
    out = Path(out_dir)
    meta = out / "meta"
    meta.mkdir(parents=True, exist_ok=True)
    written = []
    for rec, sc in zip(ds.records, ds.scans):
        name = scan_name(rec)
        write_obj(out / f"{name}.obj", sc.mesh)
        write_scan_record(out / f"{name}.imfscan", rec)
        write_landmarks(meta / f"{name}.lmk.txt", sc.mesh.landmark_indices)
        np.save(meta / f"{name}.vid.npy", sc.mesh.vertex_ids)
        # GT correspondence table: lattice id -> position, for every disk vertex
        np.save(meta / f"{name}.gt.npy", np.c_[ds.grid.ids, sc.positions[ds.grid.ids]])
        written += [out / f"{name}.obj", out / f"{name}.imfscan"]
    (meta / "dataset.json").write_text(json.dumps(
        dict(config=ds.config, grid=asdict(ds.grid), dense_ids=ds.dense_ids.tolist(),
             scans=[scan_name(r) for r in ds.records]), indent=2))
    return written


def load_dataset(out_dir) -> tuple[list[ScanRecord], dict]:
    """Read back the ScanRecords (in generation order) and the dataset metadata."""
    out = Path(out_dir)
    meta = json.loads((out / "meta" / "dataset.json").read_text())
    recs = [read_scan_record(out / f"{name}.imfscan") for name in meta["scans"]]
    return recs, meta


def load_gt_table(out_dir, name: str) -> tuple[np.ndarray, np.ndarray]:
    t = np.load(Path(out_dir) / "meta" / f"{name}.gt.npy")
    return t[:, 0].astype(np.int64), t[:, 1:]
