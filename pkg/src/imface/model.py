"""The composed implicit face model.

Query points travel expression space -> identity space (ExpNet) -> template
space (IDNet), where TempNet evaluates a shared signed distance field and
IDNet adds a scalar residual. DetailNet adds a template-space displacement
that shifts the query along the base-field normal, attenuated away from the
base surface.

Public methods take and return millimetres. Networks run in normalised
coordinates where the sampling sphere has radius 1 (``scale_mm``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .diffcore import Tensor, grad, no_grad
from .diffcore import ops as T
from .fields import BlockConfig, HyperBlock, LandmarkNet, StaticBlock, apply_deformation

log = logging.getLogger(__name__)

GRAD_EPS = 1e-8


@dataclass
class ModelConfig:
    k: int = 5
    exp_dim: int = 32
    id_dim: int = 32
    detail_dim: int = 32
    hidden: int = 128
    detail_hidden: int = 256
    depth: int = 3
    w0: float = 30.0
    detail_w0: float = 60.0
    n_freq: int = 4
    fusion_hidden: int = 128
    hyper_hidden: int = 32
    landmark_hidden: int = 256
    sigma_att_mm: float = 5.0
    scale_mm: float = 100.0
    deform_init_scale: float = 0.01
    seed: int = 0

    @classmethod
    def paper(cls, **kw) -> ModelConfig:
        base = dict(exp_dim=160, id_dim=160, detail_dim=160)
        base.update(kw)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def block(self, kind: str, detail: bool = False) -> BlockConfig:
        return BlockConfig(
            kind=kind, k=self.k, hidden=self.detail_hidden if detail else self.hidden,
            depth=self.depth, w0=self.detail_w0 if detail else self.w0, n_freq=self.n_freq,
            fusion_hidden=self.fusion_hidden,
            last_scale=self.deform_init_scale if kind.startswith("se3") else 1.0)


@dataclass
class LatentCodes:
    z_exp: np.ndarray
    z_id: np.ndarray
    z_detail: np.ndarray

    def __post_init__(self):
        for f in ("z_exp", "z_id", "z_detail"):
            v = np.asarray(getattr(self, f), dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{f} is not finite")
            setattr(self, f, v)

    def copy(self) -> LatentCodes:
        return LatentCodes(self.z_exp.copy(), self.z_id.copy(), self.z_detail.copy())

    def to_dict(self) -> dict:
        return {"z_exp": self.z_exp.tolist(), "z_id": self.z_id.tolist(),
                "z_detail": self.z_detail.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> LatentCodes:
        return cls(np.array(d["z_exp"]), np.array(d["z_id"]), np.array(d["z_detail"]))

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> LatentCodes:
        return cls(np.zeros(cfg.exp_dim), np.zeros(cfg.id_dim), np.zeros(cfg.detail_dim))


@dataclass
class Conditioning:
    """Per-scan quantities derived from latent codes, shared by all queries of a batch."""

    z_exp: Tensor
    z_id: Tensor
    z_detail: Tensor
    landmarks: Tensor  # l, expression space (B, k, 3) normalised
    landmarks_neutral: Tensor  # l', identity space
    exp_params: list
    id_params: list
    detail_params: list | None


@dataclass
class BaseEval:
    x: Tensor  # query (normalised)
    x_id: Tensor  # E(x)
    x_tmp: Tensor  # I(E(x))
    delta: Tensor  # (B, N)
    s0: Tensor  # (B, N)
    sdf: Tensor  # s0 + delta


@dataclass
class ImFaceModel:
    cfg: ModelConfig
    exp_block: HyperBlock
    id_block: HyperBlock
    temp_block: StaticBlock
    detail_block: HyperBlock
    eta: LandmarkNet
    eta_neutral: LandmarkNet
    template_landmarks: np.ndarray  # (k, 3) mm
    template_dense: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # (M, 3) mm

    # -- construction ------------------------------------------------------
    @classmethod
    def create(cls, cfg: ModelConfig, template_landmarks: np.ndarray | None = None,
               template_dense: np.ndarray | None = None) -> ImFaceModel:
        rng = np.random.default_rng(cfg.seed)
        if template_landmarks is None:
            template_landmarks = default_landmarks(cfg.k)
        tl = np.asarray(template_landmarks, dtype=np.float64)
        if tl.shape != (cfg.k, 3):
            raise ValueError(f"template landmarks must be ({cfg.k}, 3)")
        tl_n = tl / cfg.scale_mm
        exp_block = HyperBlock.create(cfg.block("se3"), cfg.exp_dim, rng, "exp", cfg.hyper_hidden)
        id_block = HyperBlock.create(cfg.block("se3_residual"), cfg.id_dim, rng, "id",
                                     cfg.hyper_hidden, zero_rows=(6,))
        temp_block = StaticBlock.create(cfg.block("scalar"), rng, "temp")
        detail_block = HyperBlock.create(cfg.block("scalar", detail=True), cfg.detail_dim, rng,
                                         "detail", cfg.hyper_hidden, zero_last=True)
        eta = LandmarkNet.create(cfg.exp_dim + cfg.id_dim, cfg.k, rng, "eta",
                                 cfg.landmark_hidden, tl_n)
        eta_n = LandmarkNet.create(cfg.id_dim, cfg.k, rng, "eta_neutral", cfg.landmark_hidden, tl_n)
        dense = np.zeros((0, 3)) if template_dense is None else np.asarray(template_dense, float)
        return cls(cfg, exp_block, id_block, temp_block, detail_block, eta, eta_n, tl, dense)

    # -- parameters ----------------------------------------------------------
    def parameter_groups(self) -> dict[str, list[Tensor]]:
        return {
            "exp": self.exp_block.parameters(),
            "id": self.id_block.parameters(),
            "temp": self.temp_block.parameters(),
            "landmark": self.eta.parameters() + self.eta_neutral.parameters(),
            "detail": self.detail_block.parameters(),
        }

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for group, ps in self.parameter_groups().items():
            for i, p in enumerate(ps):
                out[f"{group}.{i:03d}.{p.name or 'p'}"] = p
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        sd = {name: p.value.copy() for name, p in self.named_parameters().items()}
        sd["buffer.template_landmarks"] = self.template_landmarks.copy()
        sd["buffer.template_dense"] = self.template_dense.copy()
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = [n for n in params if n not in sd]
        if missing:
            raise ValueError(f"state dict missing {missing[:3]}...")
        for name, p in params.items():
            if sd[name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}: {sd[name].shape} vs {p.value.shape}")
            p.value[...] = sd[name]
        self.template_landmarks = np.array(sd["buffer.template_landmarks"])
        self.template_dense = np.array(sd["buffer.template_dense"]).reshape(-1, 3)

    def parameter_hash(self, groups=("exp", "id", "temp", "landmark")) -> str:
        import hashlib
        h = hashlib.sha256()
        pg = self.parameter_groups()
        for g in groups:
            for p in pg[g]:
                h.update(p.value.tobytes())
        return h.hexdigest()

    # -- conditioning --------------------------------------------------------
    def condition(self, z_exp, z_id, z_detail=None, with_detail: bool = True) -> Conditioning:
        """Run landmark nets and hypernets for a batch of codes ``(B, dim)``."""
        z_exp, z_id = _as_batch(z_exp), _as_batch(z_id)
        zd = _as_batch(z_detail) if z_detail is not None else Tensor(
            np.zeros((z_exp.shape[0], self.cfg.detail_dim)))
        l = self.eta(z_exp, z_id)
        ln = self.eta_neutral(z_id)
        exp_params = self.exp_block.hyper.generate(z_exp)
        id_params = self.id_block.hyper.generate(z_id)
        det_params = self.detail_block.hyper.generate(zd) if with_detail else None
        return Conditioning(z_exp, z_id, zd, l, ln, exp_params, id_params, det_params)

    def condition_codes(self, codes, with_detail: bool = True) -> Conditioning:
        if isinstance(codes, LatentCodes):
            codes = [codes]
        return self.condition(np.stack([c.z_exp for c in codes]), np.stack([c.z_id for c in codes]),
                              np.stack([c.z_detail for c in codes]), with_detail)

    # -- normalised-space fields -------------------------------------------
    @property
    def _tl(self) -> np.ndarray:
        return self.template_landmarks / self.cfg.scale_mm

    def exp_field(self, x, cond: Conditioning) -> Tensor:
        out = self.exp_block(x, cond.landmarks, params=cond.exp_params)
        return apply_deformation(x, out[..., 0:3], out[..., 3:6])

    def id_field(self, x_id, cond: Conditioning) -> tuple[Tensor, Tensor]:
        out = self.id_block(x_id, cond.landmarks_neutral, params=cond.id_params)
        return apply_deformation(x_id, out[..., 0:3], out[..., 3:6]), out[..., 6]

    def template_field(self, x_tmp) -> Tensor:
        return self.temp_block(x_tmp, self._tl)[..., 0]

    def detail_field(self, x_tmp, cond: Conditioning) -> Tensor:
        if cond.detail_params is None:
            raise ValueError("conditioning was built without detail parameters")
        return self.detail_block(x_tmp, self._tl, params=cond.detail_params)[..., 0]

    def base_eval(self, x, cond: Conditioning) -> BaseEval:
        x = T.as_tensor(x)
        x_id = self.exp_field(x, cond)
        x_tmp, delta = self.id_field(x_id, cond)
        s0 = self.template_field(x_tmp)
        return BaseEval(x, x_id, x_tmp, delta, s0, T.add(s0, delta))

    def attenuation(self, s_norm) -> Tensor:
        r = T.div(s_norm, self.cfg.sigma_att_mm / self.cfg.scale_mm)
        return T.exp(T.neg(T.mul(r, r)))

    def corrected_point(self, x, cond: Conditioning, base: BaseEval | None = None):
        """``x + chi(f_hat) d(x'') n_hat``; returns ``(x_b, base, d, chi)``.

        ``x`` must require grad (it is the variable the base normal is taken
        against). Points with a vanishing base gradient are left uncorrected.
        """
        if base is None:
            base = self.base_eval(x, cond)
        (g,) = grad(T.tsum(base.sdf), [base.x], create_graph=True)
        gn = T.norm(g, axis=-1, keepdims=True)
        degenerate = gn.value < GRAD_EPS
        if np.any(degenerate):
            log.warning("skipping detail correction at %d points with vanishing base gradient",
                        int(degenerate.sum()))
        safe = T.where(degenerate, 1.0, gn)
        n_hat = T.div(g, safe)
        d = self.detail_field(base.x_tmp, cond)
        chi = self.attenuation(base.sdf)
        amount = T.where(degenerate[..., 0], 0.0, T.mul(chi, d))
        xb = T.add(base.x, T.mul(T.expand_dims(amount, -1), n_hat))
        return xb, base, d, chi

    def full_eval(self, x, cond: Conditioning) -> tuple[BaseEval, BaseEval, Tensor]:
        """Base evaluation at ``x`` and base evaluation at the corrected point."""
        x = _leaf(x)
        xb, base, d, _ = self.corrected_point(x, cond)
        corrected = self.base_eval(xb, cond)
        return base, corrected, d

    # -- millimetre API (numpy in / numpy out) ------------------------------
    def _points(self, p) -> Tensor:
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 2:
            p = p[None]
        return Tensor(p / self.cfg.scale_mm)

    def predict_landmarks(self, codes: LatentCodes) -> np.ndarray:
        with no_grad():
            return self.eta(codes.z_exp[None], codes.z_id[None]).value[0] * self.cfg.scale_mm

    def predict_landmarks_neutral(self, codes: LatentCodes) -> np.ndarray:
        with no_grad():
            return self.eta_neutral(codes.z_id[None]).value[0] * self.cfg.scale_mm

    def exp_deform(self, p, codes: LatentCodes) -> np.ndarray:
        with no_grad():
            cond = self.condition_codes(codes, with_detail=False)
            return self.exp_field(self._points(p), cond).value[0] * self.cfg.scale_mm

    def id_deform(self, p_id, codes: LatentCodes) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            cond = self.condition_codes(codes, with_detail=False)
            x2, delta = self.id_field(self._points(p_id), cond)
            return x2.value[0] * self.cfg.scale_mm, delta.value[0] * self.cfg.scale_mm

    def template_sdf(self, p_tmp) -> np.ndarray:
        with no_grad():
            return self.template_field(self._points(p_tmp)).value[0] * self.cfg.scale_mm

    def detail_displacement(self, p_tmp, codes: LatentCodes) -> np.ndarray:
        with no_grad():
            cond = self.condition_codes(codes)
            return self.detail_field(self._points(p_tmp), cond).value[0] * self.cfg.scale_mm

    def template_correspondence(self, p, codes: LatentCodes, chunk: int = 4096) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        out = np.empty_like(p)
        with no_grad():
            cond = self.condition_codes(codes, with_detail=False)
            for i in range(0, len(p), chunk):
                xe = self.exp_field(self._points(p[i:i + chunk]), cond)
                x2, _ = self.id_field(xe, cond)
                out[i:i + chunk] = x2.value[0] * self.cfg.scale_mm
        return out

    def base_sdf(self, p, codes: LatentCodes, chunk: int = 8192) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        out = np.empty(len(p))
        with no_grad():
            cond = self.condition_codes(codes, with_detail=False)
            for i in range(0, len(p), chunk):
                out[i:i + chunk] = self.base_eval(self._points(p[i:i + chunk]), cond).sdf.value[0]
        return out * self.cfg.scale_mm

    def full_sdf(self, p, codes: LatentCodes, chunk: int = 4096) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        out = np.empty(len(p))
        cond = self.condition_codes(codes)
        _detach_conditioning(cond)
        for i in range(0, len(p), chunk):
            _, corrected, _ = self.full_eval(self._points(p[i:i + chunk]), cond)
            out[i:i + chunk] = corrected.sdf.value[0]
        return out * self.cfg.scale_mm

    def base_sdf_grad(self, p, codes: LatentCodes, chunk: int = 4096):
        """``(sdf, gradient)`` of the base field at ``p`` (mm)."""
        p = np.asarray(p, dtype=np.float64)
        s, g = np.empty(len(p)), np.empty_like(p)
        cond = self.condition_codes(codes, with_detail=False)
        _detach_conditioning(cond)
        for i in range(0, len(p), chunk):
            x = _leaf(self._points(p[i:i + chunk]))
            be = self.base_eval(x, cond)
            (gx,) = grad(T.tsum(be.sdf), [x])
            s[i:i + chunk] = be.sdf.value[0]
            g[i:i + chunk] = gx.value[0]
        return s * self.cfg.scale_mm, g

    def full_sdf_grad(self, p, codes: LatentCodes, chunk: int = 2048):
        p = np.asarray(p, dtype=np.float64)
        s, g = np.empty(len(p)), np.empty_like(p)
        cond = self.condition_codes(codes)
        _detach_conditioning(cond)
        for i in range(0, len(p), chunk):
            x = _leaf(self._points(p[i:i + chunk]))
            _, corrected, _ = self.full_eval(x, cond)
            (gx,) = grad(T.tsum(corrected.sdf), [x])
            s[i:i + chunk] = corrected.sdf.value[0]
            g[i:i + chunk] = gx.value[0]
        return s * self.cfg.scale_mm, g

    def gradient_norms(self, p, codes: LatentCodes, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        """``(|grad_p f_hat|, |grad_p' T(I(p'))|)`` at ``p`` (mm): expression- and identity-space norms."""
        p = np.asarray(p, dtype=np.float64)
        ge, gi = np.empty(len(p)), np.empty(len(p))
        cond = self.condition_codes(codes, with_detail=False)
        _detach_conditioning(cond)
        for i in range(0, len(p), chunk):
            x = _leaf(self._points(p[i:i + chunk]))
            be = self.base_eval(x, cond)
            (g_s0,) = grad(T.tsum(be.s0), [be.x_id])
            (g,) = grad(T.tsum(be.sdf), [x])
            ge[i:i + chunk] = np.linalg.norm(g.value[0], axis=-1)
            gi[i:i + chunk] = np.linalg.norm(g_s0.value[0], axis=-1)
        return ge, gi

    def zero_detail_head(self) -> None:
        """Zero DetailNet's generated output layer so that ``d == 0`` for every code."""
        A, a, B, c = self.detail_block.hyper.layers[-1]
        B.value[...] = 0.0
        c.value[...] = 0.0

    def manifest(self) -> dict:
        return {"format": "imface-model", "version": 1, "config": asdict(self.cfg)}


def attenuation(s, sigma_att: float):
    """``exp(-(s / sigma)^2)`` on plain arrays."""
    if not sigma_att > 0:
        raise ValueError("sigma_att must be positive")
    s = np.asarray(s, dtype=np.float64)
    return np.exp(-(s / sigma_att) ** 2)


def default_landmarks(k: int) -> np.ndarray:
    """Canonical frontal landmark layout (mm): outer eye corners, nose tip, mouth corners."""
    base = np.array([[-45.0, 35.0, 10.0], [45.0, 35.0, 10.0], [0.0, 0.0, 40.0],
                     [-25.0, -35.0, 15.0], [25.0, -35.0, 15.0]])
    if k <= 5:
        return base[:k].copy()
    extra = [[-80.0 + 160.0 * i / max(k - 6, 1), 60.0, -20.0] for i in range(k - 5)]
    return np.vstack([base, extra])


def _as_batch(z) -> Tensor:
    z = T.as_tensor(z)
    return T.reshape(z, (1, z.shape[0])) if z.ndim == 1 else z


def _leaf(x) -> Tensor:
    x = T.as_tensor(x)
    return x if x.requires_grad else Tensor(x.value, requires_grad=True)


def _detach_conditioning(cond: Conditioning) -> None:
    """Freeze generated parameters so evaluation-only graphs stay small."""
    def det(t):
        return Tensor(t.value)

    cond.landmarks = det(cond.landmarks)
    cond.landmarks_neutral = det(cond.landmarks_neutral)
    cond.exp_params = [(det(w), det(b)) for w, b in cond.exp_params]
    cond.id_params = [(det(w), det(b)) for w, b in cond.id_params]
    if cond.detail_params is not None:
        cond.detail_params = [(det(w), det(b)) for w, b in cond.detail_params]
