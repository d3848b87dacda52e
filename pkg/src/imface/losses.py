"""Training objectives.

All terms are computed in normalised units (sampling-sphere radius = 1), so
the default weights keep the balance they were tuned for at that scale.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .diffcore import Tensor, grad
from .diffcore import ops as T


@dataclass
class LossWeights:
    sdf: float = 3e3  # lambda1
    normal: float = 1e2  # lambda2
    eikonal: float = 5e1  # lambda3
    emb_shape: float = 1e5  # lambda4, z_exp and z_id
    emb_detail: float = 1e3  # lambda5
    lmk_gen: float = 1e3  # lambda6
    lmk_cons: float = 1e2  # lambda7
    residual: float = 1e2  # lambda8
    imp: float = 1e4  # lambda9

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    @classmethod
    def from_list(cls, values) -> LossWeights:
        return cls(*[float(v) for v in values])

    def as_list(self) -> list[float]:
        return [getattr(self, f.name) for f in fields(self)]

    def to_dict(self) -> dict:
        return asdict(self)


# -- individual terms ---------------------------------------------------------

def sdf_loss(s_pred, grad_pred, s_gt, n_gt, lam1: float, lam2: float) -> Tensor:
    """``lam1 * sum|s - s_gt| + lam2 * sum(1 - <grad, n_gt>)``."""
    s_pred, grad_pred = T.as_tensor(s_pred), T.as_tensor(grad_pred)
    value = T.mul(T.tsum(T.tabs(T.sub(s_pred, s_gt))), lam1)
    align = T.tsum(T.mul(grad_pred, n_gt), axis=-1)
    return T.add(value, T.mul(T.tsum(T.sub(1.0, align)), lam2))


def eikonal_terms(grad_f, grad_template, lam3: float) -> Tensor:
    """``lam3 * sum(| |grad f| - 1 | + | |grad T(I(p'))| - 1 |)``."""
    first = T.tsum(T.tabs(T.sub(T.norm(grad_f, axis=-1), 1.0)))
    if grad_template is None:
        return T.mul(first, lam3)
    second = T.tsum(T.tabs(T.sub(T.norm(grad_template, axis=-1), 1.0)))
    return T.mul(T.add(first, second), lam3)


def eikonal_loss(points, model, cond, lam3: float) -> Tensor:
    """Eikonal penalty of the base field, evaluated from scratch at ``points`` (normalised)."""
    x = T.as_tensor(points)
    if not x.requires_grad:
        x = Tensor(x.value, requires_grad=True)
    be = model.base_eval(x, cond)
    gs0, g = base_gradients(be)
    return eikonal_terms(g, gs0, lam3)


def embedding_loss(z_exp, z_id, z_detail, lam4: float, lam5: float) -> Tensor:
    shape = T.add(T.tsum(T.mul(z_exp, z_exp)), T.tsum(T.mul(z_id, z_id)))
    out = T.mul(shape, lam4)
    if z_detail is not None:
        out = T.add(out, T.mul(T.tsum(T.mul(z_detail, z_detail)), lam5))
    return out


def landmark_gen_loss(l, l_neutral, l_gt, l_neutral_gt, lam6: float) -> Tensor:
    l, l_neutral = T.as_tensor(l), T.as_tensor(l_neutral)
    if l.shape != np.shape(l_gt) or l_neutral.shape != np.shape(l_neutral_gt):
        raise ValueError(f"landmark count mismatch: {l.shape} vs {np.shape(l_gt)}")
    a = T.tsum(T.tabs(T.sub(l, l_gt)))
    b = T.tsum(T.tabs(T.sub(l_neutral, l_neutral_gt)))
    return T.mul(T.add(a, b), lam6)


def consistency_terms(deformed_id, deformed_tmp, neutral_gt, template, lam7: float) -> Tensor:
    """``lam7 * sum(|E(l) - l_neutral| + |I(E(l)) - l_template|)`` (l1 per coordinate)."""
    a = T.tsum(T.tabs(T.sub(deformed_id, neutral_gt)))
    b = T.tsum(T.tabs(T.sub(deformed_tmp, template)))
    return T.mul(T.add(a, b), lam7)


def landmark_consistency_loss(dense, model, cond, neutral_gt, template, lam7: float) -> Tensor:
    """Dense correspondence supervision; all positions normalised, ``dense: (B, m, 3)``."""
    x_id = model.exp_field(dense, cond)
    x_tmp, _ = model.id_field(x_id, cond)
    return consistency_terms(x_id, x_tmp, neutral_gt, template, lam7)


def residual_loss(delta, lam8: float) -> Tensor:
    return T.mul(T.tsum(T.tabs(delta)), lam8)


def neutral_suppression_terms(x, x_id, is_neutral, lam9: float) -> Tensor:
    """``lam9 * sum |E(p) - p|^2`` over points of neutral scans; ``x: (B, N, 3)``."""
    mask = np.asarray(is_neutral, dtype=np.float64).reshape(-1, 1, 1)
    d = T.mul(T.sub(x_id, x), mask)
    return T.mul(T.tsum(T.mul(d, d)), lam9)


def neutral_suppression_loss(points, model, cond, is_neutral, lam9: float) -> Tensor:
    x = T.as_tensor(points)
    if not np.any(is_neutral):
        return Tensor(0.0)
    return neutral_suppression_terms(x, model.exp_field(x, cond), is_neutral, lam9)


# -- gradients -------------------------------------------------------------------

def base_gradients(be, with_template: bool = True):
    """``(grad_{p'} T(I(p')), grad_p f_hat(p))`` as differentiable graph nodes.

    The template-space gradient excludes the residual; both gradients share
    one backward pass through TempNet.
    """
    (g_s0,) = grad(T.tsum(be.s0), [be.x_id], create_graph=True)
    (g_delta,) = grad(T.tsum(be.delta), [be.x_id], create_graph=True)
    g_id = g_s0 if g_delta is None else T.add(g_s0, g_delta)
    (g,) = grad(be.x_id, [be.x], grad_outputs=g_id, create_graph=True)
    return (g_s0 if with_template else None), g


# -- stage totals --------------------------------------------------------------

@dataclass
class Batch:
    """Normalised training batch for ``B`` scans.

    points: (B, N, 3); sdf: (B, N); normals: (B, N, 3); landmarks /
    neutral_landmarks: (B, k, 3); dense / dense_neutral: (B, m, 3);
    dense_template: (m, 3); is_neutral: (B,)
    """

    points: np.ndarray
    sdf: np.ndarray
    normals: np.ndarray
    landmarks: np.ndarray | None = None
    neutral_landmarks: np.ndarray | None = None
    dense: np.ndarray | None = None
    dense_neutral: np.ndarray | None = None
    dense_template: np.ndarray | None = None
    is_neutral: np.ndarray | None = None


def stage1_terms(model, cond, batch: Batch, w: LossWeights, consistency: bool = True
                 ) -> dict[str, Tensor]:
    """Per-term losses of the base model; the total is their sum."""
    x = Tensor(batch.points, requires_grad=True)
    be = model.base_eval(x, cond)
    g_tmp, g = base_gradients(be)
    terms = {
        "sdf": sdf_loss(be.sdf, g, batch.sdf, batch.normals, w.sdf, w.normal),
        "eik": eikonal_terms(g, g_tmp, w.eikonal),
        "emb": embedding_loss(cond.z_exp, cond.z_id, None, w.emb_shape, w.emb_detail),
        "res": residual_loss(be.delta, w.residual),
    }
    if batch.landmarks is not None:
        terms["lmk_g"] = landmark_gen_loss(cond.landmarks, cond.landmarks_neutral,
                                           batch.landmarks, batch.neutral_landmarks, w.lmk_gen)
    if consistency and batch.dense is not None and w.lmk_cons > 0:
        terms["lmk_c"] = landmark_consistency_loss(batch.dense, model, cond, batch.dense_neutral,
                                                   batch.dense_template, w.lmk_cons)
    if batch.is_neutral is not None:
        terms["imp"] = neutral_suppression_terms(be.x, be.x_id, batch.is_neutral, w.imp)
    return terms


def stage2_terms(model, cond, batch: Batch, w: LossWeights) -> dict[str, Tensor]:
    """Detail-model losses: sdf + eikonal + embedding, all on the corrected field."""
    x = Tensor(batch.points, requires_grad=True)
    base, corr, _ = model.full_eval(x, cond)
    (g_s0,) = grad(T.tsum(corr.s0), [corr.x_id], create_graph=True)
    (g,) = grad(T.tsum(corr.sdf), [x], create_graph=True)
    return {
        "sdf": sdf_loss(corr.sdf, g, batch.sdf, batch.normals, w.sdf, w.normal),
        "eik": eikonal_terms(g, g_s0, w.eikonal),
        "emb": embedding_loss(cond.z_exp, cond.z_id, cond.z_detail, w.emb_shape, w.emb_detail),
    }


def total(terms: dict[str, Tensor]) -> Tensor:
    out = None
    for v in terms.values():
        out = v if out is None else T.add(out, v)
    return out


STAGE2_KEYS = ("sdf", "eik", "emb")


def stage_blend_kappa(t: float, t_m: float) -> float | None:
    """Cosine blend weight ``0.5 (1 + cos(pi (t - T_m) / (1 - T_m)))``; ``None`` before ``T_m``."""
    if not 0.0 <= t_m < 1.0:
        raise ValueError("T_m must lie in [0, 1)")
    if t < t_m:
        return None
    t = min(t, 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * (t - t_m) / (1.0 - t_m)))


def stage_weights(t: float, t_m: float, literal: bool = False) -> tuple[float, float]:
    """``(weight of base loss, weight of detail loss)`` at progress ``t``.

    By default kappa weights the base loss so the detail loss ramps in; with
    ``literal=True`` kappa weights the detail loss as in the original schedule.
    """
    k = stage_blend_kappa(t, t_m)
    if k is None:
        return 1.0, 0.0
    return (1.0 - k, k) if literal else (k, 1.0 - k)
