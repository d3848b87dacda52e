"""Neural Blend-Field building blocks.

A Mini-Nets block holds ``k`` small sine MLPs, one per facial region, each
evaluated on the positionally-encoded offset of the query from its region
landmark. A ReLU fusion net on the absolute position produces softmax blend
weights. Region-net parameters are either owned by the block (template
field) or generated per scan by a hypernetwork from a latent code.

All coordinates here are in normalised units (sampling-sphere radius = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import MLP, MLPSpec, Tensor, encoded_width, mlp_forward, positional_encoding
from .diffcore import ops as T
from .diffcore.nn import siren_init

SMALL_ANGLE = 1e-4
OUTPUT_KINDS = {"se3": 6, "se3_residual": 7, "scalar": 1}


class ConfigurationError(ValueError):
    pass


# -- SE(3) ------------------------------------------------------------------

def skew(w: np.ndarray) -> np.ndarray:
    """``w^`` such that ``skew(w) @ x == cross(w, x)``; batched over leading dims."""
    w = np.asarray(w, dtype=np.float64)
    z = np.zeros(w.shape[:-1])
    return np.stack([
        np.stack([z, -w[..., 2], w[..., 1]], -1),
        np.stack([w[..., 2], z, -w[..., 0]], -1),
        np.stack([-w[..., 1], w[..., 0], z], -1),
    ], -2)


def wrap_rotation(w: np.ndarray) -> np.ndarray:
    """Map an axis-angle vector to the equivalent one with angle in [0, pi)."""
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w, axis=-1, keepdims=True)
    wrapped = np.mod(th + np.pi, 2 * np.pi) - np.pi
    scale = np.divide(wrapped, th, out=np.ones_like(th), where=th > 0)
    return w * scale


@dataclass(frozen=True)
class SE3Param:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if not (np.all(np.isfinite(om)) and np.all(np.isfinite(v))):
            raise ValueError("SE3Param must be finite")
        object.__setattr__(self, "omega", wrap_rotation(om))
        object.__setattr__(self, "v", v)


def _coefficients(omega: Tensor):
    """Rodrigues coefficients ``sin t/t, (1-cos t)/t^2, (t-sin t)/t^3``.

    Below ``SMALL_ANGLE`` second-order Taylor expansions in ``t^2`` are used;
    the exact branch is fed a dummy angle there so neither branch produces
    NaN gradients.
    """
    th2 = T.tsum(T.mul(omega, omega), axis=-1, keepdims=True)
    small = th2.value < SMALL_ANGLE ** 2
    safe2 = T.where(small, 1.0, th2)
    th = T.sqrt(safe2)
    s = T.sin(th)
    half = T.sin(T.mul(th, 0.5))
    a_exact = T.div(s, th)
    b_exact = T.div(T.mul(T.mul(half, half), 2.0), safe2)
    c_exact = T.div(T.sub(th, s), T.mul(safe2, th))
    a_tay = T.sub(1.0, T.div(th2, 6.0))
    b_tay = T.sub(0.5, T.div(th2, 24.0))
    c_tay = T.sub(1.0 / 6.0, T.div(th2, 120.0))
    return (T.where(small, a_tay, a_exact), T.where(small, b_tay, b_exact),
            T.where(small, c_tay, c_exact))


def se3_exp(omega, v) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and translation of the twist ``(omega, v)``."""
    if isinstance(omega, SE3Param):
        omega, v = omega.omega, omega.v
    om = T.as_tensor(omega)
    vt = T.as_tensor(v)
    a, b, c = (x.value[..., None] for x in _coefficients(om))
    W = skew(om.value)
    W2 = W @ W
    eye = np.broadcast_to(np.eye(3), W.shape)
    R = eye + a * W + b * W2
    V = eye + b * W + c * W2
    t = (V @ vt.value[..., None])[..., 0]
    return R, t


def apply_deformation(p, omega, v) -> Tensor:
    """``exp(omega^) p + t``, differentiable in all arguments.

    Uses the vector form of Rodrigues' formula so no 3x3 matrices are built
    per query point.
    """
    p, omega, v = T.as_tensor(p), T.as_tensor(omega), T.as_tensor(v)
    a, b, c = _coefficients(omega)
    wp = T.cross(omega, p)
    wwp = T.cross(omega, wp)
    rp = p + a * wp + b * wwp
    wv = T.cross(omega, v)
    wwv = T.cross(omega, wv)
    t = v + b * wv + c * wwv
    return rp + t


# -- Mini-Nets block ------------------------------------------------------

@dataclass(frozen=True)
class BlockConfig:
    kind: str = "scalar"
    k: int = 5
    hidden: int = 128
    depth: int = 3
    w0: float = 30.0
    n_freq: int = 4
    fusion_hidden: int = 128
    # scale applied to the last region-net layer at init (deformations start near identity)
    last_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in OUTPUT_KINDS:
            raise ConfigurationError(f"unknown block kind {self.kind!r}")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")

    @property
    def out_dim(self) -> int:
        return OUTPUT_KINDS[self.kind]

    @property
    def region_spec(self) -> MLPSpec:
        widths = (encoded_width(3, self.n_freq),) + (self.hidden,) * self.depth + (self.out_dim,)
        return MLPSpec(widths, "sine", self.w0)


def region_init(cfg: BlockConfig, rng: np.random.Generator, zero_rows: tuple[int, ...] = (),
                zero_last: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """SIREN-initialised ``(W, b)`` per layer, stacked over the ``k`` regions."""
    spec = cfg.region_spec
    out = []
    n = len(spec.layer_shapes)
    for i, (fi, fo) in enumerate(spec.layer_shapes):
        w = siren_init(fi, spec.w0, i == 0, rng, (cfg.k, fi, fo))
        b = np.zeros((cfg.k, 1, fo))
        if i == n - 1:
            w *= cfg.last_scale
            if zero_last:
                w[:] = 0.0
            for r in zero_rows:
                w[..., r] = 0.0
        out.append((w, b))
    return out


@dataclass
class FusionNet:
    net: MLP

    @classmethod
    def create(cls, cfg: BlockConfig, rng: np.random.Generator, name: str) -> FusionNet:
        spec = MLPSpec((3, cfg.fusion_hidden, cfg.fusion_hidden, cfg.k), "relu")
        return cls(MLP.create(spec, rng, last_scale=0.1, name=name))

    def logits(self, x) -> Tensor:
        return self.net(x)

    def weights(self, x) -> Tensor:
        return T.softmax(self.logits(x), axis=-1)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


def blend_field(cfg: BlockConfig, fusion: FusionNet, x, landmarks, region_params,
                fusion_logits=None) -> Tensor:
    """``sum_n w_n(x) * psi_n(gamma(x - l_n))``.

    x: ``(B, N, 3)``; landmarks: ``(B, k, 3)`` or ``(k, 3)``;
    region_params: per-layer ``(W, b)`` with ``W: ([B,] k, fan_in, fan_out)``.
    Returns ``(B, N, out_dim)``.
    """
    x = T.as_tensor(x)
    lm = T.as_tensor(landmarks)
    if lm.shape[-2] != cfg.k:
        raise ConfigurationError(f"expected {cfg.k} landmarks, got {lm.shape[-2]}")
    if lm.ndim == 2:
        lm = T.reshape(lm, (1,) + lm.shape)
    rel = T.sub(T.expand_dims(x, 1), T.expand_dims(lm, 2))  # (B, k, N, 3)
    enc = positional_encoding(rel, cfg.n_freq)
    local = mlp_forward(cfg.region_spec, region_params, enc)  # (B, k, N, out)
    logits = fusion.logits(x) if fusion_logits is None else T.as_tensor(fusion_logits)
    w = T.softmax(logits, axis=-1)  # (B, N, k)
    w = T.expand_dims(T.swapaxes(w, -1, -2), -1)  # (B, k, N, 1)
    return T.tsum(T.mul(w, local), axis=1)


@dataclass
class StaticBlock:
    """A Mini-Nets block owning its region-net parameters (the template field)."""

    cfg: BlockConfig
    fusion: FusionNet
    region: list[tuple[Tensor, Tensor]]

    @classmethod
    def create(cls, cfg: BlockConfig, rng: np.random.Generator, name: str) -> StaticBlock:
        fusion = FusionNet.create(cfg, rng, f"{name}.fusion")
        region = [(Tensor(w, requires_grad=True, name=f"{name}.W{i}"),
                   Tensor(b, requires_grad=True, name=f"{name}.b{i}"))
                  for i, (w, b) in enumerate(region_init(cfg, rng))]
        return cls(cfg, fusion, region)

    def __call__(self, x, landmarks) -> Tensor:
        return blend_field(self.cfg, self.fusion, x, landmarks, self.region)

    def parameters(self) -> list[Tensor]:
        return self.fusion.parameters() + [t for wb in self.region for t in wb]


@dataclass
class HyperNet:
    """Per-target-layer generators ``z -> relu(z A + a) B + c`` for all ``k`` regions."""

    cfg: BlockConfig
    z_dim: int
    hidden: int
    layers: list[tuple[Tensor, Tensor, Tensor, Tensor]]

    @classmethod
    def create(cls, cfg: BlockConfig, z_dim: int, rng: np.random.Generator, name: str,
               hidden: int = 32, zero_rows: tuple[int, ...] = (), zero_last: bool = False,
               spread: float = 1.0) -> HyperNet:
        base = region_init(cfg, rng, zero_rows=zero_rows, zero_last=zero_last)
        k = cfg.k
        layers = []
        n = len(base)
        for i, ((w0, b0), (fi, fo)) in enumerate(zip(base, cfg.region_spec.layer_shapes)):
            n_out = fi * fo + fo
            A = rng.uniform(-1, 1, size=(k, z_dim, hidden)) * np.sqrt(6.0 / z_dim)
            a = np.zeros((k, 1, hidden))
            bound = np.abs(w0).max() if np.any(w0) else 0.0
            B = rng.uniform(-1, 1, size=(k, hidden, n_out)) * spread * bound / hidden
            if i == n - 1:
                for r in (range(fo) if zero_last else zero_rows):
                    B[..., r:fi * fo:fo] = 0.0  # column r of the (fi, fo) weight
                    B[..., fi * fo + r] = 0.0
            c = np.concatenate([w0.reshape(k, 1, fi * fo), b0.reshape(k, 1, fo)], axis=-1)
            layers.append(tuple(Tensor(v, requires_grad=True, name=f"{name}.L{i}.{s}")
                                for v, s in ((A, "A"), (a, "a"), (B, "B"), (c, "c"))))
        return cls(cfg, z_dim, hidden, layers)

    def generate(self, z) -> list[tuple[Tensor, Tensor]]:
        """Region-net parameters for each code in ``z`` (shape ``(B, z_dim)``)."""
        z = T.as_tensor(z)
        if z.shape[-1] != self.z_dim:
            raise ConfigurationError(f"latent dim {z.shape[-1]} != {self.z_dim}")
        bsz = z.shape[0]
        zz = T.reshape(z, (bsz, 1, 1, self.z_dim))
        k = self.cfg.k
        out = []
        for (A, a, B, c), (fi, fo) in zip(self.layers, self.cfg.region_spec.layer_shapes):
            h = T.relu(T.add(T.matmul(zz, A), a))  # (B, k, 1, hidden)
            flat = T.add(T.matmul(h, B), c)  # (B, k, 1, fi*fo + fo)
            W = T.reshape(flat[..., :fi * fo], (bsz, k, fi, fo))
            b = T.reshape(flat[..., fi * fo:], (bsz, k, 1, fo))
            out.append((W, b))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]


@dataclass
class HyperBlock:
    """A Mini-Nets block whose region nets are generated from a latent code."""

    cfg: BlockConfig
    fusion: FusionNet
    hyper: HyperNet

    @classmethod
    def create(cls, cfg: BlockConfig, z_dim: int, rng: np.random.Generator, name: str,
               hyper_hidden: int = 32, zero_rows: tuple[int, ...] = (),
               zero_last: bool = False) -> HyperBlock:
        fusion = FusionNet.create(cfg, rng, f"{name}.fusion")
        hyper = HyperNet.create(cfg, z_dim, rng, f"{name}.hyper", hyper_hidden,
                                zero_rows=zero_rows, zero_last=zero_last)
        return cls(cfg, fusion, hyper)

    def __call__(self, x, landmarks, z=None, params=None) -> Tensor:
        if params is None:
            params = self.hyper.generate(z)
        return blend_field(self.cfg, self.fusion, x, landmarks, params)

    def parameters(self) -> list[Tensor]:
        return self.fusion.parameters() + self.hyper.parameters()


@dataclass
class LandmarkNet:
    """Fully connected ReLU net mapping codes to ``k`` 3-D landmarks."""

    net: MLP
    k: int

    @classmethod
    def create(cls, in_dim: int, k: int, rng: np.random.Generator, name: str,
               hidden: int = 256, mean_landmarks: np.ndarray | None = None) -> LandmarkNet:
        spec = MLPSpec((in_dim, hidden, hidden, 3 * k), "relu")
        net = MLP.create(spec, rng, last_scale=0.01, name=name)
        if mean_landmarks is not None:
            net.biases[-1].value[...] = np.asarray(mean_landmarks).reshape(1, 3 * k)
        return cls(net, k)

    def __call__(self, *codes) -> Tensor:
        z = codes[0] if len(codes) == 1 else T.concat(list(codes), axis=-1)
        z = T.as_tensor(z)
        out = self.net(z)
        return T.reshape(out, z.shape[:-1] + (self.k, 3))

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()
