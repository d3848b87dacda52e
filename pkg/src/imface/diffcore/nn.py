"""Sine-activated MLPs, SIREN initialisation and positional encoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = ("sine", "relu", "none")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple[int, ...]
    activation: str = "sine"
    w0: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "sine" and not self.w0 > 0:
            raise ValueError("w0 must be positive for sine activations")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.widths[:-1], self.widths[1:]))


def siren_bound(fan_in: int, w0: float, is_first_layer: bool) -> float:
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    if is_first_layer:
        return 1.0 / fan_in
    return np.sqrt(6.0 / fan_in) / w0


def siren_init(fan_in: int, w0: float, is_first_layer: bool, rng: np.random.Generator,
               shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Draw weights uniformly in the SIREN range for a layer with ``fan_in`` inputs."""
    bound = siren_bound(fan_in, w0, is_first_layer)
    return rng.uniform(-bound, bound, size=shape if shape is not None else (fan_in,))


@dataclass
class MLP:
    """An MLP with its own (static) parameters.

    Weights may carry leading batch dimensions, e.g. one net per region:
    ``W[i]`` has shape ``(*lead, fan_in, fan_out)``.
    """

    spec: MLPSpec
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @classmethod
    def create(cls, spec: MLPSpec, rng: np.random.Generator, lead: tuple[int, ...] = (),
               last_scale: float = 1.0, name: str = "mlp") -> MLP:
        ws, bs = [], []
        for i, (fi, fo) in enumerate(spec.layer_shapes):
            if spec.activation == "sine":
                w = siren_init(fi, spec.w0, i == 0, rng, lead + (fi, fo))
            else:
                # He-uniform for relu / linear nets
                bound = np.sqrt(6.0 / fi) if spec.activation == "relu" else np.sqrt(3.0 / fi)
                w = rng.uniform(-bound, bound, size=lead + (fi, fo))
            if i == len(spec.layer_shapes) - 1:
                w = w * last_scale
            ws.append(Tensor(w, requires_grad=True, name=f"{name}.W{i}"))
            bs.append(Tensor(np.zeros(lead + (1, fo)), requires_grad=True, name=f"{name}.b{i}"))
        return cls(spec, ws, bs)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x) -> Tensor:
        return mlp_forward(self.spec, list(zip(self.weights, self.biases)), x)


def mlp_forward(spec: MLPSpec, params, x) -> Tensor:
    """Evaluate ``L_n(act(L_{n-1}(... act(L_1(x)))))``; the last layer is linear.

    ``params`` is a sequence of ``(W, b)`` with ``W: (..., fan_in, fan_out)``
    and ``b: (..., 1, fan_out)``; ``x: (..., N, fan_in)``.
    """
    x = T.as_tensor(x)
    if x.shape[-1] != spec.in_dim:
        raise DimensionError(f"input width {x.shape[-1]} != {spec.in_dim}")
    if len(params) != len(spec.layer_shapes):
        raise DimensionError(f"expected {len(spec.layer_shapes)} layers, got {len(params)}")
    h = x
    n = len(params)
    for i, (w, b) in enumerate(params):
        z = T.add(T.matmul(h, w), b)
        if i == n - 1:
            h = z
        elif spec.activation == "sine":
            h = T.sinusoid(z, spec.w0)
        elif spec.activation == "relu":
            h = T.relu(z)
        else:
            h = z
    return h


def positional_encoding(x, n_freq: int = 4) -> Tensor:
    """Per-coordinate ``(x, sin(2^j pi x), cos(2^j pi x))`` for ``j < n_freq``.

    Output layout is ``[x, sin f0, cos f0, sin f1, cos f1, ...]`` with each
    block holding all coordinates; width ``d * (1 + 2 * n_freq)``.
    """
    if n_freq < 0:
        raise ValueError("n_freq must be >= 0")
    x = T.as_tensor(x)
    if n_freq == 0:
        return x
    parts = [x]
    for j in range(n_freq):
        s = T.mul(x, (2.0 ** j) * np.pi)
        parts += [T.sin(s), T.cos(s)]
    return T.concat(parts, axis=-1)


def encoded_width(d: int, n_freq: int) -> int:
    return d * (1 + 2 * n_freq)


def softmax(v, axis: int = -1) -> Tensor:
    return T.softmax(v, axis=axis)


def input_gradient(f, p, create_graph: bool = True) -> Tensor:
    """Gradient of the scalar field ``f`` at points ``p`` (shape ``(..., 3)``).

    ``f`` must map points to per-point values. The result is itself a graph
    node, so losses built from it remain differentiable in ``f``'s parameters.
    """
    p = T.as_tensor(p)
    if not p.requires_grad:
        p = Tensor(p.value, requires_grad=True)
    y = f(p)
    (g,) = T.grad(T.tsum(y), [p], create_graph=create_graph)
    if g is None:
        g = Tensor(np.zeros(p.shape))
    return T.check_finite(g, "input gradient")
