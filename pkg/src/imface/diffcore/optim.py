from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
              lr_scale: list[float] | None = None) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer moments must align")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        lr = state.lr * (lr_scale[i] if lr_scale is not None else 1.0)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class Adam:
    """Adam over named parameter groups sharing one step counter."""

    groups: dict[str, list[Tensor]]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    group_scale: dict[str, float] = field(default_factory=dict)
    state: OptimizerState = field(init=False)

    def __post_init__(self):
        params = self.parameters()
        self.state = OptimizerState([np.zeros_like(p.value) for p in params],
                                    [np.zeros_like(p.value) for p in params],
                                    0, self.lr, self.beta1, self.beta2, self.eps)

    def parameters(self) -> list[Tensor]:
        return [p for ps in self.groups.values() for p in ps]

    def _scales(self) -> list[float]:
        return [self.group_scale.get(name, 1.0) for name, ps in self.groups.items() for _ in ps]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        params = self.parameters()
        grads = [p.grad for p in params]
        self.state.lr = self.lr
        adam_step([p.value for p in params], grads, self.state, self._scales())
