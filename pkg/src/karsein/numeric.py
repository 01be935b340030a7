"""Dense numeric helpers shared by every layer: nonlinearities, Adam, gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    """Logistic function; the tanh form never overflows for large |x|."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    out = 0.5 * np.tanh(0.5 * x) + 0.5
    return out if out.ndim else out[()]


def silu(x):
    x = np.asarray(x)
    return x * sigmoid(x)


def silu_grad(x):
    x = np.asarray(x)
    s = sigmoid(x)
    return s + x * s * (1.0 - s)


@dataclass
class Param:
    """A trainable tensor and its gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad {self.grad.shape} != value {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Param, **kw) -> "AdamState":
        return cls(m=np.zeros_like(param.value), v=np.zeros_like(param.value), **kw)


def adam_update(param: Param, state: AdamState) -> Param:
    """One bias-corrected Adam step, in place on ``param.value``."""
    g = param.grad
    if state.m.shape != g.shape:
        raise DimensionError(f"{param.name}: optimizer state {state.m.shape} != grad {g.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient in parameter {param.name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    denom = np.sqrt(state.v / bc2) + state.eps
    param.value -= ((state.lr / bc1) * state.m / denom).astype(param.value.dtype, copy=False)
    return param


class Adam:
    """Adam over a fixed list of parameters."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.states = [AdamState.for_param(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                       for p in self.params]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_update(p, s)


class GradCheck(NamedTuple):
    max_rel_err: float
    param: str
    index: tuple


def finite_diff_check(f: Callable[[], float], params: Sequence[Param], h: float = 1e-5) -> GradCheck:
    """Compare each ``param.grad`` against central differences of ``f``.

    ``f`` is re-evaluated with each coordinate perturbed in place; the analytic
    gradients must already sit in the ``grad`` buffers. The relative error of a
    coordinate is ``|g - g_fd| / max(1, |g_fd|)``.
    """
    worst = GradCheck(0.0, "", ())
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f()
            flat[k] = orig - h
            fm = f()
            flat[k] = orig
            idx = np.unravel_index(k, p.value.shape)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite objective perturbing {p.name}{tuple(map(int, idx))}")
            g_fd = (fp - fm) / (2.0 * h)
            err = abs(float(gflat[k]) - g_fd) / max(1.0, abs(g_fd))
            if err > worst.max_rel_err:
                worst = GradCheck(err, p.name, tuple(int(i) for i in idx))
    return worst
