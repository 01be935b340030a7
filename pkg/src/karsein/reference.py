"""Baselines: a vanilla KAN (one learnable activation per edge) and a plain MLP.

Both come as bare networks on real vectors and as CTR models with an
embedding table in front, so they train under the same loop as KarSein.
The synthetic multiplicative-fit study and KAN node pruning live here too.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .model import EmbeddingTable
from .numeric import Adam, DimensionError, Param, sigmoid, silu, silu_grad
from .spline import BSplineBasis, EdgeActivation, fit_coeffs, make_uniform_knots
from .training import entropy_grad, entropy_reg, l1_grad, l1_reg


class KanLayer:
    """``in_dim x out_dim`` edges; output j is sum_i w[i,j] * (B(x_i) . c[i,j] + silu(x_i))."""

    def __init__(self, in_dim: int, out_dim: int, basis: BSplineBasis, rng: np.random.Generator,
                 name: str = "kan.0", dtype=np.float64, w_init: float = 1.0):
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.basis = basis
        self.name = name
        nb = basis.n_basis
        c = rng.normal(0.0, 0.1 / np.sqrt(nb), size=(self.in_dim, self.out_dim, nb))
        self.coeffs = Param(f"{name}.coeffs", c.astype(dtype))
        self.w_phi = Param(f"{name}.w_phi", np.full((self.in_dim, self.out_dim), w_init, dtype=dtype))

    def params(self) -> list[Param]:
        return [self.coeffs, self.w_phi]

    def edge(self, i: int, j: int) -> EdgeActivation:
        return EdgeActivation(float(self.w_phi.value[i, j]), self.coeffs.value[i, j].copy())

    def set_edge(self, i: int, j: int, act: EdgeActivation) -> None:
        self.w_phi.value[i, j] = act.w_phi
        self.coeffs.value[i, j] = act.coeffs

    def forward(self, x: np.ndarray, keep: bool = False):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"{self.name}: expected (batch, {self.in_dim}) input, got {x.shape}")
        B = x.shape[0]
        nb = self.basis.n_basis
        Bd = self.basis.eval(x).astype(x.dtype, copy=False)  # (B, in, nb)
        wc = self.coeffs.value * self.w_phi.value[..., None]  # (in, out, nb)
        flat = Bd.reshape(B, self.in_dim * nb)
        y = flat @ wc.transpose(0, 2, 1).reshape(self.in_dim * nb, self.out_dim) + silu(x) @ self.w_phi.value
        return y, ((x, Bd) if keep else None)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, Bd = cache
        B = x.shape[0]
        nb = self.basis.n_basis
        C, w = self.coeffs.value, self.w_phi.value
        # G[i, n, j] = sum_b Bd[b, i, n] dy[b, j]
        G = (Bd.reshape(B, -1).T @ dy).reshape(self.in_dim, nb, self.out_dim)
        Gt = G.transpose(0, 2, 1)
        self.w_phi.grad += (Gt * C).sum(axis=-1) + silu(x).T @ dy
        self.coeffs.grad += w[..., None] * Gt
        wc = C * w[..., None]
        T = (dy @ wc.transpose(1, 0, 2).reshape(self.out_dim, -1)).reshape(B, self.in_dim, nb)
        Bg = self.basis.grad(x).astype(x.dtype, copy=False)
        return (Bg * T).sum(axis=-1) + silu_grad(x) * (dy @ w.T)


class KanNetwork:
    """A stack of KanLayers sharing one spline basis."""

    def __init__(self, widths: Sequence[int], grid: int = 5, order: int = 3, seed: int = 0,
                 lo: float = -1.0, hi: float = 1.0, dtype=np.float64, w_init: float = 1.0,
                 rng: Optional[np.random.Generator] = None, name: str = "kan"):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise DimensionError(f"invalid KAN widths {widths}")
        self.basis = make_uniform_knots(grid, order, lo, hi)
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.layers = [KanLayer(a, b, self.basis, rng, f"{name}.{i}", dtype, w_init)
                       for i, (a, b) in enumerate(zip(self.widths, self.widths[1:]))]

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def reg_params(self) -> list[Param]:
        return [layer.w_phi for layer in self.layers]

    def forward(self, x: np.ndarray, keep: bool = False):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, keep)
            caches.append(c)
        return x, caches

    def backward(self, dy: np.ndarray, caches) -> np.ndarray:
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, c)
        return dy


def kan_forward(net: KanNetwork, x) -> np.ndarray:
    """One vector of length widths[0] gives a real; a (batch, widths[0]) array gives a vector."""
    x = np.asarray(x, dtype=net.layers[0].coeffs.value.dtype)
    single = x.ndim == 1
    if x.shape[-1] != net.widths[0]:
        raise DimensionError(f"KAN expects {net.widths[0]} inputs, got {x.shape[-1]}")
    y, _ = net.forward(x[None] if single else x)
    if net.widths[-1] == 1:
        y = y[:, 0]
    return y[0] if single else y


def fit_edge(net: KanNetwork, layer: int, i: int, j: int, fn: Callable, w_phi: float = 1.0,
             n: int = 401) -> None:
    """Least-squares set one edge so that phi(x) ~ w_phi * fn(x) over the spline domain."""
    basis = net.basis
    xs = np.linspace(basis.lo, basis.hi, n)
    coeffs = fit_coeffs(basis, xs, fn(xs), residual_silu=True)
    net.layers[layer].set_edge(i, j, EdgeActivation(w_phi, coeffs))


class MlpNetwork:
    """Affine layers with a fixed nonlinearity in between; none after the last."""

    ACTIVATIONS = ("relu", "silu")

    def __init__(self, widths: Sequence[int], activation: str = "relu", seed: int = 0,
                 dtype=np.float64, rng: Optional[np.random.Generator] = None, name: str = "mlp"):
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"activation must be one of {self.ACTIVATIONS}")
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise DimensionError(f"invalid MLP widths {widths}")
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.W: list[Param] = []
        self.b: list[Param] = []
        for i, (a, b) in enumerate(zip(self.widths, self.widths[1:])):
            bound = np.sqrt(6.0 / (a + b))
            self.W.append(Param(f"{name}.{i}.W", rng.uniform(-bound, bound, size=(a, b)).astype(dtype)))
            self.b.append(Param(f"{name}.{i}.b", np.zeros(b, dtype=dtype)))

    def params(self) -> list[Param]:
        return [p for pair in zip(self.W, self.b) for p in pair]

    def reg_params(self) -> list[Param]:
        return []

    def _act(self, z):
        return np.maximum(z, 0) if self.activation == "relu" else silu(z)

    def _act_grad(self, z):
        return (z > 0).astype(z.dtype) if self.activation == "relu" else silu_grad(z)

    def forward(self, x: np.ndarray, keep: bool = False):
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise DimensionError(f"MLP expects (batch, {self.widths[0]}) input, got {x.shape}")
        pre = []
        h = x
        last = len(self.W) - 1
        for k, (W, b) in enumerate(zip(self.W, self.b)):
            z = h @ W.value + b.value
            pre.append((h, z))
            h = z if k == last else self._act(z)
        return h, (pre if keep else None)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        last = len(self.W) - 1
        for k in range(last, -1, -1):
            h, z = cache[k]
            dz = dy if k == last else dy * self._act_grad(z)
            self.W[k].grad += h.T @ dz
            self.b[k].grad += dz.sum(axis=0)
            dy = dz @ self.W[k].value.T
        return dy


def mlp_forward(net: MlpNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=net.W[0].value.dtype)
    single = x.ndim == 1
    y, _ = net.forward(x[None] if single else x)
    if net.widths[-1] == 1:
        y = y[:, 0]
    return y[0] if single else y


# -- synthetic multiplicative fits --------------------------------------------

TARGETS: dict[str, Callable] = {
    "a^2": lambda a, b: a * a,
    "b^2": lambda a, b: b * b,
    "ab": lambda a, b: a * b,
}

RMSE_TARGET = 0.05


def _penalty(params: Sequence[Param], weight: float) -> float:
    return sum(weight * (l1_reg(p.value) + entropy_reg(p.value)) for p in params)


def _add_penalty_grad(params: Sequence[Param], weight: float) -> None:
    for p in params:
        p.grad += weight * (l1_grad(p.value) + entropy_grad(p.value))


def eval_grid(nx: int = 32, ny: int = 64) -> np.ndarray:
    """Held-out ``nx * ny`` grid over [-1, 1]^2, shape (nx*ny, 2)."""
    a, b = np.meshgrid(np.linspace(-1, 1, nx), np.linspace(-1, 1, ny), indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def fit_synthetic(target: str, widths: Sequence[int], reg_weight: float = 0.0, lr: float = 1e-3,
                  max_steps: int = 5000, seed: int = 0, grid: int = 10, order: int = 3,
                  n_train: int = 10_000, batch_size: int = 256) -> dict:
    """Train a KAN on f(a, b) and count Adam steps until held-out RMSE <= 0.05.

    Each epoch draws ``n_train`` fresh uniform points from [-1, 1]^2 and walks
    them in minibatches. The held-out grid RMSE is checked after every step.
    The penalty is ``reg_weight`` times (L1 + entropy) of each layer's w_phi.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {sorted(TARGETS)}")
    widths = [int(w) for w in widths]
    if widths[0] != 2 or widths[-1] != 1:
        raise DimensionError("synthetic fits need widths starting at 2 and ending at 1")
    f = TARGETS[target]
    rng = np.random.default_rng(seed)
    net = KanNetwork(widths, grid=grid, order=order, rng=rng)
    opt = Adam(net.params(), lr=lr)
    G = eval_grid()
    g_target = f(G[:, 0], G[:, 1])

    def val_rmse() -> float:
        return float(np.sqrt(np.mean((kan_forward(net, G) - g_target) ** 2)))

    steps_to = None
    rmse = val_rmse()
    step = 0
    while step < max_steps and steps_to is None:
        X = rng.uniform(-1.0, 1.0, size=(n_train, 2))
        Y = f(X[:, 0], X[:, 1])
        for s in range(0, n_train, batch_size):
            x, t = X[s:s + batch_size], Y[s:s + batch_size]
            for p in net.params():
                p.zero_grad()
            y, caches = net.forward(x, keep=True)
            dy = (2.0 / len(t)) * (y[:, 0] - t)
            net.backward(dy[:, None], caches)
            if reg_weight:
                _add_penalty_grad(net.reg_params(), reg_weight)
            opt.step()
            step += 1
            rmse = val_rmse()
            if rmse <= RMSE_TARGET:
                steps_to = step
                break
            if step >= max_steps:
                break
    return {
        "target": target,
        "widths": widths,
        "reg": float(reg_weight),
        "lr": float(lr),
        "seed": int(seed),
        "steps_to_rmse_0.05": steps_to if steps_to is not None else "failed",
        "final_rmse": rmse,
    }


# Three network settings per target, mirroring the synthetic study's table.
SYNTHETIC_SETTINGS = {
    1: {"reg": 0.01, "widths": {"a^2": [2, 1], "b^2": [2, 1], "ab": [2, 2, 1]}},
    2: {"reg": 0.01, "widths": {"a^2": [2, 4, 1], "b^2": [2, 4, 1], "ab": [2, 2, 4, 1]}},
    3: {"reg": 0.0, "widths": {"a^2": [2, 4, 1], "b^2": [2, 4, 1], "ab": [2, 2, 4, 1]}},
}


def run_synthetic_table(lr: float = 1e-3, max_steps: int = 5000, seed: int = 0,
                        settings: Sequence[int] = (1, 2, 3), targets: Sequence[str] = ("a^2", "b^2", "ab"),
                        **kw) -> dict:
    rows = []
    for sid in settings:
        setup = SYNTHETIC_SETTINGS[sid]
        cells = {}
        for t in targets:
            rep = fit_synthetic(t, setup["widths"][t], setup["reg"], lr, max_steps, seed, **kw)
            cells[t] = rep
        rows.append({"setting": sid, "reg": setup["reg"], "results": cells})
    return {"lr": lr, "max_steps": max_steps, "seed": seed, "rmse_target": RMSE_TARGET, "settings": rows}


# -- pruning ------------------------------------------------------------------

class PruneError(ValueError):
    pass


def kan_prune(net: KanNetwork, threshold: float) -> tuple[KanNetwork, dict]:
    """Drop hidden nodes whose strongest incoming or outgoing |w_phi| is <= threshold.

    Inputs and outputs are never removed. The decision for every node uses the
    weights of the network as given, then all removals happen at once.
    """
    if threshold < 0:
        raise PruneError("pruning threshold must be >= 0")
    keep = [np.arange(net.widths[0])]
    for li in range(1, len(net.widths) - 1):
        w_in = np.abs(net.layers[li - 1].w_phi.value)
        w_out = np.abs(net.layers[li].w_phi.value)
        alive = (w_in.max(axis=0) > threshold) & (w_out.max(axis=1) > threshold)
        if threshold == 0:
            alive[:] = True
        keep.append(np.flatnonzero(alive))
    keep.append(np.arange(net.widths[-1]))
    for li, k in enumerate(keep[1:-1], start=1):
        if k.size == 0:
            raise PruneError(f"threshold {threshold} removes every node of hidden layer {li}; "
                             "the output would be disconnected")
    last_in = np.abs(net.layers[-1].w_phi.value)[keep[-2]]
    if threshold > 0 and not (last_in.max(axis=0) > threshold).all():
        raise PruneError(f"threshold {threshold} cuts every edge into the output node")

    widths = [int(k.size) for k in keep]
    pruned = KanNetwork(widths, grid=net.basis.grid, order=net.basis.order,
                        lo=net.basis.lo, hi=net.basis.hi, dtype=net.layers[0].coeffs.value.dtype)
    for li, layer in enumerate(pruned.layers):
        src = net.layers[li]
        ix = np.ix_(keep[li], keep[li + 1])
        layer.w_phi.value[...] = src.w_phi.value[ix]
        layer.coeffs.value[...] = src.coeffs.value[ix]
    report = {"threshold": float(threshold), "widths_before": list(net.widths), "widths": widths,
              "kept": [k.tolist() for k in keep[1:-1]]}
    return pruned, report


# -- CTR baselines --------------------------------------------------------------

@dataclass
class BaselineCache:
    rows: np.ndarray
    inner: object
    logit: np.ndarray
    yhat: np.ndarray


class _CtrBaseline:
    """Embedding table -> wide concatenation (m*D) -> network -> sigmoid."""

    net: object

    def __init__(self, field_dims: Sequence[int], dim: int, seed: int, embedding_std: float, dtype):
        self.dtype = np.dtype(dtype)
        self.field_dims = list(field_dims)
        self.dim = int(dim)
        self.rng = np.random.default_rng(seed)
        self.embedding = EmbeddingTable(field_dims, dim, self.rng, self.dtype, embedding_std)

    @property
    def in_width(self) -> int:
        return len(self.field_dims) * self.dim

    def params(self) -> list[Param]:
        return [self.embedding.weight] + self.net.params()

    def reg_params(self) -> list[Param]:
        return self.net.reg_params()

    def mask_grads(self) -> None:
        pass

    def n_params(self, include_embedding: bool = False) -> int:
        return sum(p.value.size for p in self.params() if include_embedding or p.name != "embedding")

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def forward(self, records: np.ndarray, keep: bool = False) -> BaselineCache:
        rows = self.embedding.rows(records)
        e = self.embedding.weight.value[rows].reshape(len(rows), -1)
        out, inner = self.net.forward(e, keep)
        logit = out[:, 0]
        return BaselineCache(rows, inner, logit, sigmoid(logit))

    def backward(self, cache: BaselineCache, dyhat: np.ndarray) -> None:
        s = cache.yhat
        dz = (dyhat * s * (1.0 - s)).astype(self.dtype)[:, None]
        de = self.net.backward(dz, cache.inner)
        m = len(self.field_dims)
        B = len(cache.rows)
        # accumulate_grad takes rows-first (m, B, D)
        self.embedding.accumulate_grad(cache.rows, de.reshape(B, m, self.dim).transpose(1, 0, 2))

    def predict(self, records: np.ndarray, batch_size: int = 8192) -> np.ndarray:
        records = np.asarray(records)
        out = [self.forward(records[i:i + batch_size]).yhat for i in range(0, len(records), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)

    def state(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params()]

    def load_state(self, state) -> None:
        for p, v in zip(self.params(), state):
            p.value[...] = v


class KanCtrModel(_CtrBaseline):
    """Vanilla KAN over the wide-concatenated embeddings, e.g. 96-64-64-1."""

    def __init__(self, field_dims: Sequence[int], dim: int = 16, hidden: Sequence[int] = (64, 64),
                 grid: int = 3, order: int = 1, seed: int = 0, embedding_std: float = 0.05,
                 dtype=np.float32, w_init: Optional[float] = None):
        super().__init__(field_dims, dim, seed, embedding_std, dtype)
        # w_phi = 1 on a wide input sums mD unit edges per node; scale by fan-in instead
        if w_init is None:
            w_init = 1.0 / np.sqrt(self.in_width)
        self.net = KanNetwork([self.in_width, *hidden, 1], grid=grid, order=order, dtype=self.dtype,
                              w_init=w_init, rng=self.rng)


class MlpCtrModel(_CtrBaseline):
    """Plain DNN over the wide-concatenated embeddings."""

    def __init__(self, field_dims: Sequence[int], dim: int = 16, hidden: Sequence[int] = (64, 64),
                 activation: str = "relu", seed: int = 0, embedding_std: float = 0.05, dtype=np.float32):
        super().__init__(field_dims, dim, seed, embedding_std, dtype)
        self.net = MlpNetwork([self.in_width, *hidden, 1], activation, dtype=self.dtype, rng=self.rng)
