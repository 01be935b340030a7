"""KarSein: embedding table, interaction layers, explicit/implicit towers, prediction head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numeric import DimensionError, NonFiniteError, Param, sigmoid, silu, silu_grad
from .spline import BSplineBasis, make_uniform_knots

CHECKPOINT_SCHEMA_VERSION = 1
HEAD_MODES = ("mean", "sum")
SUM_CEIL = 1.0 - 1e-7


class EmbeddingTable:
    """One stacked table for all fields; index 0 of every field is its OOV row."""

    def __init__(self, field_dims: Sequence[int], dim: int, rng: np.random.Generator,
                 dtype=np.float32, std: float = 0.05):
        self.field_dims = [int(n) for n in field_dims]
        if any(n < 1 for n in self.field_dims):
            raise ValueError("every field needs at least its OOV row")
        self.dim = int(dim)
        self.offsets = np.concatenate([[0], np.cumsum(self.field_dims)[:-1]]).astype(np.int64)
        w = rng.normal(0.0, std, size=(sum(self.field_dims), self.dim)).astype(dtype)
        self.weight = Param("embedding", w)

    @property
    def n_fields(self) -> int:
        return len(self.field_dims)

    def rows(self, records: np.ndarray) -> np.ndarray:
        records = np.asarray(records)
        if records.ndim != 2 or records.shape[1] != self.n_fields:
            raise DimensionError(f"expected records of width {self.n_fields}, got shape {records.shape}")
        bad = (records < 0) | (records >= np.asarray(self.field_dims))
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise IndexError(f"record {r}: index {records[r, c]} outside vocab of field {c}")
        return records + self.offsets

    def lookup(self, records: np.ndarray) -> np.ndarray:
        """(B, m) field indices -> rows-first X^0 of shape (m, B, D)."""
        return self.weight.value[self.rows(records).T]

    def accumulate_grad(self, rows: np.ndarray, dX0: np.ndarray) -> None:
        """Scatter-add rows-first (m, B, D) gradients into the table."""
        flat = rows.T.reshape(-1)
        g = dX0.reshape(-1, self.dim)
        n = self.weight.value.shape[0]
        for d in range(self.dim):
            self.weight.grad[:, d] += np.bincount(flat, weights=g[:, d], minlength=n).astype(self.weight.grad.dtype)


def embed_lookup(table: EmbeddingTable, record) -> np.ndarray:
    """Single record of m field indices -> X^0 with shape (m, D)."""
    record = np.asarray(record)
    if record.ndim != 1:
        raise DimensionError("embed_lookup takes one record; use EmbeddingTable.lookup for batches")
    return table.weight.value[table.rows(record[None, :])[0]]


def pairwise_multiply(X: np.ndarray, X0: np.ndarray) -> np.ndarray:
    """Concatenate X with every Hadamard product X[i] * X0[j].

    Rows lead: (H, ..., D) and (m, ..., D) -> (H*(1+m), ..., D). The H originals
    come first, then the products with i outer and j inner.
    """
    if X.shape[1:] != X0.shape[1:]:
        raise DimensionError(f"pairwise_multiply column mismatch: {X.shape} vs {X0.shape}")
    H, m = X.shape[0], X0.shape[0]
    prod = X[:, None] * X0[None, :]
    return np.concatenate([X, prod.reshape((H * m,) + X.shape[1:])], axis=0)


def _row_polys(C: np.ndarray, basis: BSplineBasis) -> np.ndarray:
    """Q[h, c, p]: power coefficients of row h's spline on cell c."""
    P = basis.piece_table.astype(C.dtype)
    g, K = basis.grid, basis.order + 1
    Q = np.zeros((C.shape[0], g, K), dtype=C.dtype)
    for r in range(K):
        Q += C[:, r:r + g, None] * P[None, :, r, :]
    return Q


@dataclass
class _SplineEval:
    flat: np.ndarray
    u: np.ndarray
    inside: np.ndarray
    slope: Optional[np.ndarray]


def _spline_forward(C: np.ndarray, basis: BSplineBasis, X: np.ndarray, with_slope: bool = False):
    """Row-wise spline image of X (rows first) and, optionally, its derivative."""
    H = X.shape[0]
    K = basis.order + 1
    cell, u, inside = basis.cells(X)
    flat = np.arange(H).reshape((H,) + (1,) * (X.ndim - 1)) * basis.grid + cell
    # one contiguous coefficient table per power of u
    Qt = np.ascontiguousarray(_row_polys(C, basis).reshape(-1, K).T)
    q = [np.take(Qt[p], flat) for p in range(K)]
    val = q[K - 1]
    for p in range(K - 2, -1, -1):
        val = val * u
        val += q[p]
    val *= inside
    slope = None
    if with_slope:
        d = (K - 1) * q[K - 1]
        for p in range(K - 2, 0, -1):
            d *= u
            d += p * q[p]
        d *= inside * X.dtype.type(1.0 / basis.spacing)
        slope = d
    return val, _SplineEval(flat, u, inside, slope)


def _spline_coeff_grad(dval: np.ndarray, ev: _SplineEval, basis: BSplineBasis, n_rows: int) -> np.ndarray:
    g, K = basis.grid, basis.order + 1
    w = np.where(ev.inside, dval, 0).reshape(-1).astype(np.float64)
    flat = ev.flat.reshape(-1)
    u = ev.u.reshape(-1)
    dQ = np.empty((n_rows, g, K))
    for p in range(K):
        dQ[:, :, p] = np.bincount(flat, weights=w, minlength=n_rows * g).reshape(n_rows, g)
        if p < K - 1:
            w = w * u
    P = basis.piece_table
    dC = np.zeros((n_rows, basis.n_basis))
    for r in range(K):
        dC[:, r:r + g] += np.einsum("hcp,cp->hc", dQ, P[:, r, :])
    return dC


def activation_transform(X: np.ndarray, C: np.ndarray, basis: BSplineBasis) -> np.ndarray:
    """X_b[h, ...] = sum_i N_i(X[h, ...]) * C[h, i]: one spline per row, shared across columns."""
    if C.shape != (X.shape[0], basis.n_basis):
        raise DimensionError(f"coefficients {C.shape} do not match rows {X.shape[0]} x {basis.n_basis}")
    return _spline_forward(C, basis, X)[0]


@dataclass
class _LayerCache:
    X: np.ndarray
    X0: Optional[np.ndarray]
    Xe: np.ndarray
    spline: _SplineEval
    Xb: np.ndarray
    sig: np.ndarray
    S: np.ndarray


class KarseinLayer:
    """Optional pairwise multiplication -> per-row spline -> W_b X_b + W_s SiLU(X).

    Inputs are rows-first: (H, ..., D), with any batch axes in the middle.
    """

    def __init__(self, in_rows: int, out_rows: int, n_fields: int, pairwise: bool,
                 basis: BSplineBasis, rng: np.random.Generator, name: str, dtype=np.float32):
        self.in_rows = int(in_rows)
        self.out_rows = int(out_rows)
        self.n_fields = int(n_fields)
        self.pairwise = bool(pairwise)
        self.basis = basis
        self.name = name
        e = self.eff_in
        nb = basis.n_basis
        self.C = Param(f"{name}.C", rng.normal(0.0, 0.1 / np.sqrt(nb), size=(e, nb)).astype(dtype))
        bound = np.sqrt(6.0 / (e + self.out_rows))
        self.W_b = Param(f"{name}.W_b", rng.uniform(-bound, bound, size=(self.out_rows, e)).astype(dtype))
        self.W_s = Param(f"{name}.W_s", rng.uniform(-bound, bound, size=(self.out_rows, e)).astype(dtype))
        self.mask = np.ones(e, dtype=bool)

    @property
    def eff_in(self) -> int:
        return self.in_rows * (1 + self.n_fields) if self.pairwise else self.in_rows

    def params(self) -> list[Param]:
        return [self.C, self.W_b, self.W_s]

    def forward(self, X: np.ndarray, X0: Optional[np.ndarray] = None, keep: bool = True):
        if X.shape[0] != self.in_rows:
            raise DimensionError(f"layer {self.name}: expected {self.in_rows} input rows, got {X.shape[0]}")
        if self.pairwise:
            if X0 is None:
                raise DimensionError(f"layer {self.name}: pairwise multiplication needs X^0")
            if X0.shape[0] != self.n_fields:
                raise DimensionError(f"layer {self.name}: X^0 has {X0.shape[0]} rows, expected {self.n_fields}")
            Xe = pairwise_multiply(X, X0)
        else:
            Xe = X
        Xb, ev = _spline_forward(self.C.value, self.basis, Xe, with_slope=keep)
        sig = sigmoid(Xe)
        S = Xe * sig
        E = self.eff_in
        Y = self.W_b.value @ Xb.reshape(E, -1) + self.W_s.value @ S.reshape(E, -1)
        Y = Y.reshape((self.out_rows,) + Xe.shape[1:])
        cache = _LayerCache(X, X0, Xe, ev, Xb, sig, S) if keep else None
        return Y, cache

    def backward(self, dY: np.ndarray, cache: _LayerCache):
        """Accumulate parameter grads; return (dX, dX0 or None)."""
        E = self.eff_in
        dY2 = dY.reshape(self.out_rows, -1)
        self.W_b.grad += (dY2 @ cache.Xb.reshape(E, -1).T).astype(self.W_b.grad.dtype, copy=False)
        self.W_s.grad += (dY2 @ cache.S.reshape(E, -1).T).astype(self.W_s.grad.dtype, copy=False)
        dXb = (self.W_b.value.T @ dY2).reshape(cache.Xe.shape)
        dS = (self.W_s.value.T @ dY2).reshape(cache.Xe.shape)
        self.C.grad += _spline_coeff_grad(dXb, cache.spline, self.basis, E).astype(self.C.grad.dtype)
        sig = cache.sig
        dXe = dXb * cache.spline.slope + dS * (sig * (1 + cache.Xe * (1 - sig)))

        if not self.mask.all():
            off = ~self.mask
            self.W_b.grad[:, off] = 0
            self.W_s.grad[:, off] = 0
            self.C.grad[off] = 0

        if not self.pairwise:
            return dXe, None
        H, m = self.in_rows, self.n_fields
        dP = dXe[H:].reshape((H, m) + dXe.shape[1:])
        dX = dXe[:H] + (dP * cache.X0[None]).sum(axis=1)
        dX0 = (dP * cache.X[:, None]).sum(axis=0)
        return dX, dX0

    def apply_mask(self, mask: np.ndarray) -> None:
        """Freeze the masked-out input rows at zero."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.eff_in,):
            raise DimensionError(f"layer {self.name}: mask shape {mask.shape} != ({self.eff_in},)")
        if not mask.any():
            raise ValueError(f"layer {self.name}: masking every input row")
        self.mask = mask.copy()
        self.W_b.value[:, ~mask] = 0
        self.W_s.value[:, ~mask] = 0
        self.C.value[~mask] = 0


def layer_forward(layer: KarseinLayer, X: np.ndarray, X0: Optional[np.ndarray] = None) -> np.ndarray:
    return layer.forward(X, X0, keep=False)[0]


@dataclass
class ModelConfig:
    field_dims: list
    dim: int = 16
    explicit_hidden: list = field(default_factory=lambda: [8, 8])
    implicit_hidden: list = field(default_factory=lambda: [32, 32])
    order: int = 3
    grid: int = 10
    pairwise_layers: list = field(default_factory=lambda: [1, 2])
    head_mode: str = "mean"
    towers: list = field(default_factory=lambda: ["explicit", "implicit"])
    seed: int = 0
    embedding_std: float = 0.05

    def validate(self) -> None:
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if not self.towers or any(t not in ("explicit", "implicit") for t in self.towers):
            raise ValueError(f"towers must be a nonempty subset of explicit/implicit, got {self.towers}")
        if self.dim < 1 or any(h < 1 for h in list(self.explicit_hidden) + list(self.implicit_hidden)):
            raise ValueError("dimensions must be positive")
        if any(p < 1 for p in self.pairwise_layers):
            raise ValueError("pairwise layer indices are 1-based")


@dataclass
class ForwardCache:
    rows: np.ndarray
    X0: np.ndarray
    explicit: list
    implicit: list
    XT: Optional[np.ndarray]
    eT: Optional[np.ndarray]
    a: Optional[np.ndarray]
    b: Optional[np.ndarray]
    yhat: np.ndarray


class KarseinModel:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        self.basis = make_uniform_knots(config.grid, config.order)
        self.embedding = EmbeddingTable(config.field_dims, config.dim, rng, self.dtype, config.embedding_std)
        m, D = self.embedding.n_fields, config.dim
        self.explicit: list[KarseinLayer] = []
        self.implicit: list[KarseinLayer] = []
        if "explicit" in config.towers:
            widths = [m] + list(config.explicit_hidden) + [1]
            for i, (h_in, h_out) in enumerate(zip(widths, widths[1:])):
                self.explicit.append(KarseinLayer(h_in, h_out, m, (i + 1) in config.pairwise_layers,
                                                  self.basis, rng, f"explicit.{i}", self.dtype))
        if "implicit" in config.towers:
            widths = [m * D] + list(config.implicit_hidden) + [1]
            for i, (h_in, h_out) in enumerate(zip(widths, widths[1:])):
                self.implicit.append(KarseinLayer(h_in, h_out, m, False, self.basis, rng,
                                                  f"implicit.{i}", self.dtype))
        bound = np.sqrt(6.0 / (D + 1))
        self.W_o = Param("W_o", rng.uniform(-bound, bound, size=(D,)).astype(self.dtype))

    @property
    def layers(self) -> list[KarseinLayer]:
        return self.explicit + self.implicit

    def params(self) -> list[Param]:
        out = [self.embedding.weight]
        for layer in self.layers:
            out.extend(layer.params())
        if self.explicit:
            out.append(self.W_o)
        return out

    def n_params(self, include_embedding: bool = False) -> int:
        return sum(p.value.size for p in self.params() if include_embedding or p.name != "embedding")

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def reg_params(self) -> list[Param]:
        """Matrices carrying the L1 and entropy penalties: every layer's W_b and W_s."""
        return [P for layer in self.layers for P in (layer.W_b, layer.W_s)]

    def mask_grads(self) -> None:
        """Keep masked input rows frozen at zero."""
        for layer in self.layers:
            if not layer.mask.all():
                layer.W_b.grad[:, ~layer.mask] = 0
                layer.W_s.grad[:, ~layer.mask] = 0
                layer.C.grad[~layer.mask] = 0

    def forward_explicit(self, X0: np.ndarray, keep: bool = False):
        """X^0 (m, ..., D) -> X^T (1, ..., D)."""
        if not self.explicit:
            raise ValueError("model has no explicit tower")
        X = X0
        caches = []
        for layer in self.explicit:
            X, c = layer.forward(X, X0, keep)
            caches.append(c)
        return X, caches

    def forward_implicit(self, X0: np.ndarray, keep: bool = False):
        """X^0 (m, ..., D) -> e^T (1, ..., 1); the input is X^0 flattened row-major per record."""
        if not self.implicit:
            raise ValueError("model has no implicit tower")
        m, D = X0.shape[0], X0.shape[-1]
        mid = X0.shape[1:-1]
        e = np.moveaxis(X0, -1, 1).reshape((m * D,) + mid + (1,))
        caches = []
        for layer in self.implicit:
            e, c = layer.forward(e, None, keep)
            caches.append(c)
        return e, caches

    def forward(self, records: np.ndarray, keep: bool = False) -> ForwardCache:
        rows = self.embedding.rows(records)
        X0 = self.embedding.weight.value[rows.T]
        XT = eT = a = b = None
        ce = ci = []
        probs = []
        if self.explicit:
            XT, ce = self.forward_explicit(X0, keep)
            a = XT[0] @ self.W_o.value
            probs.append(sigmoid(a))
        if self.implicit:
            eT, ci = self.forward_implicit(X0, keep)
            b = eT[0, :, 0]
            probs.append(sigmoid(b))
        for name, z in (("explicit", a), ("implicit", b)):
            if z is not None and not np.all(np.isfinite(z)):
                r = int(np.flatnonzero(~np.isfinite(z))[0])
                raise NonFiniteError(f"non-finite {name} logit at record {r}")
        if len(probs) == 1:
            yhat = probs[0]
        elif self.config.head_mode == "mean":
            yhat = 0.5 * (probs[0] + probs[1])
        else:
            yhat = np.minimum(probs[0] + probs[1], SUM_CEIL).astype(probs[0].dtype)
        return ForwardCache(rows, X0, ce, ci, XT, eT, a, b, yhat)

    def predict(self, records: np.ndarray, batch_size: int = 8192) -> np.ndarray:
        records = np.asarray(records)
        out = [self.forward(records[i:i + batch_size]).yhat for i in range(0, len(records), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)

    def backward(self, cache: ForwardCache, dyhat: np.ndarray) -> None:
        """Accumulate grads of sum_k dyhat[k] * yhat[k] into every parameter."""
        both = bool(self.explicit) and bool(self.implicit)
        g = dyhat
        if both and self.config.head_mode == "mean":
            g = 0.5 * dyhat
        elif both:
            s = sigmoid(cache.a) + sigmoid(cache.b)
            g = dyhat * (s < SUM_CEIL)
        dX0 = np.zeros_like(cache.X0)
        if self.explicit:
            sa = sigmoid(cache.a)
            da = (g * sa * (1.0 - sa)).astype(self.dtype)
            self.W_o.grad += da @ cache.XT[0]
            dX = (da[:, None] * self.W_o.value[None, :])[None]
            for layer, c in zip(reversed(self.explicit), reversed(cache.explicit)):
                dX, d0 = layer.backward(dX, c)
                if d0 is not None:
                    dX0 += d0
            dX0 += dX
        if self.implicit:
            sb = sigmoid(cache.b)
            de = (g * sb * (1.0 - sb)).astype(self.dtype)[None, :, None]
            for layer, c in zip(reversed(self.implicit), reversed(cache.implicit)):
                de, _ = layer.backward(de, c)
            m, B, D = cache.X0.shape
            dX0 += de.reshape(m, D, B).transpose(0, 2, 1)
        self.embedding.accumulate_grad(cache.rows, dX0)

    # -- persistence -------------------------------------------------------

    def masks(self) -> dict:
        return {layer.name: layer.mask.tolist() for layer in self.layers if not layer.mask.all()}

    def copy(self) -> "KarseinModel":
        other = KarseinModel(self.config, self.dtype)
        for dst, src in zip(other.params(), self.params()):
            dst.value[...] = src.value
        for dst, src in zip(other.layers, self.layers):
            dst.mask = src.mask.copy()
        return other

    def state(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params()]

    def load_state(self, state: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.params(), state):
            p.value[...] = v


def save_checkpoint(model: KarseinModel, path, extra: Optional[dict] = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32 blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = model.params()
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model": asdict(model.config),
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
        "masks": model.masks(),
        "blob": path.with_suffix(".bin").name,
        "dtype": "<f4",
    }
    if extra:
        manifest.update(extra)
    blob = b"".join(np.ascontiguousarray(p.value, dtype="<f4").tobytes() for p in params)
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    return path.with_suffix(".json")


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, dtype=np.float32) -> tuple[KarseinModel, dict]:
    path = Path(path)
    mpath = path if path.suffix == ".json" else path.with_suffix(".json")
    try:
        manifest = json.loads(mpath.read_text())
        if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
        model = KarseinModel(ModelConfig(**manifest["model"]), dtype)
        blob = (mpath.parent / manifest["blob"]).read_bytes()
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {mpath}: {exc}") from exc
    params = model.params()
    declared = manifest["params"]
    if [d["name"] for d in declared] != [p.name for p in params]:
        raise CheckpointError("checkpoint parameter list does not match the model layout")
    flat = np.frombuffer(blob, dtype="<f4")
    total = sum(int(np.prod(d["shape"])) for d in declared)
    if flat.size != total:
        raise CheckpointError(f"blob holds {flat.size} floats, manifest declares {total}")
    pos = 0
    for p, d in zip(params, declared):
        if list(p.value.shape) != d["shape"]:
            raise CheckpointError(f"{p.name}: shape {d['shape']} != model {list(p.value.shape)}")
        n = p.value.size
        p.value[...] = flat[pos:pos + n].reshape(p.value.shape)
        pos += n
    for layer in model.layers:
        if layer.name in manifest.get("masks", {}):
            layer.mask = np.asarray(manifest["masks"][layer.name], dtype=bool)
    return model, manifest
