"""Clamped uniform B-spline bases and the KAN edge activation.

Evaluation works on the ``order + 1`` basis functions that are nonzero at a
point (the span-local form); the dense helpers scatter that into a full
``n_basis`` vector. Inputs outside ``[lo, hi]`` get an all-zero basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numeric import silu


class SplineConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BSplineBasis:
    order: int
    grid: int
    lo: float
    hi: float
    knots: np.ndarray

    @property
    def n_basis(self) -> int:
        return self.grid + self.order

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / self.grid

    def span(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Knot-span index of each x plus an in-domain mask.

        The span is ``s`` with ``t[s] <= x < t[s+1]``; ``x == hi`` belongs to the
        last nonempty span so the right end stays covered.
        """
        cell, _, inside = self.cells(x)
        return cell + self.order, inside

    def local(self, x, with_grad: bool = False):
        """Nonzero basis values at each x.

        Returns ``(start, vals[, dvals])`` where ``vals[..., r]`` is
        ``N_{start + r}(x)`` for ``r = 0..order`` and ``start = span - order``.
        Out-of-domain entries are zero.
        """
        x = np.asarray(x)
        dtype = np.result_type(x.dtype, np.float32)
        t = self.knots.astype(dtype)
        k = self.order
        s, inside = self.span(x)
        vals = [np.ones(x.shape, dtype=dtype)]
        lower = None
        # de Boor's triangular recurrence over the active span
        for j in range(1, k + 1):
            if j == k:
                lower = vals
            left = [x - t[s + 1 - r] for r in range(1, j + 1)]
            right = [t[s + r] - x for r in range(1, j + 1)]
            nxt = []
            saved = np.zeros(x.shape, dtype=dtype)
            for r in range(j):
                temp = vals[r] / (right[r] + left[j - r - 1])
                nxt.append(saved + right[r] * temp)
                saved = left[j - r - 1] * temp
            nxt.append(saved)
            vals = nxt
        out = np.where(inside[..., None], np.stack(vals, axis=-1), 0).astype(dtype, copy=False)
        start = s - k
        if not with_grad:
            return start, out
        # dN_{i,k} = k * (N_{i,k-1}/(t_{i+k}-t_i) - N_{i+1,k-1}/(t_{i+k+1}-t_{i+1}))
        d = []
        for r in range(k + 1):
            i = start + r
            term = np.zeros(x.shape, dtype=dtype)
            if r >= 1:
                term = term + lower[r - 1] / (t[i + k] - t[i])
            if r <= k - 1:
                term = term - lower[r] / (t[i + k + 1] - t[i + 1])
            d.append(k * term)
        dout = np.where(inside[..., None], np.stack(d, axis=-1), 0).astype(dtype, copy=False)
        return start, out, dout

    def eval(self, x) -> np.ndarray:
        """Dense basis, shape ``x.shape + (n_basis,)``."""
        x = np.asarray(x)
        start, vals = self.local(x)
        return self._scatter(start, vals)

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x)
        start, _, dvals = self.local(x, with_grad=True)
        return self._scatter(start, dvals)

    def _scatter(self, start, vals):
        out = np.zeros(vals.shape[:-1] + (self.n_basis,), dtype=vals.dtype)
        idx = start[..., None] + np.arange(self.order + 1)
        np.put_along_axis(out, idx, vals, axis=-1)
        return out

    def cells(self, x):
        """Cell index, local coordinate u in [0, 1], and in-domain mask for each x."""
        x = np.asarray(x)
        dtype = np.result_type(x.dtype, np.float32)
        inside = (x >= self.lo) & (x <= self.hi)
        pos = (x - self.lo) * dtype.type(1.0 / self.spacing)
        cell = np.clip(np.nan_to_num(np.floor(pos)), 0, self.grid - 1).astype(np.int64)
        u = (pos - cell).astype(dtype, copy=False)
        return cell, u, inside

    @cached_property
    def piece_table(self) -> np.ndarray:
        """Per-cell power coefficients of the active basis functions.

        ``table[c, r, p]`` is the coefficient of ``u**p`` in ``N_{c + r}`` on
        cell ``c``, where ``u`` is the local coordinate. Recovered from the
        recurrence by exact interpolation at ``order + 1`` points per cell.
        """
        k = self.order
        us = (np.arange(k + 1) + 0.5) / (k + 1)
        V = np.vander(us, k + 1, increasing=True)
        table = np.empty((self.grid, k + 1, k + 1))
        for c in range(self.grid):
            xs = self.knots[k + c] + us * self.spacing
            start, vals = self.local(xs)
            assert np.all(start == c)
            table[c] = np.linalg.solve(V, vals).T
        table.setflags(write=False)
        return table

    def to_dict(self) -> dict:
        return {"order": self.order, "grid": self.grid, "lo": self.lo, "hi": self.hi}


def make_uniform_knots(grid: int, order: int, lo: float = -1.0, hi: float = 1.0) -> BSplineBasis:
    """Clamped knot vector: ``grid + 1`` equispaced breakpoints, ends repeated ``order`` times."""
    if int(grid) != grid or grid < 1:
        raise SplineConfigError(f"grid size must be a positive integer, got {grid}")
    if int(order) != order or order < 1:
        raise SplineConfigError(f"spline order must be a positive integer, got {order}")
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise SplineConfigError(f"invalid spline domain [{lo}, {hi}]")
    inner = np.linspace(lo, hi, int(grid) + 1)
    knots = np.concatenate([np.full(int(order), lo), inner, np.full(int(order), hi)])
    knots.setflags(write=False)
    return BSplineBasis(int(order), int(grid), float(lo), float(hi), knots)


def basis_eval(basis: BSplineBasis, x) -> np.ndarray:
    return basis.eval(x)


def basis_grad(basis: BSplineBasis, x) -> np.ndarray:
    return basis.grad(x)


@dataclass
class EdgeActivation:
    """phi(x) = w_phi * (sum_i c_i N_i(x) + silu(x))."""

    w_phi: float
    coeffs: np.ndarray


def edge_activate(act: EdgeActivation, basis: BSplineBasis, x):
    coeffs = np.asarray(act.coeffs)
    if coeffs.shape != (basis.n_basis,):
        raise SplineConfigError(f"expected {basis.n_basis} coefficients, got {coeffs.shape}")
    return act.w_phi * (basis.eval(x) @ coeffs + silu(x))


def fit_coeffs(basis: BSplineBasis, xs, ys, residual_silu: bool = True) -> np.ndarray:
    """Least-squares spline coefficients so that ``B(x) (+ silu(x)) ~ ys`` on ``xs``."""
    xs = np.asarray(xs, dtype=np.float64)
    target = np.asarray(ys, dtype=np.float64) - (silu(xs) if residual_silu else 0.0)
    coeffs, *_ = np.linalg.lstsq(basis.eval(xs), target, rcond=None)
    return coeffs
