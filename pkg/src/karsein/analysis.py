"""Post-hoc inspection of trained KarSein models.

Connection maps and redundancy, masked fine-tuning, sampled activation curves,
and cubic fits of those curves. Files are plain CSV, JSON and standalone SVG.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .model import KarseinLayer, KarseinModel
from .training import TrainConfig, evaluate, train

REDUNDANCY_THRESHOLD = 0.01
CUBIC_R2_GOOD = 0.9


@dataclass
class ConnectionMap:
    """S[out, in] = |W_b[out, in]| + |W_s[out, in]| for one layer."""

    layer: str
    S: np.ndarray


def connection_map(model: KarseinModel) -> list[ConnectionMap]:
    return [ConnectionMap(L.name, np.abs(L.W_b.value.astype(np.float64)) + np.abs(L.W_s.value.astype(np.float64)))
            for L in model.layers]


def write_map_csv(cmap: ConnectionMap, path) -> Path:
    """One row per output, one column per input; floats in repr form so reads are exact."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["out"] + [f"in{j}" for j in range(cmap.S.shape[1])])
        for i, row in enumerate(cmap.S):
            w.writerow([i] + [repr(float(v)) for v in row])
    return path


def read_map_csv(path, layer: str = "") -> ConnectionMap:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    S = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return ConnectionMap(layer or Path(path).stem, S.reshape(len(rows) - 1, len(rows[0]) - 1))


def _color(v: float) -> str:
    # white -> dark blue
    t = min(max(v, 0.0), 1.0)
    r = int(round(255 - 225 * t))
    g = int(round(255 - 185 * t))
    b = int(round(255 - 75 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(maps: Sequence[ConnectionMap], path, cell: int = 10) -> Path:
    """All layers side by side, inputs down the rows and outputs across; each panel scaled to its own max."""
    pad, label_h = 20, 16
    x = pad
    parts = []
    height = 0
    for cmap in maps:
        S = cmap.S.T  # rows = inputs
        n_in, n_out = S.shape
        top = pad + label_h
        parts.append(f'<text x="{x}" y="{pad + 10}" font-size="11" font-family="sans-serif">'
                     f'{_escape(cmap.layer)}</text>')
        vmax = float(S.max()) if S.size and S.max() > 0 else 1.0
        for i in range(n_in):
            for j in range(n_out):
                parts.append(f'<rect x="{x + j * cell}" y="{top + i * cell}" width="{cell}" '
                             f'height="{cell}" fill="{_color(S[i, j] / vmax)}"/>')
        parts.append(f'<rect x="{x}" y="{top}" width="{n_out * cell}" height="{n_in * cell}" '
                     'fill="none" stroke="#444" stroke-width="0.5"/>')
        x += max(n_out * cell, 60) + pad
        height = max(height, top + n_in * cell + pad)
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{x}" height="{height}" '
           f'viewBox="0 0 {x} {height}">\n' + "\n".join(parts) + "\n</svg>\n")
    path = Path(path)
    path.write_text(svg)
    return path


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


@dataclass
class RedundancyReport:
    threshold: float
    layers: list = field(default_factory=list)  # [{"layer", "redundant", "eff_in", "ratio"}]

    @property
    def empty(self) -> bool:
        return not any(entry["redundant"] for entry in self.layers)

    def to_dict(self) -> dict:
        return asdict(self)


def find_redundant(maps: Sequence[ConnectionMap], threshold: float = REDUNDANCY_THRESHOLD) -> RedundancyReport:
    """Input row h of a layer is redundant iff every output's strength from it is <= threshold."""
    report = RedundancyReport(float(threshold))
    for cmap in maps:
        n_in = cmap.S.shape[1]
        strongest = cmap.S.max(axis=0) if cmap.S.shape[0] else np.zeros(n_in)
        red = np.flatnonzero(strongest <= threshold)
        report.layers.append({"layer": cmap.layer, "redundant": red.tolist(), "eff_in": int(n_in),
                              "ratio": float(red.size / n_in) if n_in else 0.0})
    return report


def mask_and_finetune(model: KarseinModel, report: RedundancyReport, dataset, epochs: int = 3,
                      config: Optional[TrainConfig] = None, out_dir=None):
    """Mask the redundant rows on a copy of ``model``, fine-tune it, and compare test AUC.

    Returns ``(new_model, summary)``. The original model is left untouched.
    """
    config = config or TrainConfig()
    new = model.copy()
    R, Y = dataset.records, dataset.labels
    before_auc, before_ll = evaluate(model, R[dataset.test], Y[dataset.test])
    by_name = {L.name: L for L in new.layers}
    n_masked = 0
    for entry in report.layers:
        if not entry["redundant"]:
            continue
        layer: KarseinLayer = by_name[entry["layer"]]
        mask = layer.mask.copy()
        mask[entry["redundant"]] = False
        layer.apply_mask(mask)
        n_masked += len(entry["redundant"])
    summary = {"threshold": report.threshold, "masked_rows": n_masked, "epochs": 0,
               "before_auc": before_auc, "before_logloss": before_ll}
    if n_masked == 0:
        summary.update(after_auc=before_auc, after_logloss=before_ll, masked_auc=before_auc, delta_auc=0.0)
        return new, summary
    summary["masked_auc"] = evaluate(new, R[dataset.test], Y[dataset.test])[0]
    ft = TrainConfig(**{**asdict(config), "max_epochs": epochs, "early_stop_patience": max(epochs, 1)})
    rep = train(new, dataset, ft, out_dir=out_dir, evaluate_test=True)
    summary.update(epochs=len(rep.epochs), after_auc=rep.test_auc, after_logloss=rep.test_logloss,
                   delta_auc=rep.test_auc - before_auc, best_epoch=rep.best_epoch)
    return new, summary


def _layer(model: KarseinModel, layer: Union[int, str]) -> KarseinLayer:
    layers = model.layers
    if isinstance(layer, str):
        for L in layers:
            if L.name == layer:
                return L
        raise IndexError(f"no layer named {layer!r}")
    if not 0 <= layer < len(layers):
        raise IndexError(f"layer index {layer} outside 0..{len(layers) - 1}")
    return layers[layer]


def sample_activation(model: KarseinModel, layer: Union[int, str], input_row: int, xs) -> np.ndarray:
    """Spline part of one input row's activation, sum_i N_i(x) C[row, i], at each x."""
    L = _layer(model, layer)
    if not 0 <= input_row < L.eff_in:
        raise IndexError(f"row {input_row} outside 0..{L.eff_in - 1} of layer {L.name}")
    xs = np.asarray(xs, dtype=np.float64)
    return model.basis.eval(xs) @ L.C.value[input_row].astype(np.float64)


def write_curve_csv(xs, ys, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in zip(xs, ys):
            w.writerow([repr(float(x)), repr(float(y))])
    return path


def curve_svg(xs, ys, path, width: int = 240, height: int = 160, title: str = "") -> Path:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    pad = 12
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 1.0, y1 + 1.0
    sx = (width - 2 * pad) / (x1 - x0 if x1 > x0 else 1.0)
    sy = (height - 2 * pad) / (y1 - y0)
    pts = " ".join(f"{pad + (x - x0) * sx:.2f},{height - pad - (y - y0) * sy:.2f}" for x, y in zip(xs, ys))
    zero = ""
    if y0 <= 0 <= y1:
        zy = height - pad - (0 - y0) * sy
        zero = f'<line x1="{pad}" y1="{zy:.2f}" x2="{width - pad}" y2="{zy:.2f}" stroke="#bbb" stroke-width="0.5"/>\n'
    label = f'<text x="{pad}" y="10" font-size="9" font-family="sans-serif">{_escape(title)}</text>\n' if title else ""
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">\n{label}{zero}'
           f'<polyline fill="none" stroke="#1f4e9c" stroke-width="1.2" points="{pts}"/>\n</svg>\n')
    path = Path(path)
    path.write_text(svg)
    return path


@dataclass
class CubicFit:
    coeffs: list  # a0..a3, y ~ a0 + a1 x + a2 x^2 + a3 x^3
    r2: float
    domain: tuple

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=np.float64), self.coeffs)


def fit_cubic(xs, ys) -> CubicFit:
    """Least-squares cubic through (xs, ys); a flat ys scores 1 if fitted exactly, else 0."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.shape != ys.shape:
        raise ValueError(f"xs and ys differ in length: {xs.size} vs {ys.size}")
    if xs.size < 8:
        raise ValueError(f"fit_cubic needs at least 8 samples, got {xs.size}")
    if np.unique(xs).size < 4:
        raise ValueError("fit_cubic needs at least 4 distinct x values")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("fit_cubic got non-finite samples")
    V = np.vander(xs, 4, increasing=True)
    centered = ys - ys.mean()
    ss_tot = float(centered @ centered)
    if ss_tot == 0.0:
        # a constant is itself a cubic; lstsq would leave roundoff residue here
        coeffs = np.array([ys[0], 0.0, 0.0, 0.0])
    else:
        coeffs, *_ = np.linalg.lstsq(V, ys, rcond=None)
    resid = ys - V @ coeffs
    ss_res = float(resid @ resid)
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return CubicFit([float(c) for c in coeffs], float(r2), (float(xs.min()), float(xs.max())))


def observed_ranges(model: KarseinModel, records, lo_pct: float = 1.0, hi_pct: float = 99.0) -> dict:
    """Per explicit-layer input row, the (lo_pct, hi_pct) percentile range of values it sees on ``records``."""
    cache = model.forward(np.asarray(records), keep=True)
    out = {}
    for L, c in zip(model.explicit, cache.explicit):
        flat = c.Xe.reshape(L.eff_in, -1).astype(np.float64)
        lo = np.clip(np.percentile(flat, lo_pct, axis=1), model.basis.lo, model.basis.hi)
        hi = np.clip(np.percentile(flat, hi_pct, axis=1), model.basis.lo, model.basis.hi)
        out[L.name] = np.stack([lo, hi], axis=1)
    return out


def explain(model: KarseinModel, out_dir, threshold: float = REDUNDANCY_THRESHOLD,
            n_points: int = 201, records=None) -> dict:
    """Write heat maps, redundancy, explicit-tower activation curves and cubic fits under ``out_dir``.

    Curves are sampled on the whole spline domain. With ``records`` the cubic
    fits are also repeated over each row's observed input range.
    """
    out = Path(out_dir)
    (out / "connections").mkdir(parents=True, exist_ok=True)
    (out / "activations").mkdir(parents=True, exist_ok=True)
    maps = connection_map(model)
    for cmap in maps:
        write_map_csv(cmap, out / "connections" / f"{cmap.layer}.csv")
    heatmap_svg(maps, out / "connections" / "heatmap.svg")
    report = find_redundant(maps, threshold)
    (out / "redundancy.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")

    xs = np.linspace(model.basis.lo, model.basis.hi, n_points)
    ranges = observed_ranges(model, records) if records is not None else None
    fits = []
    for L in model.explicit:
        for row in range(L.eff_in):
            ys = sample_activation(model, L.name, row, xs)
            stem = f"{L.name}.row{row}"
            write_curve_csv(xs, ys, out / "activations" / f"{stem}.csv")
            curve_svg(xs, ys, out / "activations" / f"{stem}.svg", title=stem)
            fit = fit_cubic(xs, ys)
            entry = {"layer": L.name, "row": row, "masked": not bool(L.mask[row]),
                     "coeffs": fit.coeffs, "r2": fit.r2}
            if ranges is not None:
                lo, hi = ranges[L.name][row]
                if hi > lo:
                    xo = np.linspace(lo, hi, n_points)
                    entry["observed_range"] = [float(lo), float(hi)]
                    entry["observed_r2"] = fit_cubic(xo, sample_activation(model, L.name, row, xo)).r2
            fits.append(entry)
    good = sum(f["r2"] >= CUBIC_R2_GOOD for f in fits)
    observed = [f["observed_r2"] for f in fits if "observed_r2" in f]
    summary = {
        "threshold": threshold,
        "redundancy": {e["layer"]: e["ratio"] for e in report.layers},
        "n_activations": len(fits),
        "cubic_r2_threshold": CUBIC_R2_GOOD,
        "cubic_good_fraction": good / len(fits) if fits else 0.0,
        "cubic_good_fraction_observed": (sum(r >= CUBIC_R2_GOOD for r in observed) / len(observed)
                                         if observed else None),
        "fits": fits,
    }
    (out / "cubic_fits.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
