"""``karsein`` command line: train, evaluate, ablate, synthetic, explain, prune, gradcheck.

Settings come from a JSON config (``--config``) whose keys are the fields of
:class:`RunConfig`; ``--set key=value`` and the dedicated flags override it.
Every successful command prints a JSON summary and writes ``summary.json``
into ``--out`` when one is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis
from .data import SCHEMAS, DataError, EncodedDataset, encode, load_dataset, make_synthetic_ctr, \
    prepare_movielens_1m
from .model import CheckpointError, KarseinModel, ModelConfig, load_checkpoint, save_checkpoint
from .numeric import finite_diff_check
from .reference import KanCtrModel, MlpCtrModel, PruneError, kan_prune, run_synthetic_table
from .training import TrainConfig, backward, evaluate, total_loss, train

log = logging.getLogger("karsein")

GRADCHECK_TOL = 1e-4
MODEL_KINDS = ("karsein", "kan", "mlp")
SYNTHETIC_FIELDS = [60, 90, 3, 7, 21, 18]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data: Optional[str] = None
    schema: str = "movielens"
    split_seed: int = 0
    # model
    model: str = "karsein"
    dim: int = 16
    explicit_hidden: list = field(default_factory=lambda: [8, 8])
    implicit_hidden: list = field(default_factory=lambda: [32, 32])
    order: int = 3
    grid: int = 10
    pairwise_layers: list = field(default_factory=lambda: [1, 2])
    head_mode: str = "mean"
    towers: list = field(default_factory=lambda: ["explicit", "implicit"])
    embedding_std: float = 0.05
    # baselines (model = kan | mlp)
    baseline_hidden: list = field(default_factory=lambda: [64, 64])
    kan_grid: int = 3
    kan_order: int = 1
    kan_prune_threshold: float = 0.003
    # training
    lr: float = TrainConfig.lr
    batch_size: int = TrainConfig.batch_size
    max_epochs: int = TrainConfig.max_epochs
    early_stop_patience: int = TrainConfig.early_stop_patience
    l1: float = TrainConfig.l1
    l2: float = TrainConfig.l2
    seed: int = 0
    seeds: Optional[list] = None
    # analysis
    checkpoint: Optional[str] = None
    threshold: float = analysis.REDUNDANCY_THRESHOLD
    finetune_epochs: int = 3
    # synthetic study / gradcheck
    synthetic_max_steps: int = 5000
    precision: str = "double"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.schema not in SCHEMAS:
            raise ConfigError(f"schema must be one of {sorted(SCHEMAS)}, got {self.schema!r}")
        if self.precision not in ("double", "single"):
            raise ConfigError("precision must be 'double' or 'single'")
        if self.seeds is not None and (not isinstance(self.seeds, list) or not self.seeds
                                       or not all(isinstance(s, int) for s in self.seeds)):
            raise ConfigError("seeds must be a nonempty list of integers")
        if not 0 <= self.threshold:
            raise ConfigError("threshold must be >= 0")
        if self.finetune_epochs < 0 or self.synthetic_max_steps < 1:
            raise ConfigError("finetune_epochs must be >= 0 and synthetic_max_steps >= 1")
        try:
            self.train_config().validate()
            self.model_config([2, 2]).validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, field_dims, seed: Optional[int] = None, **over) -> ModelConfig:
        kw = dict(field_dims=list(field_dims), dim=self.dim, explicit_hidden=list(self.explicit_hidden),
                  implicit_hidden=list(self.implicit_hidden), order=self.order, grid=self.grid,
                  pairwise_layers=list(self.pairwise_layers), head_mode=self.head_mode,
                  towers=list(self.towers), seed=self.seed if seed is None else seed,
                  embedding_std=self.embedding_std)
        kw.update(over)
        return ModelConfig(**kw)

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           early_stop_patience=self.early_stop_patience, l1=self.l1, l2=self.l2,
                           seed=self.seed if seed is None else seed)

    def run_seeds(self) -> list:
        return list(self.seeds) if self.seeds else [self.seed]


# -- helpers ------------------------------------------------------------------

def open_dataset(cfg: RunConfig) -> EncodedDataset:
    """Load ``cfg.data``: a CSV, an encoded-dataset directory, a raw ML-1M directory, or ``synthetic[:N]``."""
    if not cfg.data:
        raise DataError("no dataset given (set 'data' in the config or pass --data)")
    source = str(cfg.data)
    if source.startswith("synthetic"):
        n = int(source.split(":", 1)[1]) if ":" in source else 20000
        schema, table = make_synthetic_ctr(n, SYNTHETIC_FIELDS, seed=cfg.split_seed)
        return encode(table, schema, cfg.split_seed)
    path = Path(source)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    if path.is_dir():
        if (path / "manifest.json").exists():
            return EncodedDataset.load(path)
        if (path / "ratings.dat").exists():
            with tempfile.TemporaryDirectory() as tmp:
                csv_path = prepare_movielens_1m(path, Path(tmp) / "ml1m.csv")
                return load_dataset(csv_path, SCHEMAS["movielens"], cfg.split_seed)
        raise DataError(f"{path} holds neither manifest.json nor ratings.dat")
    return load_dataset(path, SCHEMAS[cfg.schema], cfg.split_seed)


def data_manifest(cfg: RunConfig, ds: EncodedDataset) -> dict:
    return {"data": {"path": cfg.data, "schema": cfg.schema, "split_seed": cfg.split_seed,
                     "field_dims": ds.field_dims, "vocabs": [list(v.keys()) for v in ds.vocabs]}}


def prepare_out(out: Optional[str], force: bool, required: bool = True) -> Optional[Path]:
    if out is None:
        if required:
            raise ConfigError("--out is required for this command")
        return None
    p = Path(out)
    if p.exists() and (not p.is_dir() or any(p.iterdir())) and not force:
        raise ConfigError(f"output {p} already exists; pass --force to overwrite")
    return p


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def build_model(cfg: RunConfig, field_dims, seed: int, **over):
    if cfg.model == "karsein":
        return KarseinModel(cfg.model_config(field_dims, seed, **over))
    if cfg.model == "kan":
        return KanCtrModel(field_dims, cfg.dim, cfg.baseline_hidden, cfg.kan_grid, cfg.kan_order,
                           seed, cfg.embedding_std)
    return MlpCtrModel(field_dims, cfg.dim, cfg.baseline_hidden, seed=seed, embedding_std=cfg.embedding_std)


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


# -- commands -------------------------------------------------------------------

def cmd_train(cfg: RunConfig, out: Path) -> dict:
    ds = open_dataset(cfg)
    seeds = cfg.run_seeds()
    runs = []
    for seed in seeds:
        run_dir = out if len(seeds) == 1 else out / f"seed_{seed}"
        model = build_model(cfg, ds.field_dims, seed)
        t0 = time.perf_counter()
        rep = train(model, ds, cfg.train_config(seed), out_dir=run_dir)
        seconds = time.perf_counter() - t0
        result = {k: v for k, v in rep.to_dict().items() if k != "epochs"}
        result.update(seed=seed, model=cfg.model, n_epochs=len(rep.epochs))
        if isinstance(model, KarseinModel):
            result["checkpoint"] = str(save_checkpoint(model, run_dir / "best", data_manifest(cfg, ds)))
        if isinstance(model, KanCtrModel):
            try:
                _, prune_rep = kan_prune(model.net, cfg.kan_prune_threshold)
            except PruneError as exc:
                prune_rep = {"threshold": cfg.kan_prune_threshold, "error": str(exc)}
            result["kan_prune"] = prune_rep
        write_json(run_dir / "report.json", {**result, "epochs": rep.epochs, "seconds": seconds})
        print(f"seed {seed}: test AUC {rep.test_auc:.4f}  test LogLoss {rep.test_logloss:.4f}  "
              f"(best epoch {rep.best_epoch}, {rep.stopping_reason})")
        runs.append(result)
    return {
        "command": "train",
        "config": asdict(cfg),
        "runs": runs,
        "mean_test_auc": _mean([r["test_auc"] for r in runs]),
        "mean_test_logloss": _mean([r["test_logloss"] for r in runs]),
    }


def _load_ckpt(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("no checkpoint given (set 'checkpoint' or pass --checkpoint)")
    return load_checkpoint(cfg.checkpoint)


def _dataset_for_checkpoint(cfg: RunConfig, manifest: dict) -> EncodedDataset:
    info = manifest.get("data", {})
    if not cfg.data and info.get("path"):
        cfg.data = info["path"]
        cfg.schema = info.get("schema", cfg.schema)
        cfg.split_seed = info.get("split_seed", cfg.split_seed)
    ds = open_dataset(cfg)
    if "vocabs" in info and [list(v.keys()) for v in ds.vocabs] != info["vocabs"]:
        raise DataError("dataset vocabularies differ from the ones the checkpoint was trained on")
    return ds


def cmd_evaluate(cfg: RunConfig, out: Optional[Path]) -> dict:
    model, manifest = _load_ckpt(cfg)
    ds = _dataset_for_checkpoint(cfg, manifest)
    res = {"command": "evaluate", "checkpoint": cfg.checkpoint}
    for split in ("val", "test"):
        idx = ds.split(split)
        res[f"{split}_auc"], res[f"{split}_logloss"] = evaluate(model, ds.records[idx], ds.labels[idx])
    print(f"test AUC {res['test_auc']:.4f}  test LogLoss {res['test_logloss']:.4f}")
    return res


PAIRWISE_SWEEP = {"none": [], "1": [1], "1,2": [1, 2], "1,2,3": [1, 2, 3]}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    """Tower ablation plus the pairwise-layer sweep, one CSV row per setting."""
    if cfg.model != "karsein":
        raise ConfigError("ablate runs KarSein variants; set model to 'karsein'")
    ds = open_dataset(cfg)
    seeds = cfg.run_seeds()
    settings = [
        ("karsein", ["explicit", "implicit"], list(cfg.pairwise_layers)),
        ("karsein-explicit", ["explicit"], list(cfg.pairwise_layers)),
        ("karsein-implicit", ["implicit"], list(cfg.pairwise_layers)),
    ] + [(f"pairwise={k}", ["explicit", "implicit"], v) for k, v in PAIRWISE_SWEEP.items()]
    done: dict = {}
    rows = []
    for name, towers, pw in settings:
        key = (tuple(towers), tuple(pw))
        if key not in done:
            aucs, lls, secs, n_params = [], [], [], 0
            for seed in seeds:
                model = KarseinModel(cfg.model_config(ds.field_dims, seed, towers=towers, pairwise_layers=pw))
                t0 = time.perf_counter()
                rep = train(model, ds, cfg.train_config(seed))
                secs.append(time.perf_counter() - t0)
                aucs.append(rep.test_auc)
                lls.append(rep.test_logloss)
                n_params = rep.n_params
                log.info("%s seed %d: test AUC %.4f", name, seed, rep.test_auc)
            done[key] = {"test_auc": aucs, "test_logloss": lls, "seconds": secs, "n_params": n_params}
        r = done[key]
        rows.append({"setting": name, "towers": "+".join(towers), "pairwise_layers": pw,
                     "seeds": seeds, "mean_test_auc": _mean(r["test_auc"]),
                     "mean_test_logloss": _mean(r["test_logloss"]), "n_params": r["n_params"],
                     "mean_seconds": _mean(r["seconds"]), "test_auc": r["test_auc"]})
    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "towers", "pairwise_layers", "mean_test_auc", "mean_test_logloss",
                    "n_params", "mean_seconds"])
        for r in rows:
            pw = "none" if not r["pairwise_layers"] else "+".join(map(str, r["pairwise_layers"]))
            w.writerow([r["setting"], r["towers"], pw, repr(r["mean_test_auc"]), repr(r["mean_test_logloss"]),
                        r["n_params"], f"{r['mean_seconds']:.3f}"])
    for r in rows:
        print(f"{r['setting']:<18} AUC {r['mean_test_auc']:.4f}  params {r['n_params']}")
    return {"command": "ablate", "config": asdict(cfg), "rows": rows}


def cmd_synthetic(cfg: RunConfig, out: Path) -> dict:
    table = run_synthetic_table(max_steps=cfg.synthetic_max_steps, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "synthetic.json", table)
    for row in table["settings"]:
        cells = "  ".join(f"{t}: {r['steps_to_rmse_0.05']}" for t, r in row["results"].items())
        print(f"setting {row['setting']} (reg {row['reg']}): {cells}")
    return {"command": "synthetic", **table}


def cmd_explain(cfg: RunConfig, out: Path) -> dict:
    model, manifest = _load_ckpt(cfg)
    records = None
    if cfg.data:
        # with data, cubic fits are also reported over each row's observed input range
        ds = _dataset_for_checkpoint(cfg, manifest)
        records = ds.records[ds.val[:4096]]
    summary = analysis.explain(model, out, cfg.threshold, records=records)
    brief = {k: v for k, v in summary.items() if k != "fits"}
    print(f"redundancy ratios: {json.dumps(brief['redundancy'])}")
    print(f"cubic fits with R^2 >= {analysis.CUBIC_R2_GOOD}: {brief['cubic_good_fraction']:.2%} "
          f"of {brief['n_activations']} explicit-tower activations")
    return {"command": "explain", "checkpoint": cfg.checkpoint, **brief}


def cmd_prune(cfg: RunConfig, out: Path) -> dict:
    model, manifest = _load_ckpt(cfg)
    ds = _dataset_for_checkpoint(cfg, manifest)
    records = ds.records[ds.val[:4096]]
    summary = analysis.explain(model, out / "explain", cfg.threshold, records=records)
    report = analysis.find_redundant(analysis.connection_map(model), cfg.threshold)
    new, ft = analysis.mask_and_finetune(model, report, ds, cfg.finetune_epochs,
                                         cfg.train_config(), out_dir=out / "finetune")
    ckpt = save_checkpoint(new, out / "pruned", data_manifest(cfg, ds))
    print(f"masked {ft['masked_rows']} input rows; test AUC {ft['before_auc']:.4f} -> "
          f"{ft['after_auc']:.4f} (delta {ft['delta_auc']:+.4f})")
    return {"command": "prune", "checkpoint": cfg.checkpoint, "pruned_checkpoint": str(ckpt),
            "redundancy": report.to_dict(), "finetune": ft,
            "cubic_good_fraction": summary["cubic_good_fraction"]}


def gradcheck_model(seed: int, precision: str = "double"):
    """Small random KarSein with both towers, pairwise layers, and a batch spread over the spline grid."""
    dtype = np.float64 if precision == "double" else np.float32
    cfg = ModelConfig(field_dims=[5, 4, 3], dim=4, explicit_hidden=[3], implicit_hidden=[4], order=3,
                      grid=5, pairwise_layers=[1, 2], seed=seed, embedding_std=0.3)
    model = KarseinModel(cfg, dtype=dtype)
    # central differences are meaningless across the |w| kink, so keep penalized weights off zero
    for P in model.reg_params():
        near = np.abs(P.value) < 1e-3
        P.value[near] = np.where(P.value[near] < 0, -1e-3, 1e-3)
    rng = np.random.default_rng(seed + 1)
    records = np.stack([rng.integers(0, n, size=8) for n in cfg.field_dims], axis=1)
    labels = (rng.random(8) < 0.5).astype(np.float64)
    labels[:2] = [0, 1]
    return model, records, labels


def cmd_gradcheck(cfg: RunConfig, out: Optional[Path]) -> dict:
    l1, l2 = 1e-2, 1e-3
    model, records, labels = gradcheck_model(cfg.seed, cfg.precision)
    backward(model, records, labels, l1, l2)
    h = 1e-5 if cfg.precision == "double" else 1e-2
    worst = finite_diff_check(lambda: total_loss(model, records, labels, l1, l2), model.params(), h=h)
    ok = worst.max_rel_err <= GRADCHECK_TOL
    print(f"gradcheck {'passed' if ok else 'FAILED'}: max relative error {worst.max_rel_err:.3e} "
          f"at {worst.param}{list(worst.index)} ({cfg.precision} precision)")
    return {"command": "gradcheck", "passed": bool(ok), "max_rel_err": float(worst.max_rel_err),
            "worst_param": worst.param, "worst_index": list(worst.index), "tolerance": GRADCHECK_TOL,
            "precision": cfg.precision, "dtype": str(np.dtype(model.dtype)), "seed": cfg.seed,
            "l1": l1, "l2": l2, "params": [p.name for p in model.params()]}


COMMANDS = {
    "train": (cmd_train, True),
    "evaluate": (cmd_evaluate, False),
    "ablate": (cmd_ablate, True),
    "synthetic": (cmd_synthetic, True),
    "explain": (cmd_explain, True),
    "prune": (cmd_prune, True),
    "gradcheck": (cmd_gradcheck, False),
}


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _parse_seeds(text: str) -> list:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="karsein", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON file of RunConfig keys")
        s.add_argument("--seed", type=int)
        s.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3")
        s.add_argument("--out", help="output directory")
        s.add_argument("--force", action="store_true", help="write into a nonempty --out")
        s.add_argument("--data", help="CSV, encoded dataset dir, ML-1M dir, or synthetic[:N]")
        s.add_argument("--schema", choices=sorted(SCHEMAS))
        s.add_argument("--checkpoint", help="checkpoint manifest (.json)")
        s.add_argument("--model", choices=MODEL_KINDS)
        s.add_argument("--max-epochs", dest="max_epochs", type=int)
        s.add_argument("--precision", choices=("double", "single"))
        s.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key; VALUE is parsed as JSON when possible")
    return p


def resolve_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for key in ("seed", "data", "schema", "checkpoint", "model", "max_epochs", "precision"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    if args.seeds:
        raw["seeds"] = _parse_seeds(args.seeds)
    raw.update(_parse_set(args.set))
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, needs_out = COMMANDS[args.command]
    try:
        cfg = resolve_config(args)
        out = prepare_out(args.out, args.force, required=needs_out)
        summary = fn(cfg, out)
        if out is not None:
            write_json(out / "summary.json", summary)
    except (ConfigError, DataError, CheckpointError, PruneError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"karsein {args.command}: error: {msg}", file=sys.stderr)
        return 2
    if args.command == "gradcheck" and not summary["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
