"""Rating/click logs -> encoded categorical records with an 8:1:1 split."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

OOV = 0
DROP = None


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSchema:
    fields: tuple
    kinds: tuple
    label: str = "rating"
    label_kind: str = "rating"  # "rating" (1..5, binarized) or "binary" (0/1)
    delimiter: str = ","
    header: bool = True

    def __post_init__(self):
        if len(self.fields) < 1:
            raise DataError("schema needs at least one field")
        if len(set(self.fields)) != len(self.fields):
            raise DataError(f"duplicate field names in {self.fields}")
        if len(self.kinds) != len(self.fields):
            raise DataError("one kind per field required")
        bad = [k for k in self.kinds if k not in ("categorical", "numeric")]
        if bad:
            raise DataError(f"unknown field kinds {bad}")
        if self.label_kind not in ("rating", "binary"):
            raise DataError(f"unknown label kind {self.label_kind!r}")

    @property
    def m(self) -> int:
        return len(self.fields)

    @property
    def columns(self) -> tuple:
        return tuple(self.fields) + (self.label,)

    def to_dict(self) -> dict:
        return {"fields": list(self.fields), "kinds": list(self.kinds), "label": self.label,
                "label_kind": self.label_kind, "delimiter": self.delimiter, "header": self.header}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        return cls(tuple(d["fields"]), tuple(d["kinds"]), d.get("label", "rating"),
                   d.get("label_kind", "rating"), d.get("delimiter", ","), d.get("header", True))


def categorical_schema(fields: Sequence[str], **kw) -> DatasetSchema:
    return DatasetSchema(tuple(fields), ("categorical",) * len(fields), **kw)


MOVIELENS = categorical_schema(["user_id", "item_id", "gender", "age", "occupation", "genre"])
DOUBAN = categorical_schema(["user_id", "item_id"])
CRITEO = DatasetSchema(
    tuple(f"I{i}" for i in range(1, 14)) + tuple(f"C{i}" for i in range(1, 27)),
    ("numeric",) * 13 + ("categorical",) * 26,
    label="label", label_kind="binary", delimiter="\t", header=False,
)
SCHEMAS = {"movielens": MOVIELENS, "douban": DOUBAN, "criteo": CRITEO}


@dataclass
class RawTable:
    rows: list
    malformed: int
    total: int


def load_csv(path, schema: DatasetSchema, max_malformed_frac: float = 0.01) -> RawTable:
    """Read rows as string lists in schema column order (fields..., label).

    Rows with the wrong column count are skipped and counted. The read fails if
    more than ``max(1, max_malformed_frac * rows)`` rows are malformed.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    rows = []
    malformed = 0
    total = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        if schema.header:
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: no records")
            header = [h.strip() for h in header]
            missing = [c for c in schema.columns if c not in header]
            if missing:
                raise DataError(f"{path}: missing column(s) {missing}")
            pick = [header.index(c) for c in schema.columns]
            width = len(header)
        else:
            width = len(schema.columns)
            # headerless files follow label-first order for binary logs (Criteo), else schema order
            if schema.label_kind == "binary":
                pick = list(range(1, width)) + [0]
            else:
                pick = list(range(width))
        for raw in reader:
            if not raw:
                continue
            total += 1
            if len(raw) != width:
                malformed += 1
                continue
            rows.append([raw[i] for i in pick])
    if not rows:
        raise DataError(f"{path}: no records")
    if malformed > max(1, int(max_malformed_frac * total)):
        raise DataError(f"{path}: {malformed} of {total} rows malformed (cap {max_malformed_frac:.0%})")
    return RawTable(rows, malformed, total)


def binarize_label(rating) -> Optional[int]:
    """1,2 -> 0; 4,5 -> 1; 3 -> None (dropped)."""
    r = int(rating)
    if r != float(rating) or not 1 <= r <= 5:
        raise DataError(f"rating {rating!r} outside 1..5")
    if r <= 2:
        return 0
    if r >= 4:
        return 1
    return DROP


def log_discretize(v) -> int:
    """Bucket: missing -> 0, negative -> 1, else 2 + floor(ln(1 + v))."""
    if v is None:
        return 0
    if isinstance(v, str):
        v = v.strip()
        if not v:
            return 0
        v = float(v)
    v = float(v)
    if math.isnan(v):
        return 0
    if v < 0:
        return 1
    return 2 + int(math.floor(math.log1p(v)))


def build_vocab(train_tokens: Sequence[Sequence[str]], schema: DatasetSchema) -> list[dict]:
    """Per-field token -> index maps from training rows only; 0 stays reserved for OOV."""
    vocabs = [dict() for _ in range(schema.m)]
    for row in train_tokens:
        for j, tok in enumerate(row):
            v = vocabs[j]
            if tok not in v:
                v[tok] = len(v) + 1
    return vocabs


def split_811(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 10:
        raise DataError(f"need at least 10 records to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(0.8 * n))
    n_val = int(math.floor(0.1 * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def batches(indices: np.ndarray, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffle keyed by (seed, epoch); the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(indices))
    idx = np.asarray(indices)[order]
    for i in range(0, len(idx), batch_size):
        yield idx[i:i + batch_size]


@dataclass
class EncodedDataset:
    schema: DatasetSchema
    records: np.ndarray
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    vocabs: list
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def field_dims(self) -> list[int]:
        # +1 for the OOV row
        return [len(v) + 1 for v in self.vocabs]

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def batches(self, split: str, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
        return batches(self.split(split), batch_size, seed, epoch)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {
            "schema": self.schema.to_dict(),
            "vocab_sizes": self.field_dims,
            "split_sizes": [len(self.train), len(self.val), len(self.test)],
            "n_records": int(len(self.labels)),
            "seed": self.seed,
            "vocabs": [list(v.keys()) for v in self.vocabs],
            "meta": self.meta,
        }
        (d / "records.bin").write_bytes(np.ascontiguousarray(self.records, dtype="<i4").tobytes())
        (d / "labels.bin").write_bytes(np.ascontiguousarray(self.labels, dtype="<i4").tobytes())
        split = np.concatenate([self.train, self.val, self.test])
        (d / "splits.bin").write_bytes(np.ascontiguousarray(split, dtype="<i4").tobytes())
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "EncodedDataset":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        schema = DatasetSchema.from_dict(manifest["schema"])
        n = manifest["n_records"]
        records = np.frombuffer((d / "records.bin").read_bytes(), dtype="<i4").reshape(n, schema.m).astype(np.int64)
        labels = np.frombuffer((d / "labels.bin").read_bytes(), dtype="<i4").astype(np.float32)
        split = np.frombuffer((d / "splits.bin").read_bytes(), dtype="<i4").astype(np.int64)
        a, b, _ = manifest["split_sizes"]
        vocabs = [{tok: i + 1 for i, tok in enumerate(v)} for v in manifest["vocabs"]]
        return cls(schema, records, labels, split[:a], split[a:a + b], split[a + b:], vocabs,
                   manifest["seed"], manifest.get("meta", {}))


def encode(table: RawTable, schema: DatasetSchema, seed: int) -> EncodedDataset:
    """Binarize labels, split 8:1:1, build vocab on the train split, encode everything."""
    tokens = []
    labels = []
    for row in table.rows:
        raw_label = row[-1].strip()
        if schema.label_kind == "rating":
            y = binarize_label(float(raw_label))
            if y is DROP:
                continue
        else:
            y = int(raw_label)
            if y not in (0, 1):
                raise DataError(f"binary label expected, got {raw_label!r}")
        toks = [str(log_discretize(v)) if kind == "numeric" else v.strip()
                for v, kind in zip(row[:-1], schema.kinds)]
        tokens.append(toks)
        labels.append(y)
    n = len(labels)
    train, val, test = split_811(n, seed)
    vocabs = build_vocab([tokens[i] for i in train], schema)
    records = np.zeros((n, schema.m), dtype=np.int64)
    for i, toks in enumerate(tokens):
        records[i] = [v.get(t, OOV) for v, t in zip(vocabs, toks)]
    return EncodedDataset(schema, records, np.asarray(labels, dtype=np.float32), train, val, test,
                          vocabs, seed, {"malformed": table.malformed, "raw_rows": table.total})


def load_dataset(path, schema: DatasetSchema, seed: int) -> EncodedDataset:
    return encode(load_csv(path, schema), schema, seed)


def prepare_movielens_1m(src_dir, out_csv) -> Path:
    """Join ML-1M ``ratings.dat``/``users.dat``/``movies.dat`` into the movielens CSV schema.

    The genre field keeps the first listed genre of each movie.
    """
    src = Path(src_dir)

    def read(name):
        with (src / name).open(encoding="latin-1") as fh:
            return [line.rstrip("\n").split("::") for line in fh if line.strip()]

    users = {u[0]: u[1:4] for u in read("users.dat")}  # gender, age, occupation
    genres = {mv[0]: mv[2].split("|")[0] for mv in read("movies.dat")}
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MOVIELENS.columns)
        for uid, mid, rating, _ts in read("ratings.dat"):
            g, a, o = users.get(uid, ("", "", ""))
            w.writerow([uid, mid, g, a, o, genres.get(mid, ""), rating])
    return out


def make_synthetic_ctr(n: int, field_sizes: Sequence[int], seed: int, rank: int = 4,
                       noise: float = 0.5) -> tuple[DatasetSchema, RawTable]:
    """Clicks driven by pairwise latent-factor interactions between fields.

    Each field value gets a latent vector; the click logit is the sum of all
    pairwise inner products plus per-value biases and logistic noise. Labels
    come out as ratings 1 or 5 so the movielens binarization path is exercised.
    """
    rng = np.random.default_rng(seed)
    m = len(field_sizes)
    lat = [rng.normal(0, 1.0 / np.sqrt(rank), size=(k, rank)) for k in field_sizes]
    bias = [rng.normal(0, 0.3, size=k) for k in field_sizes]
    idx = np.stack([rng.integers(0, k, size=n) for k in field_sizes], axis=1)
    logit = np.zeros(n)
    for i in range(m):
        logit += bias[i][idx[:, i]]
        for j in range(i + 1, m):
            logit += np.einsum("nr,nr->n", lat[i][idx[:, i]], lat[j][idx[:, j]])
    logit += noise * rng.logistic(size=n)
    y = (logit > np.median(logit)).astype(int)
    schema = categorical_schema([f"f{i}" for i in range(m)])
    rows = [[f"v{v}" for v in r] + [str(1 + 4 * t)] for r, t in zip(idx, y)]
    return schema, RawTable(rows, 0, n)
