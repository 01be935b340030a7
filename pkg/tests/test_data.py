import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from karsein.data import (CRITEO, DROP, MOVIELENS, OOV, DataError, DatasetSchema, EncodedDataset, RawTable,
                          batches, binarize_label, build_vocab, categorical_schema, encode, load_csv,
                          load_dataset, log_discretize, prepare_movielens_1m, split_811)

SCHEMA = categorical_schema(["user_id", "item_id"])


def write(path, text):
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_well_formed(self, tmp_path):
        p = write(tmp_path / "r.csv", "user_id,item_id,rating\n1,10,5\n2,11,1\n3,12,4\n")
        t = load_csv(p, SCHEMA)
        assert len(t.rows) == 3 and t.malformed == 0
        assert t.rows[0] == ["1", "10", "5"]

    def test_column_order_follows_schema(self, tmp_path):
        p = write(tmp_path / "r.csv", "rating,extra,item_id,user_id\n5,x,10,1\n")
        assert load_csv(p, SCHEMA).rows == [["1", "10", "5"]]

    def test_wrong_width_row_skipped(self, tmp_path):
        p = write(tmp_path / "r.csv", "user_id,item_id,rating\n1,10,5\n2,11\n3,12,4\n")
        t = load_csv(p, SCHEMA)
        assert len(t.rows) == 2 and t.malformed == 1 and t.total == 3

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="no records"):
            load_csv(write(tmp_path / "e.csv", ""), SCHEMA)
        with pytest.raises(DataError, match="no records"):
            load_csv(write(tmp_path / "h.csv", "user_id,item_id,rating\n"), SCHEMA)

    def test_missing_file_and_column(self, tmp_path):
        with pytest.raises(DataError, match="no such file"):
            load_csv(tmp_path / "nope.csv", SCHEMA)
        with pytest.raises(DataError, match="item_id"):
            load_csv(write(tmp_path / "c.csv", "user_id,rating\n1,5\n"), SCHEMA)

    def test_malformed_cap(self, tmp_path):
        good = "".join(f"{i},{i},5\n" for i in range(200))
        ok = write(tmp_path / "ok.csv", "user_id,item_id,rating\n" + good + "x\nx\n")
        assert load_csv(ok, SCHEMA).malformed == 2
        bad = write(tmp_path / "bad.csv", "user_id,item_id,rating\n" + good + "x\n" * 5)
        with pytest.raises(DataError, match="malformed"):
            load_csv(bad, SCHEMA)

    def test_headerless_criteo_is_label_first(self, tmp_path):
        line = "\t".join(["1"] + [str(i) for i in range(13)] + [f"c{i}" for i in range(26)])
        t = load_csv(write(tmp_path / "c.tsv", line + "\n"), CRITEO)
        assert t.rows[0][-1] == "1" and t.rows[0][0] == "0" and t.rows[0][13] == "c0"


class TestLabels:
    @pytest.mark.parametrize("r,y", [(1, 0), (2, 0), (3, DROP), (4, 1), (5, 1), ("5", 1), (2.0, 0)])
    def test_binarize(self, r, y):
        assert binarize_label(r) == y

    @pytest.mark.parametrize("r", [0, 6, -1, 2.5])
    def test_out_of_range(self, r):
        with pytest.raises(DataError):
            binarize_label(r)


class TestLogDiscretize:
    @pytest.mark.parametrize("v,b", [(None, 0), ("", 0), (float("nan"), 0), (-3, 1), (0, 2), (100, 6), ("100", 6)])
    def test_values(self, v, b):
        assert log_discretize(v) == b

    @given(st.floats(0, 1e12), st.floats(0, 1e12))
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert log_discretize(lo) <= log_discretize(hi)


class TestVocab:
    def test_first_occurrence(self):
        v = build_vocab([["A"], ["B"], ["A"]], categorical_schema(["f"]))
        assert v == [{"A": 1, "B": 2}]

    def test_sizes_match_distinct_counts(self, rng):
        rows = [[str(rng.integers(0, 7)), str(rng.integers(0, 30))] for _ in range(500)]
        v = build_vocab(rows, SCHEMA)
        assert [len(x) for x in v] == [len({r[j] for r in rows}) for j in range(2)]

    def test_test_only_value_is_oov(self):
        n = 30
        _, val, _ = split_811(n, 0)
        k = int(val[0])
        rows = [[f"u{i}", "C" if i == k else "A", "5"] for i in range(n)]
        ds = encode(RawTable(rows, 0, n), SCHEMA, seed=0)
        assert "C" not in ds.vocabs[1]
        assert ds.records[k, 1] == OOV == 0
        assert np.all(ds.records[ds.train, 1] == 1)


class TestSplit:
    def test_ten(self):
        assert [len(s) for s in split_811(10, 0)] == [8, 1, 1]

    def test_remainder_goes_to_test(self):
        assert [len(s) for s in split_811(19, 0)] == [15, 1, 3]

    def test_deterministic(self):
        for a, b in zip(split_811(1000, 5), split_811(1000, 5)):
            np.testing.assert_array_equal(a, b)

    @given(st.integers(10, 3000), st.integers(0, 2**32))
    def test_partition(self, n, seed):
        parts = split_811(n, seed)
        allidx = np.concatenate(parts)
        assert allidx.size == n and np.array_equal(np.sort(allidx), np.arange(n))

    def test_too_small(self):
        with pytest.raises(DataError):
            split_811(9, 0)


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batches(np.arange(1000), 512, 0, 0)] == [512, 488]

    def test_epochs_differ_but_permute(self):
        e0 = np.concatenate(list(batches(np.arange(1000), 100, 3, 0)))
        e1 = np.concatenate(list(batches(np.arange(1000), 100, 3, 1)))
        assert not np.array_equal(e0, e1)
        assert np.array_equal(np.sort(e0), np.arange(1000)) and np.array_equal(np.sort(e1), np.arange(1000))

    def test_deterministic(self):
        a = np.concatenate(list(batches(np.arange(300), 64, 9, 4)))
        b = np.concatenate(list(batches(np.arange(300), 64, 9, 4)))
        np.testing.assert_array_equal(a, b)

    def test_invalid_batch_size(self):
        with pytest.raises(ValueError):
            list(batches(np.arange(10), 0, 0, 0))


def ratings_csv(tmp_path, n=400, seed=0):
    rng = np.random.default_rng(seed)
    lines = ["user_id,item_id,gender,age,occupation,genre,rating"]
    for _ in range(n):
        lines.append(",".join([f"u{rng.integers(0, 40)}", f"i{rng.integers(0, 60)}", "MF"[rng.integers(0, 2)],
                               str(rng.integers(1, 7)), str(rng.integers(0, 21)), f"g{rng.integers(0, 5)}",
                               str(rng.integers(1, 6))]))
    p = tmp_path / "ratings.csv"
    p.write_text("\n".join(lines) + "\n")
    return p


class TestEncode:
    def test_drops_neutral_and_binarizes(self, tmp_path):
        p = ratings_csv(tmp_path)
        raw = load_csv(p, MOVIELENS)
        ds = load_dataset(p, MOVIELENS, seed=0)
        assert len(ds.labels) == sum(r[-1] != "3" for r in raw.rows)
        assert set(np.unique(ds.labels)) <= {0.0, 1.0}

    def test_vocab_from_train_only(self, tmp_path):
        ds = load_dataset(ratings_csv(tmp_path), MOVIELENS, seed=1)
        raw_tokens = load_csv(ratings_csv(tmp_path), MOVIELENS).rows
        kept = [r for r in raw_tokens if r[-1] != "3"]
        train_users = {kept[i][0] for i in ds.train}
        assert set(ds.vocabs[0]) == train_users
        assert np.all(ds.records < np.asarray(ds.field_dims))

    def test_stable_bytes(self, tmp_path):
        p = ratings_csv(tmp_path)
        a = load_dataset(p, MOVIELENS, seed=3).save(tmp_path / "a")
        b = load_dataset(p, MOVIELENS, seed=3).save(tmp_path / "b")
        for name in ("records.bin", "labels.bin", "splits.bin", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_save_load_round_trip(self, tmp_path):
        ds = load_dataset(ratings_csv(tmp_path), MOVIELENS, seed=2)
        back = EncodedDataset.load(ds.save(tmp_path / "enc"))
        np.testing.assert_array_equal(back.records, ds.records)
        np.testing.assert_array_equal(back.labels, ds.labels)
        for s in ("train", "val", "test"):
            np.testing.assert_array_equal(back.split(s), ds.split(s))
        assert back.vocabs == ds.vocabs and back.field_dims == ds.field_dims

    def test_numeric_fields_discretized(self):
        schema = DatasetSchema(("n", "c"), ("numeric", "categorical"), label="y", label_kind="binary")
        rows = [[str(v), "a", str(i % 2)] for i, v in enumerate([0, 1, 100, -5, ""] * 4)]
        ds = encode(RawTable(rows, 0, len(rows)), schema, seed=0)
        assert set(ds.vocabs[0]) <= {"0", "1", "2", "6"}

    def test_bad_binary_label(self):
        schema = categorical_schema(["c"], label="y", label_kind="binary")
        with pytest.raises(DataError):
            encode(RawTable([["a", "2"]] * 12, 0, 12), schema, seed=0)


class TestSchema:
    def test_duplicate_fields(self):
        with pytest.raises(DataError):
            categorical_schema(["a", "a"])

    def test_movielens_m(self):
        assert MOVIELENS.m == 6


class TestMovielens1m:
    def test_prepare(self, tmp_path):
        src = tmp_path / "ml-1m"
        src.mkdir()
        (src / "users.dat").write_text("1::F::1::10::48067\n2::M::56::16::70072\n", encoding="latin-1")
        (src / "movies.dat").write_text("1::Toy Story (1995)::Animation|Children's\n2::Jumanji::Adventure\n",
                                        encoding="latin-1")
        (src / "ratings.dat").write_text("1::1::5::978300760\n2::2::3::978302109\n", encoding="latin-1")
        out = prepare_movielens_1m(src, tmp_path / "ml.csv")
        rows = load_csv(out, MOVIELENS).rows
        assert rows == [["1", "1", "F", "1", "10", "Animation", "5"], ["2", "2", "M", "56", "16", "Adventure", "3"]]
