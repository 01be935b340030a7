import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from karsein.analysis import (ConnectionMap, connection_map, curve_svg, explain,
                              find_redundant, fit_cubic, heatmap_svg, mask_and_finetune, read_map_csv,
                              sample_activation, write_curve_csv, write_map_csv)
from karsein.model import activation_transform
from karsein.training import TrainConfig, train

from conftest import tiny_model


def zero_model(**kw):
    model = tiny_model(**kw)
    for layer in model.layers:
        layer.W_b.value[...] = 0
        layer.W_s.value[...] = 0
    return model


class TestConnectionMap:
    def test_zero_model(self):
        assert all(np.all(c.S == 0) for c in connection_map(zero_model()))

    def test_hand_set(self):
        model = tiny_model(field_dims=(3,), explicit_hidden=[], towers=["explicit"], pairwise_layers=[],
                           dtype=np.float64)
        layer = model.explicit[0]
        layer.W_b.value[...] = [[2.0]]
        layer.W_s.value[...] = [[-1.0]]
        np.testing.assert_array_equal(connection_map(model)[0].S, [[3.0]])

    def test_shapes_and_nonneg(self):
        model = tiny_model()
        for cmap, layer in zip(connection_map(model), model.layers):
            assert cmap.S.shape == (layer.out_rows, layer.eff_in) and np.all(cmap.S >= 0)

    def test_csv_round_trip(self, tmp_path, rng):
        cmap = ConnectionMap("explicit.0", rng.random((3, 7)) * 1e-3)
        back = read_map_csv(write_map_csv(cmap, tmp_path / "m.csv"))
        np.testing.assert_array_equal(back.S, cmap.S)

    def test_heatmap_is_valid_svg(self, tmp_path):
        path = heatmap_svg(connection_map(tiny_model()), tmp_path / "h.svg")
        root = ET.parse(path).getroot()
        assert root.tag.endswith("svg") and len(root) > 10


class TestFindRedundant:
    def test_all_zero(self):
        rep = find_redundant([ConnectionMap("L", np.zeros((2, 5)))])
        assert rep.layers[0]["ratio"] == 1.0 and not rep.empty

    def test_one_strong_column(self):
        S = np.zeros((3, 4))
        S[1, 2] = 0.5
        rep = find_redundant([ConnectionMap("L", S)])
        assert rep.layers[0]["redundant"] == [0, 1, 3] and rep.layers[0]["ratio"] == 0.75

    def test_threshold_inclusive(self):
        rep = find_redundant([ConnectionMap("L", np.array([[0.01, 0.0100001]]))], 0.01)
        assert rep.layers[0]["redundant"] == [0]

    @given(arrays(np.float64, (3, 6), elements=st.floats(0, 0.05)), st.floats(0, 0.05), st.floats(0, 0.05))
    def test_monotone_in_threshold(self, S, t1, t2):
        lo, hi = sorted((t1, t2))
        small = set(find_redundant([ConnectionMap("L", S)], lo).layers[0]["redundant"])
        big = set(find_redundant([ConnectionMap("L", S)], hi).layers[0]["redundant"])
        assert small <= big


class TestMaskAndFinetune:
    def test_empty_report_is_noop(self, small_dataset):
        model = tiny_model(field_dims=small_dataset.field_dims, dtype=np.float32)
        rep = find_redundant(connection_map(model), threshold=-1.0)
        assert rep.empty
        new, summary = mask_and_finetune(model, rep, small_dataset)
        assert summary["delta_auc"] == 0 and summary["epochs"] == 0
        for a, b in zip(model.params(), new.params()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_masking_zero_weight_inputs_is_bit_identical(self, small_dataset):
        model = tiny_model(field_dims=small_dataset.field_dims, dtype=np.float32)
        layer = model.explicit[0]
        layer.W_b.value[:, [0, 4]] = 0
        layer.W_s.value[:, [0, 4]] = 0
        rep = find_redundant(connection_map(model), threshold=0.0)
        assert rep.layers[0]["redundant"] == [0, 4]
        recs = small_dataset.records[:200]
        before = model.predict(recs)
        masked = model.copy()
        mask = np.ones(layer.eff_in, dtype=bool)
        mask[[0, 4]] = False
        masked.explicit[0].apply_mask(mask)
        np.testing.assert_array_equal(masked.predict(recs), before)

    def test_finetune_keeps_mask_and_original(self, small_dataset):
        model = tiny_model(field_dims=small_dataset.field_dims, dtype=np.float32)
        train(model, small_dataset, TrainConfig(lr=5e-3, batch_size=256, max_epochs=2))
        snapshot = model.state()
        S = connection_map(model)
        thr = float(np.quantile(S[0].S.max(axis=0), 0.3))
        rep = find_redundant(S, thr)
        new, summary = mask_and_finetune(model, rep, small_dataset, epochs=2,
                                         config=TrainConfig(lr=5e-3, batch_size=256))
        red = rep.layers[0]["redundant"]
        assert red and summary["masked_rows"] >= len(red) and 1 <= summary["epochs"] <= 2
        assert np.all(new.explicit[0].W_b.value[:, red] == 0) and np.all(new.explicit[0].C.value[red] == 0)
        assert summary["delta_auc"] == pytest.approx(summary["after_auc"] - summary["before_auc"])
        for a, b in zip(snapshot, model.state()):
            np.testing.assert_array_equal(a, b)

    def test_mask_all_rows_fails(self, small_dataset):
        model = tiny_model(field_dims=small_dataset.field_dims)
        rep = find_redundant(connection_map(model), threshold=1e9)
        with pytest.raises(ValueError):
            mask_and_finetune(model, rep, small_dataset)


class TestSampleActivation:
    def test_zero_row(self):
        model = tiny_model()
        model.explicit[0].C.value[2] = 0
        np.testing.assert_array_equal(sample_activation(model, 0, 2, np.linspace(-1, 1, 11)), 0)

    def test_matches_activation_transform(self, rng):
        model = tiny_model(dtype=np.float64)
        layer = model.explicit[1]
        for x in rng.uniform(-1, 1, 20):
            expect = activation_transform(np.array([[x]]), layer.C.value[3:4], model.basis)[0, 0]
            assert abs(sample_activation(model, "explicit.1", 3, [x])[0] - expect) <= 1e-9

    def test_index_errors(self):
        model = tiny_model()
        with pytest.raises(IndexError):
            sample_activation(model, 99, 0, [0.0])
        with pytest.raises(IndexError):
            sample_activation(model, 0, model.explicit[0].eff_in, [0.0])
        with pytest.raises(IndexError):
            sample_activation(model, "nope", 0, [0.0])

    def test_exports(self, tmp_path):
        xs = np.linspace(-1, 1, 21)
        ys = xs ** 3
        lines = write_curve_csv(xs, ys, tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "x,y" and len(lines) == 22
        root = ET.parse(curve_svg(xs, ys, tmp_path / "c.svg", title="a<b")).getroot()
        poly = [el for el in root.iter() if el.tag.endswith("polyline")]
        assert len(poly) == 1 and len(poly[0].get("points").split()) == 21


class TestFitCubic:
    def test_exact_polynomial(self):
        xs = np.linspace(-1, 1, 50)
        fit = fit_cubic(xs, 2 * xs ** 3 - xs)
        np.testing.assert_allclose(fit.coeffs, [0, -1, 0, 2], atol=1e-6)
        assert fit.r2 >= 1 - 1e-9 and fit.domain == (-1.0, 1.0)

    def test_noise(self):
        rng = np.random.default_rng(0)
        assert fit_cubic(np.linspace(-1, 1, 200), rng.normal(size=200)).r2 <= 0.2

    def test_constant(self):
        assert fit_cubic(np.linspace(0, 1, 10), np.full(10, 3.0)).r2 == 1.0

    @given(arrays(np.float64, 4, elements=st.floats(-5, 5)))
    def test_recovers_any_cubic(self, c):
        xs = np.linspace(-1, 1, 30)
        fit = fit_cubic(xs, np.polynomial.polynomial.polyval(xs, c))
        np.testing.assert_allclose(fit.coeffs, c, atol=1e-6)

    def test_deterministic(self, rng):
        xs, ys = rng.uniform(-1, 1, 40), rng.normal(size=40)
        assert fit_cubic(xs, ys) == fit_cubic(xs, ys)

    @pytest.mark.parametrize("xs", [np.linspace(0, 1, 5), np.repeat([0.0, 1.0, 2.0], 4)])
    def test_degenerate(self, xs):
        with pytest.raises(ValueError):
            fit_cubic(xs, np.zeros_like(xs))


class TestExplain:
    def test_zero_model(self, tmp_path):
        summary = explain(zero_model(), tmp_path)
        assert all(r == 1.0 for r in summary["redundancy"].values())
        red = json.loads((tmp_path / "redundancy.json").read_text())
        assert all(entry["ratio"] == 1.0 for entry in red["layers"])
        for f in (tmp_path / "connections").glob("*.csv"):
            assert np.all(read_map_csv(f).S == 0)

    def test_outputs_and_determinism(self, tmp_path, small_dataset):
        model = tiny_model(field_dims=small_dataset.field_dims, dtype=np.float32)
        a = explain(model, tmp_path / "a", n_points=41, records=small_dataset.records[:300])
        b = explain(model, tmp_path / "b", n_points=41, records=small_dataset.records[:300])
        assert a == b
        assert a["n_activations"] == sum(L.eff_in for L in model.explicit)
        assert 0 <= a["cubic_good_fraction"] <= 1
        for rel in ("cubic_fits.json", "redundancy.json", "connections/heatmap.svg",
                    "activations/explicit.0.row0.csv", "activations/explicit.0.row0.svg"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
