import numpy as np
import pytest

from mtdml.datagen import (
    ClusterSpec,
    DatasetError,
    DatasetFileNotFoundError,
    EmptyDatasetError,
    LabeledDataset,
    NonNumericCellError,
    export_csv,
    load_csv,
    split,
    synth_clusters,
)
from mtdml.numerics import make_rng


class TestSynthClusters:
    def test_tiny_noise_is_nearest_center_separable(self):
        spec = ClusterSpec(num_classes=2, input_dim=5, samples_per_class=50,
                           class_center_radius=10.0, per_class_scales=(1e-6, 1e-6))
        ds = synth_clusters(spec, make_rng(1))
        centers = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(2)])
        pred = np.argmin(((ds.features[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        assert (pred == ds.labels).all()

    def test_deterministic(self):
        a = synth_clusters(ClusterSpec(), make_rng(5))
        b = synth_clusters(ClusterSpec(), make_rng(5))
        assert a.features.tobytes() == b.features.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_intra_class_spread_follows_scales(self):
        spec = ClusterSpec(num_classes=7, input_dim=32, samples_per_class=200,
                           per_class_scales=(0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4))
        ds = synth_clusters(spec, make_rng(2))
        means = []
        for c in range(7):
            F = ds.features[ds.labels == c]
            d = [np.linalg.norm(F[i] - F[j]) for i in range(len(F)) for j in range(i + 1, len(F))]
            means.append(np.mean(d))
        assert np.all(np.diff(means) > 0)

    def test_invalid_spec(self):
        with pytest.raises(DatasetError):
            synth_clusters(ClusterSpec(num_classes=1, per_class_scales=(1.0,)), make_rng(0))
        with pytest.raises(DatasetError):
            synth_clusters(ClusterSpec(num_classes=2, per_class_scales=(1.0, 0.0)), make_rng(0))
        with pytest.raises(DatasetError):
            synth_clusters(ClusterSpec(num_classes=2, samples_per_class=1, per_class_scales=(1.0, 1.0)),
                           make_rng(0))


class TestCsv:
    def test_string_labels_first_appearance(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f1,f2,label\n1,2,a\n3,4,b\n5,6,a\n")
        ds = load_csv(p, "label")
        assert ds.labels.tolist() == [0, 1, 0]
        assert ds.class_names == ("a", "b")
        np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4], [5, 6]])

    def test_header_only(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f1,label\n")
        with pytest.raises(EmptyDatasetError):
            load_csv(p, "label")

    def test_empty_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("")
        with pytest.raises(EmptyDatasetError):
            load_csv(p, "label")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetFileNotFoundError):
            load_csv(tmp_path / "nope.csv", "label")

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f1,f2,label\n1,2,0\n3,x,1\n")
        with pytest.raises(NonNumericCellError) as exc:
            load_csv(p, "label")
        assert exc.value.row == 2 and exc.value.column == "f2"

    def test_round_trip(self, tmp_path):
        ds = synth_clusters(ClusterSpec(num_classes=3, input_dim=4, samples_per_class=10,
                                        per_class_scales=(0.5, 1.0, 1.5)), make_rng(9))
        export_csv(ds, tmp_path / "rt.csv")
        back = load_csv(tmp_path / "rt.csv", "label")
        np.testing.assert_allclose(back.features, ds.features, atol=1e-12, rtol=0)
        np.testing.assert_array_equal(back.labels, ds.labels)


class TestSplit:
    def _data(self, per_class=100, C=3):
        y = np.repeat(np.arange(C), per_class)
        return LabeledDataset(np.arange(len(y), dtype=float)[:, None], y)

    def test_stratified_counts(self):
        tr, va = split(self._data(), (0.8, 0.2), make_rng(0))
        assert tr.class_counts().tolist() == [80, 80, 80]
        assert va.class_counts().tolist() == [20, 20, 20]
        assert set(tr.features[:, 0]).isdisjoint(va.features[:, 0])
        assert tr.split_tag == "train" and va.split_tag == "val"

    def test_all_train(self):
        ds = self._data()
        tr, va = split(ds, (1.0, 0.0), make_rng(0))
        assert len(va) == 0
        assert sorted(tr.features[:, 0]) == sorted(ds.features[:, 0])

    def test_deterministic(self):
        ds = self._data()
        a, _ = split(ds, (0.7, 0.3), make_rng(4))
        b, _ = split(ds, (0.7, 0.3), make_rng(4))
        np.testing.assert_array_equal(a.features, b.features)

    def test_too_small_class(self):
        ds = LabeledDataset(np.zeros((3, 1)), [0, 0, 1])
        with pytest.raises(DatasetError):
            split(ds, (0.5, 0.5), make_rng(0))

    def test_bad_fractions(self):
        with pytest.raises(DatasetError):
            split(self._data(), (0.8, 0.4), make_rng(0))
