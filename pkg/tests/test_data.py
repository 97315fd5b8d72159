import numpy as np
import pytest

from lossgranger.data import Dataset, Standardizer, dataset_to_csv, read_csv, train_holdout_split, write_csv
from lossgranger.errors import DatasetError


class TestDataset:
    def test_infers_classes_and_names(self):
        ds = Dataset(np.zeros((3, 2)), [0, 2, 1])
        assert ds.n_classes == 3 and ds.feature_names == ["f0", "f1"]

    @pytest.mark.parametrize(
        "features, labels",
        [
            (np.zeros(3), [0, 0, 0]),
            (np.zeros((3, 2)), [0, 0]),
            (np.array([[0.0, np.nan]]), [0]),
            (np.zeros((2, 2)), [0, -1]),
        ],
    )
    def test_rejects(self, features, labels):
        with pytest.raises(DatasetError):
            Dataset(features, labels)

    def test_subset(self):
        ds = Dataset(np.arange(8.0).reshape(4, 2), [0, 1, 2, 3])
        sub = ds.subset([3, 1])
        np.testing.assert_array_equal(sub.labels, [3, 1])
        assert sub.n_classes == 4


class TestCsv:
    def test_round_trip_exact(self, tmp_path):
        g = np.random.default_rng(0)
        ds = Dataset(g.normal(size=(5, 3)), [0, 1, 0, 2, 1], ["a", "b", "c"])
        path = tmp_path / "d.csv"
        write_csv(ds, path)
        back = read_csv(path)
        assert back.features.tobytes() == ds.features.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.feature_names == ["a", "b", "c"]
        assert dataset_to_csv(ds).splitlines()[0] == "a,b,c,label"

    def test_label_column_anywhere(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("label,x,y\n1,0.5,2\n0,1,1\n")
        ds = read_csv(path)
        np.testing.assert_array_equal(ds.features, [[0.5, 2.0], [1.0, 1.0]])
        np.testing.assert_array_equal(ds.labels, [1, 0])

    @pytest.mark.parametrize("text", ["", "x,y\n1,2\n", "x,label\n1\n", "x,label\nabc,0\n", "x,label\n1.0,0.5\n"])
    def test_bad_files(self, tmp_path, text):
        path = tmp_path / "d.csv"
        path.write_text(text)
        with pytest.raises(DatasetError):
            read_csv(path)

    def test_missing(self, tmp_path):
        with pytest.raises(DatasetError):
            read_csv(tmp_path / "nope.csv")


def test_split_is_partition():
    train, hold = train_holdout_split(50, 0.2, np.random.default_rng(1))
    assert len(hold) == 10
    assert sorted(np.concatenate([train, hold]).tolist()) == list(range(50))


def test_standardizer():
    X = np.array([[1.0, 5.0], [3.0, 5.0]])
    std = Standardizer.fit(X)
    out = std.transform(Dataset(X, [0, 1]))
    np.testing.assert_array_equal(out.features, [[-1.0, 0.0], [1.0, 0.0]])
