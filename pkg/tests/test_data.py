import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepdgp.data import (DataError, Dataset, fit_standardizer, load_csv,
                         load_named, make_splits)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_by_name_and_index(tmp_path):
    p = write(tmp_path, "a,b,t\n1,2,3\n4,5,6\n7,8,9\n")
    ds = load_csv(p, "t")
    assert ds.X.shape == (3, 2) and ds.y.tolist() == [3, 6, 9]
    assert ds.column_names == ["a", "b"]
    by_index = load_csv(p, -1)
    np.testing.assert_array_equal(by_index.X, ds.X)
    np.testing.assert_array_equal(load_csv(p, "-1").y, ds.y)
    middle = load_csv(p, "b")
    assert middle.column_names == ["a", "t"]


def test_nan_cell_is_reported(tmp_path):
    p = write(tmp_path, "a,t\n1,2\nNaN,3\n")
    with pytest.raises(DataError, match=r"row 3, column 1"):
        load_csv(p)


def test_non_numeric_cell(tmp_path):
    with pytest.raises(DataError, match="'x'"):
        load_csv(write(tmp_path, "a,t\n1,x\n2,3\n"))


def test_missing_file_and_column(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "nope.csv")
    p = write(tmp_path, "a,t\n1,2\n3,4\n")
    with pytest.raises(DataError):
        load_csv(p, "z")
    with pytest.raises(DataError):
        load_csv(p, 5)


def test_ragged_row(tmp_path):
    with pytest.raises(DataError):
        load_csv(write(tmp_path, "a,t\n1,2\n3\n"))


def test_quoted_cells(tmp_path):
    ds = load_csv(write(tmp_path, '"a","t"\n"1.5","2"\n3,4\n'))
    assert ds.X[:, 0].tolist() == [1.5, 3.0]


def test_registry(tmp_path):
    write(tmp_path, "a,t\n1,2\n3,4\n", "toy.csv")
    (tmp_path / "registry.json").write_text(
        json.dumps({"toy": {"path": "toy.csv", "target": "t"}}))
    assert load_named("toy", tmp_path).name == "toy"
    with pytest.raises(DataError):
        load_named("boston2", tmp_path)


def test_bundled_boston():
    ds = load_named("boston", "data")
    assert (ds.N, ds.D) == (506, 13)


def test_standardizer_example():
    ds = Dataset("x", np.array([[1.0, 4.0], [2.0, 4.0], [3.0, 4.0]]),
                 np.array([1.0, 2.0, 3.0]))
    std = fit_standardizer(ds)
    np.testing.assert_allclose(std.transform_inputs(ds.X)[:, 0],
                               [-1.224744871391589, 0.0, 1.224744871391589],
                               rtol=1e-14)
    np.testing.assert_array_equal(std.transform_inputs(ds.X)[:, 1], 0.0)
    assert std.has_constant_columns
    assert std.constant_columns.tolist() == [False, True]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_standardizer_round_trip(N, D, seed):
    rng = np.random.default_rng(seed)
    ds = Dataset("r", rng.normal(size=(N, D)) * 10 + 3, rng.normal(size=N))
    std = fit_standardizer(ds)
    Xs = std.transform_inputs(ds.X)
    np.testing.assert_allclose(std.inverse_inputs(Xs), ds.X, atol=1e-12 * 40)
    np.testing.assert_allclose(std.inverse_target(std.transform_target(ds.y)),
                               ds.y, atol=1e-12)
    np.testing.assert_allclose(Xs.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(Xs.std(0), 1.0, rtol=1e-12)


def test_standardizer_ignores_test_rows():
    rng = np.random.default_rng(0)
    ds = Dataset("r", rng.normal(size=(20, 2)), rng.normal(size=20))
    tr, te = make_splits(ds, 1, 0.75, 0)[0]
    before = fit_standardizer(ds.subset(tr))
    ds.X[te] += 100.0
    ds.y[te] -= 50.0
    after = fit_standardizer(ds.subset(tr))
    np.testing.assert_array_equal(before.input_means, after.input_means)
    assert before.target_std == after.target_std


def test_split_sizes():
    for tr, te in make_splits(506, 5, 0.9, 0):
        assert (tr.size, te.size) == (455, 51)


def test_splits_are_seeded_and_partition():
    a = make_splits(100, 3, 0.8, 42)
    b = make_splits(100, 3, 0.8, 42)
    for (tr, te), (tr2, te2) in zip(a, b):
        np.testing.assert_array_equal(tr, tr2)
        assert not set(tr) & set(te)
        assert sorted(set(tr) | set(te)) == list(range(100))
    # split i depends only on (seed, i, N)
    np.testing.assert_array_equal(make_splits(100, 1, 0.8, 42)[0][0], a[0][0])
    assert not np.array_equal(a[0][0], a[1][0])


@pytest.mark.parametrize("fraction", [0.0, 1.0, 0.01])
def test_degenerate_splits(fraction):
    with pytest.raises(DataError):
        make_splits(10, 1, fraction, 0)


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset("x", np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(DataError):
        Dataset("x", np.array([[np.inf], [1.0]]), np.zeros(2))
