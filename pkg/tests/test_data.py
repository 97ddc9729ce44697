import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmlp import data
from tmlp.errors import (
    BadFractions,
    EmptyDataset,
    LabelOutOfRange,
    MissingColumn,
    MissingHeader,
    MissingKey,
    NotFitted,
    OverlappingColumns,
    UnknownTask,
    UnparsableNumeric,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


class TestSchema:
    def test_minimal_valid(self, tmp_path):
        p = write(tmp_path, "s.json", '{"target":"y","task":"regression","numerical":["a"],"categorical":[]}')
        s = data.parse_schema(p)
        assert s.f1 == 1 and s.f2 == 0
        assert s.feature_names == ("a",)

    def test_overlapping_columns(self):
        with pytest.raises(OverlappingColumns):
            data.schema_from_dict(
                {"target": "y", "task": "regression", "numerical": ["a"], "categorical": ["a"]}
            )

    def test_target_in_features(self):
        with pytest.raises(OverlappingColumns):
            data.schema_from_dict(
                {"target": "y", "task": "regression", "numerical": ["y", "a"], "categorical": []}
            )

    def test_missing_key(self):
        with pytest.raises(MissingKey):
            data.schema_from_dict({"target": "y", "task": "regression", "numerical": []})

    def test_unknown_task(self):
        with pytest.raises(UnknownTask):
            data.schema_from_dict(
                {"target": "y", "task": "ranking", "numerical": ["a"], "categorical": []}
            )

    def test_fourteen_feature_schema(self):
        num = [f"n{i}" for i in range(6)]
        cat = [f"c{i}" for i in range(8)]
        s = data.schema_from_dict(
            {"target": "income", "task": "binclass", "numerical": num, "categorical": cat}
        )
        assert s.n_features == 14


class TestLoadCsv:
    schema = data.schema_from_dict(
        {"target": "y", "task": "regression", "numerical": ["a", "b"], "categorical": ["c"]}
    )

    def test_empty_file_missing_header(self, tmp_path):
        p = write(tmp_path, "e.csv", "")
        with pytest.raises(MissingHeader):
            data.load_csv(p, self.schema)

    def test_header_only_is_empty(self, tmp_path):
        p = write(tmp_path, "h.csv", "a,b,c,y\n")
        with pytest.raises(EmptyDataset):
            data.load_csv(p, self.schema)

    def test_hand_parse_oracle(self, tmp_path):
        # expected values written out by hand from the literal text below
        p = write(
            tmp_path,
            "d.csv",
            "a,b,c,y\n1,2.5,red,10\n-3,0,blue,20\n4.5,1e2,red,30\n0,7,green,40\n",
        )
        ds = data.load_csv(p, self.schema)
        assert ds.n == 4 and ds.n_features == 3
        np.testing.assert_array_equal(
            ds.x_num, np.array([[1.0, 2.5], [-3.0, 0.0], [4.5, 100.0], [0.0, 7.0]])
        )
        assert ds.x_cat.tolist() == [["red"], ["blue"], ["red"], ["green"]]
        np.testing.assert_array_equal(ds.y, np.array([10.0, 20.0, 30.0, 40.0]))

    def test_unparsable_numeric(self, tmp_path):
        p = write(tmp_path, "u.csv", "a,b,c,y\n1,abc,red,10\n")
        with pytest.raises(UnparsableNumeric) as exc:
            data.load_csv(p, self.schema)
        assert exc.value.row == 1 and exc.value.col == "b"

    def test_missing_column(self, tmp_path):
        p = write(tmp_path, "m.csv", "a,c,y\n1,red,10\n")
        with pytest.raises(MissingColumn):
            data.load_csv(p, self.schema)

    def test_target_optional_for_prediction(self, tmp_path):
        p = write(tmp_path, "t.csv", "a,b,c\n1,2,red\n")
        ds = data.load_csv(p, self.schema, require_target=False)
        assert ds.y is None and ds.n == 1

    def test_missing_cells_become_nan(self, tmp_path):
        p = write(tmp_path, "n.csv", "a,b,c,y\n,2,red,1\nNaN,3,blue,2\n")
        ds = data.load_csv(p, self.schema)
        assert np.isnan(ds.x_num[0, 0]) and np.isnan(ds.x_num[1, 0])


def make_ds(x_num, x_cat, y, task="regression"):
    f1 = x_num.shape[1]
    f2 = x_cat.shape[1]
    schema = data.schema_from_dict(
        {
            "target": "y",
            "task": task,
            "numerical": [f"n{i}" for i in range(f1)],
            "categorical": [f"c{i}" for i in range(f2)],
        }
    )
    return data.Dataset(x_num=x_num, x_cat=x_cat, y=y, schema=schema), schema


class TestPreprocessor:
    def test_two_point_standardization(self):
        ds, schema = make_ds(
            np.array([[2.0], [4.0]]), np.zeros((2, 0), dtype=str), np.array([1.0, 2.0])
        )
        prep, out = data.fit_transform(ds, schema)
        np.testing.assert_allclose(out.x_num, [[-1.0], [1.0]])

    def test_constant_column_zeroed(self):
        ds, schema = make_ds(
            np.array([[5.0], [5.0], [5.0]]), np.zeros((3, 0), dtype=str), np.array([1.0, 2.0, 3.0])
        )
        prep, out = data.fit_transform(ds, schema)
        assert prep.num_std[0] == 1.0
        np.testing.assert_array_equal(out.x_num, np.zeros((3, 1)))

    def test_unseen_category_maps_to_unk(self):
        ds, schema = make_ds(
            np.zeros((2, 0)), np.array([["x"], ["y"]]), np.array([0.0, 1.0])
        )
        prep, _ = data.fit_transform(ds, schema)
        test = data.Dataset(
            x_num=np.zeros((1, 0)), x_cat=np.array([["zz"]]), y=None, schema=schema
        )
        out = data.transform(prep, test)
        assert out.x_cat[0, 0] == 0

    def test_seen_categories_start_at_one(self):
        ds, schema = make_ds(
            np.zeros((3, 0)), np.array([["b"], ["a"], ["b"]]), np.array([0.0, 1.0, 2.0])
        )
        prep, out = data.fit_transform(ds, schema)
        assert prep.cat_vocabs[0] == {"a": 1, "b": 2}
        assert out.x_cat[:, 0].tolist() == [2, 1, 2]

    def test_nan_imputed_to_mean(self):
        ds, schema = make_ds(
            np.array([[1.0], [3.0], [np.nan]]), np.zeros((3, 0), dtype=str), np.zeros(3)
        )
        prep, out = data.fit_transform(ds, schema)
        # train mean of finite values is 2, so the imputed cell lands at 0
        assert out.x_num[2, 0] == pytest.approx(0.0)

    def test_regression_target_round_trip(self):
        y = np.array([3.0, -1.0, 7.5, 2.25])
        ds, schema = make_ds(np.zeros((4, 1)), np.zeros((4, 0), dtype=str), y)
        prep, out = data.fit_transform(ds, schema)
        back = data.destandardize_y(prep, out.y)
        np.testing.assert_allclose(back, y, rtol=1e-9)

    def test_not_fitted(self):
        ds, schema = make_ds(np.zeros((2, 1)), np.zeros((2, 0), dtype=str), np.zeros(2))
        prep = data.Preprocessor(schema=schema)
        with pytest.raises(NotFitted):
            data.transform(prep, ds)

    def test_label_mapping_and_out_of_range(self):
        ds, schema = make_ds(
            np.zeros((4, 1)),
            np.zeros((4, 0), dtype=str),
            np.array(["no", "yes", "no", "yes"]),
            task="binclass",
        )
        prep, out = data.fit_transform(ds, schema)
        assert prep.label_classes == ("no", "yes")
        assert out.y.tolist() == [0, 1, 0, 1]
        bad = data.Dataset(
            x_num=np.zeros((1, 1)), x_cat=np.zeros((1, 0), dtype=str),
            y=np.array(["maybe"]), schema=schema,
        )
        with pytest.raises(LabelOutOfRange):
            data.transform(prep, bad)

    def test_transform_does_not_mutate_preprocessor(self):
        ds, schema = make_ds(
            np.array([[1.0], [2.0]]), np.array([["a"], ["b"]]), np.array([0.0, 1.0])
        )
        prep, _ = data.fit_transform(ds, schema)
        before = json.dumps(prep.to_dict(), sort_keys=True)
        other = data.Dataset(
            x_num=np.array([[9.0]]), x_cat=np.array([["zz"]]), y=None, schema=schema
        )
        data.transform(prep, other)
        assert json.dumps(prep.to_dict(), sort_keys=True) == before

    def test_round_trip_serialization(self):
        ds, schema = make_ds(
            np.array([[1.0, 5.0], [2.0, 6.0]]), np.array([["a"], ["b"]]), np.array([0.5, 1.5])
        )
        prep, out = data.fit_transform(ds, schema)
        prep2 = data.Preprocessor.from_dict(json.loads(json.dumps(prep.to_dict())))
        out2 = data.transform(prep2, ds)
        np.testing.assert_array_equal(out.x_num, out2.x_num)
        np.testing.assert_array_equal(out.x_cat, out2.x_cat)
        np.testing.assert_array_equal(out.y, out2.y)


class TestSplit:
    def test_80_10_10_sizes(self):
        ds, _ = make_ds(
            np.arange(100, dtype=np.float64).reshape(100, 1),
            np.zeros((100, 0), dtype=str),
            np.arange(100, dtype=np.float64),
        )
        tr, va, te = data.split(ds, (0.8, 0.1, 0.1), seed=7)
        assert (tr.n, va.n, te.n) == (80, 10, 10)

    def test_determinism(self):
        ds, _ = make_ds(
            np.arange(50, dtype=np.float64).reshape(50, 1),
            np.zeros((50, 0), dtype=str),
            np.arange(50, dtype=np.float64),
        )
        a = data.split_indices(ds, (0.6, 0.2, 0.2), seed=3)
        b = data.split_indices(ds, (0.6, 0.2, 0.2), seed=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_stratified_within_one(self):
        # 30 of class a, 70 of class b
        y = np.array(["a"] * 30 + ["b"] * 70)
        ds, _ = make_ds(
            np.arange(100, dtype=np.float64).reshape(100, 1),
            np.zeros((100, 0), dtype=str),
            y,
            task="binclass",
        )
        fractions = (0.8, 0.1, 0.1)
        tr, va, te = data.split(ds, fractions, seed=1)
        for part, frac in zip((tr, va, te), fractions):
            for cls, total in (("a", 30), ("b", 70)):
                got = int(np.sum(part.y == cls))
                assert abs(got - frac * total) < 1.0

    def test_bad_fractions(self):
        ds, _ = make_ds(
            np.zeros((10, 1)), np.zeros((10, 0), dtype=str), np.zeros(10)
        )
        with pytest.raises(BadFractions):
            data.split(ds, (0.5, 0.2, 0.2), seed=0)
        with pytest.raises(BadFractions):
            data.split(ds, (1.2, -0.1, -0.1), seed=0)

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(min_value=3, max_value=200),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
        case=st.sampled_from([(0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (0.5, 0.25, 0.25)]),
    )
    def test_partition_property(self, n, seed, case):
        ds, _ = make_ds(
            np.arange(n, dtype=np.float64).reshape(n, 1),
            np.zeros((n, 0), dtype=str),
            np.arange(n, dtype=np.float64),
        )
        tr, va, te = data.split_indices(ds, case, seed)
        merged = np.concatenate([tr, va, te])
        assert len(merged) == n
        assert len(np.unique(merged)) == n

    def test_split_file_round_trip(self, tmp_path):
        p = tmp_path / "split.json"
        p.write_text(json.dumps({"train": [0, 1], "valid": [2], "test": [3]}))
        tr, va, te = data.load_split_file(str(p))
        assert tr.tolist() == [0, 1] and va.tolist() == [2] and te.tolist() == [3]
        p2 = tmp_path / "bad.json"
        p2.write_text(json.dumps({"train": [0]}))
        with pytest.raises(MissingKey):
            data.load_split_file(str(p2))


def test_feature_matrix_order():
    ds, schema = make_ds(
        np.array([[1.0, 2.0]]), np.array([["a"]]), np.array([0.0])
    )
    prep, out = data.fit_transform(ds, schema)
    m = data.feature_matrix(out)
    assert m.shape == (1, 3)
    # numerical first, then category codes as floats
    assert m[0, 2] == 1.0
