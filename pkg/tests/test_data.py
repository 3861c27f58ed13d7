import io
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from readmit.data import (ColumnSpec, DataError, DataTable, FeatureSpec, Schema, SyntheticConfig,
                          EICU_PREVALENCE, generate_synthetic, load_csv, missing_mask, one_hot_encode,
                          preset, read_csv, split_stratified, synthetic_schema, table_to_csv, write_csv)
from readmit.evaluation import auc


def _schema(*cols):
    return Schema([ColumnSpec(*c) for c in cols])


SCHEMA = _schema(("age", "continuous"), ("unit_type", "categorical"), ("vent", "binary"),
                 ("y", "binary", "label"))


class TestSchema:
    def test_single_label_required(self):
        with pytest.raises(DataError):
            _schema(("a", "continuous"))
        with pytest.raises(DataError):
            _schema(("a", "binary", "label"), ("b", "binary", "label"))

    def test_label_must_be_binary(self):
        with pytest.raises(DataError):
            _schema(("a", "continuous", "label"))

    def test_unique_names(self):
        with pytest.raises(DataError):
            _schema(("a", "continuous"), ("a", "binary"), ("y", "binary", "label"))

    def test_roundtrip_byte_identical(self, tmp_path):
        text = SCHEMA.dumps()
        assert Schema.loads(text).dumps() == text
        SCHEMA.save(tmp_path / "s.json")
        assert (tmp_path / "s.json").read_text() == text
        assert Schema.load(tmp_path / "s.json") == SCHEMA

    def test_order_preserved(self):
        names = [c["name"] for c in json.loads(SCHEMA.dumps())["columns"]]
        assert names == ["age", "unit_type", "vent", "y"]


class TestLoadCsv:
    def test_one_empty_cell(self):
        text = "age,unit_type,vent,y\n70,MICU,1,0\n,SICU,0,1\n55,MICU,1,0\n"
        table, rep = read_csv(io.StringIO(text), SCHEMA, with_report=True)
        assert table.n_rows == 3 and rep.n_rows == 3
        assert rep.missing["age"] == 1
        assert sum(rep.missing.values()) == 1
        assert np.isnan(table["age"][1])

    def test_missing_label_column(self):
        with pytest.raises(DataError, match="label column not found"):
            read_csv(io.StringIO("age,unit_type,vent\n1,a,0\n"), SCHEMA)

    def test_missing_feature_column_named(self):
        with pytest.raises(DataError, match="vent"):
            read_csv(io.StringIO("age,unit_type,y\n1,a,0\n"), SCHEMA)

    def test_unparseable_numeric(self):
        text = "age,unit_type,vent,y\nabc,MICU,1,0\n3,SICU,0,1\n"
        table, rep = read_csv(io.StringIO(text), SCHEMA, with_report=True)
        assert rep.unparseable["age"] == 1
        assert np.isnan(table["age"][0])

    def test_missing_label_cell_reports_row(self):
        with pytest.raises(DataError, match="row 1"):
            read_csv(io.StringIO("age,unit_type,vent,y\n1,a,0,0\n2,b,1,\n"), SCHEMA)

    def test_header_order_independent(self):
        a = read_csv(io.StringIO("y,vent,age,unit_type\n0,1,70,MICU\n1,0,2.5,SICU\n"), SCHEMA)
        b = read_csv(io.StringIO("age,unit_type,vent,y\n70,MICU,1,0\n2.5,SICU,0,1\n"), SCHEMA)
        assert a.equals(b)

    def test_na_token_and_custom_sentinel(self):
        text = "age,unit_type,vent,y\nNA,NA,NA,0\n-999,MICU,1,1\n"
        t = read_csv(io.StringIO(text), SCHEMA)
        assert np.isnan(t["age"][0]) and t["unit_type"][0] is None and np.isnan(t["vent"][0])
        t2 = read_csv(io.StringIO(text), SCHEMA, missing_tokens=("", "-999"))
        assert np.isnan(t2["age"][1])

    def test_quoted_fields(self):
        text = 'age,unit_type,vent,y\n1,"Med, Surg",0,1\n2,"say ""hi""",1,0\n'
        t = read_csv(io.StringIO(text), SCHEMA)
        assert list(t["unit_type"]) == ["Med, Surg", 'say "hi"']

    def test_file_path(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("age,unit_type,vent,y\n1,a,0,1\n")
        assert load_csv(p, SCHEMA).n_rows == 1


def _random_table(rng, n):
    age = rng.normal(60, 10, n)
    age[rng.random(n) < 0.2] = np.nan
    unit = np.array(rng.choice(["MICU", "SICU", "a,b"], n), dtype=object)
    unit[rng.random(n) < 0.2] = None
    vent = (rng.random(n) < 0.5).astype(float)
    vent[rng.random(n) < 0.2] = np.nan
    y = (rng.random(n) < 0.3).astype(float)
    return DataTable(SCHEMA, {"age": age, "unit_type": unit, "vent": vent, "y": y})


class TestRoundTrip:
    @given(st.integers(0, 10_000), st.integers(1, 40))
    @settings(max_examples=40, deadline=None)
    def test_csv_roundtrip_cell_identical(self, seed, n):
        table = _random_table(np.random.default_rng(seed), n)
        back = read_csv(io.StringIO(table_to_csv(table)), SCHEMA)
        assert back.equals(table)
        for name in SCHEMA.names:
            assert np.array_equal(missing_mask(back[name]), missing_mask(table[name]))

    def test_write_to_path(self, tmp_path):
        table = _random_table(np.random.default_rng(0), 5)
        write_csv(table, tmp_path / "t.csv")
        assert load_csv(tmp_path / "t.csv", SCHEMA).equals(table)


class TestDataTable:
    def test_immutable(self):
        t = _random_table(np.random.default_rng(0), 4)
        with pytest.raises(ValueError):
            t["age"][0] = 1.0

    def test_label_values_checked(self):
        with pytest.raises(DataError):
            DataTable(SCHEMA, {"age": [1.0], "unit_type": ["a"], "vent": [0.0], "y": [2.0]})
        with pytest.raises(DataError):
            DataTable(SCHEMA, {"age": [1.0], "unit_type": ["a"], "vent": [0.0], "y": [np.nan]})

    def test_ragged_rejected(self):
        with pytest.raises(DataError):
            DataTable(SCHEMA, {"age": [1.0, 2.0], "unit_type": ["a"], "vent": [0.0], "y": [1.0]})


class TestOneHot:
    def test_two_levels(self):
        s = _schema(("unit_type", "categorical"), ("y", "binary", "label"))
        t = DataTable(s, {"unit_type": ["MICU", "SICU", "MICU"], "y": [0, 1, 0]})
        enc, schema = one_hot_encode(t)
        assert schema.features == ["unit_type=MICU", "unit_type=SICU"]
        assert enc["unit_type=MICU"].tolist() == [1, 0, 1]
        assert enc["unit_type=SICU"].tolist() == [0, 1, 0]
        assert all(schema[n].kind == "binary" for n in schema.features)

    def test_no_categoricals_identity(self):
        s = _schema(("a", "continuous"), ("y", "binary", "label"))
        t = DataTable(s, {"a": [1.0, 2.0], "y": [0, 1]})
        enc, schema = one_hot_encode(t)
        assert schema == s and enc.equals(t)

    def test_single_level_warns(self):
        s = _schema(("c", "categorical"), ("y", "binary", "label"))
        t = DataTable(s, {"c": ["a", "a"], "y": [0, 1]})
        with pytest.warns(UserWarning):
            enc, schema = one_hot_encode(t)
        assert schema.features == ["c=a"] and enc["c=a"].tolist() == [1, 1]

    def test_missing_rejected(self):
        s = _schema(("c", "categorical"), ("y", "binary", "label"))
        with pytest.raises(DataError):
            one_hot_encode(DataTable(s, {"c": ["a", None], "y": [0, 1]}))

    def test_unseen_level_all_zero(self):
        s = _schema(("c", "categorical"), ("y", "binary", "label"))
        enc, _ = one_hot_encode(DataTable(s, {"c": ["z"], "y": [0]}), levels={"c": ["a", "b"]})
        assert enc["c=a"].tolist() == [0] and enc["c=b"].tolist() == [0]

    def test_column_arithmetic_168_to_186(self):
        # 150 continuous + 18 categorical with 2 levels each: +18 net columns
        cols = [ColumnSpec(f"x{i}", "continuous") for i in range(150)]
        cols += [ColumnSpec(f"c{i}", "categorical") for i in range(18)]
        cols.append(ColumnSpec("y", "binary", "label"))
        s = Schema(cols)
        data = {f"x{i}": np.zeros(4) for i in range(150)}
        data.update({f"c{i}": ["a", "b", "a", "b"] for i in range(18)})
        data["y"] = [0, 1, 0, 1]
        _, out = one_hot_encode(DataTable(s, data))
        assert len(s.features) == 168 and len(out.features) == 186

    @given(st.lists(st.sampled_from(["p", "q", "r", "s"]), min_size=1, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_exactly_one_indicator(self, cells):
        s = _schema(("c", "categorical"), ("y", "binary", "label"))
        y = [i % 2 for i in range(len(cells))]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            enc, schema = one_hot_encode(DataTable(s, {"c": cells, "y": y}))
        M = np.column_stack([enc[n] for n in schema.features])
        assert (M.sum(axis=1) == 1).all()
        assert enc.n_rows == len(cells)
        assert enc.y.tolist() == y


class TestSplit:
    def _table(self, n_pos, n_neg):
        s = _schema(("a", "continuous"), ("y", "binary", "label"))
        y = np.r_[np.ones(n_pos), np.zeros(n_neg)]
        return DataTable(s, {"a": np.arange(n_pos + n_neg, dtype=float), "y": y})

    def test_exact_counts(self):
        train, test = split_stratified(self._table(10, 90), 0.1, 0)
        assert int(test.y.sum()) == 1 and test.n_rows - int(test.y.sum()) == 9
        assert train.n_rows == 90

    def test_deterministic(self):
        t = self._table(10, 90)
        a, b = split_stratified(t, 0.1, 7), split_stratified(t, 0.1, 7)
        assert a[1].equals(b[1]) and a[0].equals(b[0])

    def test_small_class_error(self):
        with pytest.raises(DataError):
            split_stratified(self._table(1, 50), 0.1, 0)

    @given(st.integers(2, 60), st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 99))
    @settings(max_examples=60, deadline=None)
    def test_partition(self, n_pos, n_neg, frac, seed):
        t = self._table(n_pos, n_neg)
        train, test = split_stratified(t, frac, seed)
        ids = np.r_[train["a"], test["a"]]
        assert sorted(ids.tolist()) == list(range(n_pos + n_neg))
        for cls, count in ((1, n_pos), (0, n_neg)):
            assert abs(int((test.y == cls).sum()) - count * frac) <= 1

    def test_eicu_scale_positive_rate(self):
        table, truth = generate_synthetic(preset("eicu-like", seed=0))
        _, test = split_stratified(table, 0.1, 0)
        assert abs(test.y.mean() - 0.0404) < 0.001


class TestSynthetic:
    def test_null_model_prevalence(self):
        cfg = SyntheticConfig(10_000, (FeatureSpec("x", coefficient=0.0),), noise_count=2, seed=1)
        table, truth = generate_synthetic(cfg)
        assert 0.48 <= table.y.mean() <= 0.52
        assert truth.informative == []

    def test_strong_signal_auc(self):
        cfg = SyntheticConfig(10_000, (FeatureSpec("x", coefficient=5.0),), seed=2)
        table, _ = generate_synthetic(cfg)
        assert auc(table.y, table["x"]) >= 0.95

    def test_missing_rate(self):
        cfg = SyntheticConfig(10_000, (FeatureSpec("x", coefficient=1.0), FeatureSpec("b", "binary"),
                                       FeatureSpec("c", "categorical")), noise_count=2,
                              missing_rate=0.2, seed=3)
        table, _ = generate_synthetic(cfg)
        names = table.schema.features
        frac = sum(missing_mask(table[n]).sum() for n in names) / (len(names) * table.n_rows)
        assert 0.19 <= frac <= 0.21
        assert not missing_mask(table.y).any()

    def test_deterministic(self):
        cfg = preset("balanced", 500, seed=9)
        a, _ = generate_synthetic(cfg)
        b, _ = generate_synthetic(cfg)
        assert table_to_csv(a) == table_to_csv(b)

    def test_ground_truth_sidecar(self):
        cfg = SyntheticConfig(50, (FeatureSpec("g", coefficient=2.5), FeatureSpec("h", coefficient=-1.0)),
                              noise_count=1, seed=0)
        _, truth = generate_synthetic(cfg)
        d = json.loads(truth.dumps())
        assert d["coefficients"] == {"g": 2.5, "h": -1.0, "noise_01": 0.0}
        assert d["informative"] == ["g", "h"]

    def test_eicu_like_exact_positive_count(self):
        table, truth = generate_synthetic(preset("eicu-like", seed=5))
        assert table.n_rows == 149_009
        assert abs(truth.n_positive - 6021) <= 1
        assert truth.target_prevalence == pytest.approx(EICU_PREVALENCE)

    def test_mimic_like_prevalence(self):
        table, _ = generate_synthetic(preset("mimic-like", 10_000, seed=1))
        assert table.y.mean() == pytest.approx(0.0874, abs=1e-4)

    def test_presets_share_schema(self):
        assert synthetic_schema(preset("eicu-like", 10)) == synthetic_schema(preset("mimic-like", 10))

    def test_balanced_prevalence(self):
        table, _ = generate_synthetic(preset("balanced", seed=0))
        assert abs(table.y.mean() - 0.5) < 0.04

    def test_validation(self):
        with pytest.raises(DataError):
            SyntheticConfig(0)
        with pytest.raises(DataError):
            SyntheticConfig(5, missing_rate=1.0)
        with pytest.raises(DataError):
            SyntheticConfig(5, (FeatureSpec("x", coefficient=math.inf),))
        with pytest.raises(DataError):
            preset("nope")
