import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from readmit.data import ColumnSpec, DataError, DataTable, Schema
from readmit.stats import (GroupComparison, chi2_2x2, chi2_contingency, chi2_sf, cohort_csv, cohort_table,
                           cohort_text, rank_sum)

from .oracles import chi2_df1_sf, pair_count_u, pearson_chi2


class TestChi2:
    def test_reference_table(self):
        stat, p = chi2_2x2([[10, 20], [20, 10]])
        assert stat == pytest.approx(20 / 3, abs=1e-12)
        assert p == pytest.approx(chi2_df1_sf(20 / 3), abs=1e-12)
        assert p == pytest.approx(0.00983, abs=1e-5)

    def test_independent(self):
        assert chi2_2x2([[10, 10], [20, 20]]) == (0.0, 1.0)

    def test_diagonal(self):
        stat, p = chi2_2x2([[5, 0], [0, 5]])
        assert stat == pytest.approx(10.0, abs=1e-12)
        assert p == pytest.approx(0.001565, abs=1e-6)
        assert not GroupComparison("x", "chi-squared", stat, p).significant

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate table"):
            chi2_2x2([[0, 0], [3, 4]])

    @given(st.floats(0.01, 80))
    @settings(max_examples=100, deadline=None)
    def test_sf_against_erfc(self, x):
        assert abs(chi2_sf(x, 1) - chi2_df1_sf(x)) < 1e-10

    def test_sf_df2_closed_form(self):
        for x in (0.1, 1.0, 5.0, 30.0):
            assert chi2_sf(x, 2) == pytest.approx(np.exp(-x / 2), abs=1e-14)

    @given(st.lists(st.integers(1, 60), min_size=6, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_oracle_and_swaps(self, cells):
        t = np.array(cells).reshape(2, 3)
        stat, p, df = chi2_contingency(t)
        assert df == 2 and 0 <= p <= 1
        assert stat == pytest.approx(pearson_chi2(t), rel=1e-12, abs=1e-12)
        assert chi2_contingency(t[::-1])[0] == pytest.approx(stat, rel=1e-12, abs=1e-12)
        assert chi2_contingency(t[:, ::-1])[0] == pytest.approx(stat, rel=1e-12, abs=1e-12)


class TestRankSum:
    def test_identical_multisets(self):
        a = [1.0, 2.0, 2.0, 5.0]
        u, p = rank_sum(a, list(a))
        assert u == 8.0 and p >= 0.9

    def test_disjoint(self):
        u, p = rank_sum([1, 2, 3], [10, 20, 30])
        assert u == 0.0 == pair_count_u([1, 2, 3], [10, 20, 30])
        assert rank_sum([10, 20, 30], [1, 2, 3])[0] == 9.0
        assert p < 0.1

    def test_all_identical(self):
        assert rank_sum([3, 3], [3, 3, 3]) == (3.0, 1.0)

    def test_power(self):
        rng = np.random.default_rng(0)
        _, p = rank_sum(rng.normal(1, 1, 200), rng.normal(0, 1, 200))
        assert p < 0.001

    def test_scipy_agreement(self):
        from scipy.stats import mannwhitneyu
        rng = np.random.default_rng(4)
        a, b = rng.integers(0, 5, 40), rng.integers(1, 6, 30)
        u, p = rank_sum(a, b)
        ref = mannwhitneyu(a, b, alternative="two-sided", use_continuity=True, method="asymptotic")
        assert u == ref.statistic and p == pytest.approx(ref.pvalue, rel=1e-10)

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=25),
           st.lists(st.integers(-5, 5), min_size=1, max_size=25))
    @settings(max_examples=150, deadline=None)
    def test_properties(self, a, b):
        u, p = rank_sum(a, b)
        assert u == pair_count_u(a, b)
        assert 0.0 <= p <= 1.0
        # strictly increasing transform of both samples
        _, p2 = rank_sum(np.exp(np.array(a) / 3.0), np.exp(np.array(b) / 3.0))
        assert p2 == pytest.approx(p, abs=1e-12)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20, unique=True),
           st.lists(st.floats(-100, 100), min_size=1, max_size=20, unique=True))
    @settings(max_examples=100, deadline=None)
    def test_u_complement(self, a, b):
        assume(not set(a) & set(b))
        assert rank_sum(a, b)[0] + rank_sum(b, a)[0] == len(a) * len(b)


def _cohort(n1, n0, seed=0, shift=0.0):
    rng = np.random.default_rng(seed)
    s = Schema([ColumnSpec("age", "continuous"), ColumnSpec("vent", "binary"),
                ColumnSpec("unit", "categorical"), ColumnSpec("y", "binary", "label")])
    y = np.r_[np.ones(n1), np.zeros(n0)]
    age = rng.normal(60, 15, n1 + n0) + shift * y
    return DataTable(s, {"age": age, "vent": (rng.random(n1 + n0) < 0.5).astype(float),
                         "unit": np.array(rng.choice(["A", "B", "C"], n1 + n0), dtype=object), "y": y})


class TestCohortTable:
    def test_independent_binary_not_significant(self):
        rows = cohort_table(_cohort(500, 500, 1), characteristics=["vent"])
        assert not rows[0].significant and rows[0].test == "chi-squared"

    def test_age_shift_significant(self):
        rows = cohort_table(_cohort(5000, 5000, 2, shift=3.0), characteristics=["age"])
        assert rows[0].significant and rows[0].test == "rank-sum"

    def test_order_and_unknown(self):
        t = _cohort(20, 20)
        assert [r.characteristic for r in cohort_table(t, characteristics=["unit", "age"])] == ["unit", "age"]
        with pytest.raises(DataError):
            cohort_table(t, characteristics=["nope"])

    def test_count_percent_format(self):
        rows = cohort_table(_cohort(40, 60, 3), characteristics=["unit", "age"])
        cell = rows[0].summaries["A"][0]
        count, pct = cell.split(" ", 1)
        assert pct.startswith("(") and pct.endswith("%)")
        assert float(pct[1:-2]) == pytest.approx(100 * int(count) / 40, abs=0.05)
        assert "/" in rows[1].summaries["mean/median"][0]

    def test_renderings(self):
        rows = cohort_table(_cohort(30, 30, 4))
        csv_text = cohort_csv(rows)
        assert csv_text.splitlines()[0].startswith("characteristic,level,group_1,group_0")
        text = cohort_text(rows)
        assert text.splitlines()[1].startswith("---")
        assert cohort_text(rows) == text
