"""Two-group cohort comparisons: Pearson chi-squared for proportions and the
Wilcoxon rank-sum (Mann-Whitney U) test for continuous variables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfc, gammaincc
from scipy.stats import rankdata

from .data import DataError, DataTable, missing_mask

SIGNIFICANCE = 0.001


def chi2_sf(statistic: float, df: int) -> float:
    """Upper tail of the chi-square distribution (regularized upper incomplete gamma)."""
    if statistic <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, statistic / 2.0))


def chi2_contingency(counts) -> tuple[float, float, int]:
    """Pearson chi-squared test of independence, no continuity correction.

    Returns ``(statistic, p_value, df)``.
    """
    obs = np.asarray(counts, dtype=np.float64)
    if obs.ndim != 2 or min(obs.shape) < 2:
        raise ValueError("need an r x c table with r, c >= 2")
    if (obs < 0).any():
        raise ValueError("counts must be non-negative")
    rows, cols = obs.sum(axis=1), obs.sum(axis=0)
    if (rows == 0).any() or (cols == 0).any():
        raise ValueError("degenerate table: a row or column total is zero")
    expected = np.outer(rows, cols) / obs.sum()
    stat = float(((obs - expected) ** 2 / expected).sum())
    df = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return stat, chi2_sf(stat, df), df


def chi2_2x2(counts) -> tuple[float, float]:
    obs = np.asarray(counts)
    if obs.shape != (2, 2):
        raise ValueError(f"expected a 2x2 table, got shape {obs.shape}")
    stat, p, _ = chi2_contingency(obs)
    return stat, p


def rank_sum(a, b) -> tuple[float, float]:
    """Mann-Whitney U and two-sided p-value.

    ``U`` counts pairs with ``a > b`` (ties count one half). The p-value
    uses the normal approximation with tie-corrected variance and a 0.5
    continuity correction; it is 1 when every value is identical.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples need at least one value")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    _, ties = np.unique(pooled, return_counts=True)
    tie_term = float((ties ** 3 - ties).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return u, 1.0
    z = (abs(u - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    if z <= 0:
        return u, 1.0
    p = float(erfc(z / math.sqrt(2.0)))
    return u, min(1.0, max(0.0, p))


@dataclass
class GroupComparison:
    characteristic: str
    test: str
    statistic: float
    p_value: float
    summaries: dict[str, tuple[str, str]] = field(default_factory=dict)
    n: tuple[int, int] = (0, 0)

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE


def _pct(count: int, total: int) -> str:
    return f"{count} ({100.0 * count / total:.1f}%)" if total else f"{count} (-)"


def cohort_table(table: DataTable, group: str | None = None,
                 characteristics: Sequence[str] | None = None) -> list[GroupComparison]:
    """Compare the ``group == 1`` rows against ``group == 0`` rows.

    Categorical and binary characteristics report per-level ``count (percent)``
    with a chi-squared test; continuous ones report ``mean/median`` with the
    rank-sum test. MISSING cells are left out of each comparison.
    """
    group = group or table.schema.label
    if group not in table.schema or table.schema[group].kind != "binary":
        raise DataError(f"group column {group!r} must be a binary column")
    g = table[group]
    if missing_mask(g).any():
        raise DataError(f"group column {group!r} has MISSING cells")
    names = list(characteristics) if characteristics is not None else \
        [c for c in table.schema.features]
    out = []
    for name in names:
        if name not in table.schema:
            raise DataError(f"unknown characteristic {name!r}")
        kind = table.schema[name].kind
        values = table[name]
        ok = ~missing_mask(values)
        in1, in0 = ok & (g == 1), ok & (g == 0)
        if kind == "continuous":
            x1, x0 = values[in1].astype(float), values[in0].astype(float)
            if len(x1) == 0 or len(x0) == 0:
                raise DataError(f"characteristic {name!r} has no observed values in one group")
            u, p = rank_sum(x1, x0)
            summaries = {"mean/median": (f"{x1.mean():.2f}/{np.median(x1):.2f}",
                                         f"{x0.mean():.2f}/{np.median(x0):.2f}")}
            out.append(GroupComparison(name, "rank-sum", u, p, summaries, (len(x1), len(x0))))
            continue
        if kind == "binary":
            levels = [1.0, 0.0]
            labels = ["1", "0"]
        else:
            levels = sorted({v for v in values[ok]})
            labels = list(levels)
        counts = np.array([[np.sum(in1 & (values == lvl)), np.sum(in0 & (values == lvl))]
                           for lvl in levels])
        n1, n0 = int(in1.sum()), int(in0.sum())
        try:
            stat, p, _ = chi2_contingency(counts)
        except ValueError:
            stat, p = 0.0, 1.0  # a single observed level: nothing to test
        summaries = {lab: (_pct(int(c1), n1), _pct(int(c0), n0)) for lab, (c1, c0) in zip(labels, counts)}
        out.append(GroupComparison(name, "chi-squared", stat, p, summaries, (n1, n0)))
    return out


_HEADER = ["characteristic", "level", "group_1", "group_0", "test", "statistic", "p_value", "significant"]


def _rows(comparisons):
    for c in comparisons:
        for i, (level, (s1, s0)) in enumerate(c.summaries.items()):
            first = i == 0
            yield [c.characteristic if first else "", level, s1, s0,
                   c.test if first else "", f"{c.statistic:.4f}" if first else "",
                   f"{c.p_value:.3g}" if first else "", ("yes" if c.significant else "no") if first else ""]


def cohort_csv(comparisons: Sequence[GroupComparison]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_HEADER)
    for row in _rows(comparisons):
        w.writerow(row)
    return buf.getvalue()


def cohort_text(comparisons: Sequence[GroupComparison]) -> str:
    """Fixed-width rendering of the comparison table."""
    rows = [_HEADER] + list(_rows(comparisons))
    widths = [max(len(r[j]) for r in rows) for j in range(len(_HEADER))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
