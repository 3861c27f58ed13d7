"""Cohort filters, missingness-based column dropping, imputation,
standardisation and ratio-controlled random undersampling.

Statistics are fitted once on a training table, frozen in a
:class:`FittedPreprocessor`, and replayed unchanged on blind-test and
external tables.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import (ColumnSpec, DataError, DataTable, Schema, missing_mask,
                   one_hot_encode)

FORMAT_VERSION = 1

_COMPARATORS = {
    "<": "<", "<=": "<=", "≤": "<=", ">": ">", ">=": ">=", "≥": ">=",
    "=": "==", "==": "==", "missing": "missing",
}


@dataclass(frozen=True)
class FilterRule:
    """Exclude rows whose ``column`` satisfies ``comparator bound``.

    A MISSING cell never satisfies a comparison; only the ``missing``
    comparator selects MISSING cells.
    """
    column: str
    comparator: str
    bound: float | str | None = None

    def __post_init__(self):
        if self.comparator not in _COMPARATORS:
            raise DataError(f"unknown comparator {self.comparator!r}")
        object.__setattr__(self, "comparator", _COMPARATORS[self.comparator])

    def __str__(self) -> str:
        if self.comparator == "missing":
            return f"{self.column} missing"
        return f"{self.column} {self.comparator} {self.bound}"

    def validate(self, schema: Schema) -> None:
        if self.column not in schema:
            raise DataError(f"filter rule {self}: column {self.column!r} not in schema")
        kind = schema[self.column].kind
        if self.comparator == "missing":
            return
        if kind == "categorical":
            if self.comparator != "==":
                raise DataError(f"filter rule {self}: ordered comparison on categorical column")
            if not isinstance(self.bound, str):
                raise DataError(f"filter rule {self}: categorical bound must be a token")
        elif isinstance(self.bound, str) or self.bound is None:
            raise DataError(f"filter rule {self}: numeric column needs a numeric bound")

    def matches(self, values: np.ndarray) -> np.ndarray:
        missing = missing_mask(values)
        if self.comparator == "missing":
            return missing
        if values.dtype == object:
            return np.fromiter((v == self.bound for v in values), dtype=bool, count=len(values))
        with np.errstate(invalid="ignore"):
            if self.comparator == "<":
                hit = values < self.bound
            elif self.comparator == "<=":
                hit = values <= self.bound
            elif self.comparator == ">":
                hit = values > self.bound
            elif self.comparator == ">=":
                hit = values >= self.bound
            else:
                hit = values == self.bound
        return hit & ~missing

    def to_dict(self) -> dict:
        return {"column": self.column, "comparator": self.comparator, "bound": self.bound}

    @classmethod
    def from_dict(cls, d) -> "FilterRule":
        return cls(d["column"], d["comparator"], d.get("bound"))


# adult patients, >= 4 h ICU stay, plausible anthropometrics
CLINICAL_FILTERS = (
    FilterRule("age", "<", 18),
    FilterRule("icu_hours", "<", 4),
    FilterRule("admission_weight", ">", 260),
    FilterRule("admission_height", ">", 240),
)


@dataclass
class FilterReport:
    n_input: int
    n_output: int
    excluded: list[tuple[str, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_output": self.n_output,
            "rules": [{"rule": r, "excluded": n} for r, n in self.excluded],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def apply_filters(table: DataTable, rules: Sequence[FilterRule]) -> tuple[DataTable, FilterReport]:
    """Drop rows matching any rule.

    Rules are applied in order and each counts only the rows it removes from
    what the previous rules left, so the counts sum to the total exclusion
    (the numbers an exclusion-flow diagram needs).
    """
    for rule in rules:
        rule.validate(table.schema)
    keep = np.ones(table.n_rows, dtype=bool)
    counts = []
    for rule in rules:
        hit = rule.matches(table[rule.column]) & keep
        counts.append((str(rule), int(hit.sum())))
        keep &= ~hit
    out = table.take(np.flatnonzero(keep))
    return out, FilterReport(table.n_rows, out.n_rows, counts)


@dataclass(frozen=True)
class PreprocessConfig:
    missingness_threshold: float = 0.20
    categorical_fill: str = "UNKNOWN"
    undersample_ratio: Fraction | float | str | None = None

    def __post_init__(self):
        if not 0.0 < self.missingness_threshold <= 1.0:
            raise DataError("missingness_threshold must be in (0, 1]")


@dataclass
class FittedPreprocessor:
    source_schema: Schema
    missingness: dict[str, float]
    dropped: list[str]
    impute: dict[str, float | str]
    levels: dict[str, list[str]]
    standardize: dict[str, tuple[float, float]]
    feature_names: list[str]

    @property
    def dropped_columns(self) -> dict[str, float]:
        return {name: self.missingness[name] for name in self.dropped}

    def to_dict(self) -> dict:
        return {
            "format": "readmit-preprocessor",
            "version": FORMAT_VERSION,
            "source_schema": self.source_schema.to_dict(),
            "missingness": self.missingness,
            "dropped": self.dropped,
            "impute": self.impute,
            "levels": self.levels,
            "standardize": {k: {"mean": m, "std": s} for k, (m, s) in self.standardize.items()},
            "feature_names": self.feature_names,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "FittedPreprocessor":
        d = json.loads(text)
        if d.get("format") != "readmit-preprocessor" or d.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported preprocessor file: format={d.get('format')!r} "
                            f"version={d.get('version')!r}")
        return cls(
            source_schema=Schema.from_dict(d["source_schema"]),
            missingness=d["missingness"],
            dropped=d["dropped"],
            impute=d["impute"],
            levels=d["levels"],
            standardize={k: (v["mean"], v["std"]) for k, v in d["standardize"].items()},
            feature_names=d["feature_names"],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FittedPreprocessor":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def transform(self, table: DataTable) -> DataTable:
        return transform(self, table)


def _fill_value(values: np.ndarray, kind: str) -> float:
    observed = values[~np.isnan(values)]
    # an all-missing column can only survive with threshold 1; it becomes constant 0
    if len(observed) == 0:
        return 0.0
    if kind == "binary":
        # the mode keeps the column 0/1 so it still parses as binary downstream
        return 1.0 if observed.mean() > 0.5 else 0.0
    return float(observed.mean())


def fit(table: DataTable, config: PreprocessConfig = PreprocessConfig()) -> FittedPreprocessor:
    """Learn drop list, imputation values, one-hot levels and z-score parameters.

    A feature is dropped when its MISSING fraction is >= the threshold (a
    threshold of 1 keeps everything). Continuous and binary features are
    imputed with the mean (continuous) or mode (binary, ties to 0) of
    observed cells; categoricals with
    ``config.categorical_fill``, which then becomes a level of its own.
    Standardisation parameters use the population standard deviation of the
    imputed column and apply to continuous features only.
    """
    if table.n_rows == 0:
        raise DataError("cannot fit a preprocessor on an empty table")
    schema = table.schema
    missingness = {}
    dropped = []
    for name in schema.features:
        frac = float(missing_mask(table[name]).mean())
        missingness[name] = frac
        if config.missingness_threshold < 1.0 and frac >= config.missingness_threshold:
            dropped.append(name)
    kept = [n for n in schema.features if n not in dropped]
    if not kept:
        raise DataError("no usable features: every feature exceeds the missingness threshold")

    impute: dict[str, float | str] = {}
    levels: dict[str, list[str]] = {}
    standardize: dict[str, tuple[float, float]] = {}
    feature_names: list[str] = []
    for name in kept:
        spec = schema[name]
        values = table[name]
        if spec.kind == "categorical":
            impute[name] = config.categorical_fill
            observed = {v for v in values if v is not None}
            if missing_mask(values).any():
                observed.add(config.categorical_fill)
            levels[name] = sorted(observed)
            feature_names += [f"{name}={lvl}" for lvl in levels[name]]
            continue
        fill = _fill_value(values, spec.kind)
        impute[name] = fill
        feature_names.append(name)
        if spec.kind == "continuous":
            filled = np.where(np.isnan(values), fill, values)
            if filled.max() == filled.min():
                standardize[name] = (float(filled[0]), 0.0)
            else:
                standardize[name] = (float(filled.mean()), float(filled.std()))
    return FittedPreprocessor(schema, missingness, dropped, impute, levels, standardize, feature_names)


def refit(template: FittedPreprocessor, table: DataTable) -> FittedPreprocessor:
    """Recompute imputation and scaling on ``table`` keeping the column
    decisions (drops, one-hot levels) of ``template``.

    Used inside cross-validation so fold statistics come from training
    rows only while every fold shares one feature layout.
    """
    impute = dict(template.impute)
    standardize = {}
    for name, fill in template.impute.items():
        if isinstance(fill, str):
            continue
        values = table[name]
        fill = _fill_value(values, template.source_schema[name].kind)
        impute[name] = fill
        if name in template.standardize:
            filled = np.where(np.isnan(values), fill, values)
            if len(filled) == 0 or filled.max() == filled.min():
                standardize[name] = (float(filled[0]) if len(filled) else 0.0, 0.0)
            else:
                standardize[name] = (float(filled.mean()), float(filled.std()))
    return FittedPreprocessor(template.source_schema, dict(template.missingness), list(template.dropped),
                              impute, dict(template.levels), standardize, list(template.feature_names))


def transform(pre: FittedPreprocessor, table: DataTable) -> DataTable:
    """Replay fitted preprocessing on any table sharing the source columns."""
    src = pre.source_schema
    for name in src.features:
        if name in pre.dropped:
            continue
        if name not in table.schema:
            raise DataError(f"column {name!r} present at fit time is absent")
        if table.schema[name].kind != src[name].kind:
            raise DataError(f"column {name!r} changed kind since fit")
    if src.label not in table.schema:
        raise DataError(f"label column not found: {src.label!r}")

    specs: list[ColumnSpec] = []
    columns: dict[str, np.ndarray] = {}
    for spec in src.columns:
        if spec.role in ("excluded",) or spec.name in pre.dropped:
            continue
        if spec.role != "feature":
            if spec.name in table.schema:
                specs.append(spec)
                columns[spec.name] = table[spec.name]
            continue
        values = table[spec.name]
        fill = pre.impute[spec.name]
        if spec.kind == "categorical":
            values = np.array([fill if v is None else v for v in values], dtype=object)
        else:
            values = np.where(np.isnan(values), fill, values)
            if spec.name in pre.standardize:
                mu, sigma = pre.standardize[spec.name]
                values = np.zeros_like(values) if sigma == 0.0 else (values - mu) / sigma
        specs.append(spec)
        columns[spec.name] = values
    imputed = DataTable(Schema(tuple(specs)), columns)
    encoded, _ = one_hot_encode(imputed, pre.levels)
    return encoded


def fit_transform(table: DataTable, config: PreprocessConfig = PreprocessConfig()
                  ) -> tuple[FittedPreprocessor, DataTable]:
    pre = fit(table, config)
    return pre, transform(pre, table)


def _as_fraction(ratio) -> Fraction:
    if isinstance(ratio, str) and ":" in ratio:
        left, right = ratio.split(":")
        return Fraction(right.strip()) / Fraction(left.strip())
    value = Fraction(ratio)
    if value <= 0:
        raise DataError(f"undersample ratio must be positive, got {ratio!r}")
    return value


def undersample(table: DataTable, ratio, seed: int) -> DataTable:
    """Keep every positive row and ``floor(ratio * n_positive)`` random negatives.

    ``ratio`` is the number of majority rows per minority row (``1`` for
    1:1, ``9`` for 1:9); strings like ``"1:9"`` are accepted. Output rows
    are shuffled. When the majority class is too small, all of it is kept
    and a warning is emitted.
    """
    r = _as_fraction(ratio)
    y = table.y
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    want = math.floor(r * len(pos))
    rng = np.random.default_rng(seed)
    if want > len(neg):
        warnings.warn(f"undersampling ratio 1:{r} unreachable: need {want} majority rows, "
                      f"have {len(neg)}; keeping all", stacklevel=2)
        chosen = neg
    else:
        chosen = rng.choice(neg, size=want, replace=False)
    rows = rng.permutation(np.concatenate([pos, chosen]))
    return table.take(rows)


def parse_rules(items: Iterable) -> list[FilterRule]:
    """Rules from config: the string ``"clinical"`` or a list of rule dicts."""
    if items is None:
        return []
    if isinstance(items, str):
        if items == "clinical":
            return list(CLINICAL_FILTERS)
        if items == "none":
            return []
        raise DataError(f"unknown filter preset {items!r}")
    return [FilterRule.from_dict(d) for d in items]
