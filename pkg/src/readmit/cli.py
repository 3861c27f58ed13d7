"""Command-line pipeline: synth | preprocess | select | train | evaluate |
calibrate | lr | explain | report | run.

Every command reads one JSON config (``--config``) whose values can be
overridden by flags; the flag always wins. Outputs land under the output
directory (``--out``, else ``$READMIT_OUT``, else ``output_dir`` in the
config), one sub-directory per stage.

Exit codes:
    0  all requested stages completed
    1  unexpected internal error
    2  configuration or usage error
    3  input data error (missing file, schema mismatch, bad cells)
    4  malformed or incompatible model / preprocessor file
    5  numerical failure (e.g. calibration fit did not converge)
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DataError, DataTable, Schema, generate_synthetic, load_csv, preset,
                   split_stratified, write_csv)
from .diagnostics import ConvergenceError, calibration_report, default_thresholds, lr_sweep
from .evaluation import (cross_validate, full_metrics, greedy_forward_select, pr_points,
                         roc_points)
from .explain import beeswarm_export, forest_shap, summary_ranking
from .learner import ForestParams, ModelFormatError, RandomForestModel, fit_forest
from .plots import beeswarm, line_plot
from .preprocess import (CLINICAL_FILTERS, FittedPreprocessor, PreprocessConfig, apply_filters,
                         fit as fit_preprocessor, parse_rules, transform, undersample)
from .stats import cohort_csv, cohort_table, cohort_text

log = logging.getLogger("readmit")

ENV_OUT = "READMIT_OUT"
EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5
STAGES = ("synth", "preprocess", "select", "train", "evaluate", "calibrate", "lr", "explain", "report")

DEFAULTS = {
    "seed": None,
    "output_dir": "readmit-out",
    "threads": None,
    "record_timings": False,
    "data": {
        "train": None,
        "blind_test": None,
        "external": None,
        "schema": None,
        "missing_tokens": ["", "NA"],
        "blind_fraction": 0.1,
    },
    "synth": {"preset": "eicu-like", "n_rows": 20000, "external_preset": "auto",
              "external_n_rows": 10000},
    "preprocess": {"filters": "auto", "missingness_threshold": 0.2,
                   "categorical_fill": "UNKNOWN", "undersample_ratio": 1},
    "forest": {"n_trees": 80, "max_depth": None, "min_samples_leaf": 1,
               "features_per_split": "auto", "bootstrap": True},
    "cv_folds": 10,
    "selection": {"enabled": True, "k": 5, "max_features": None, "min_gain": 0.0,
                  "forest": {"n_trees": 20, "max_depth": 8, "min_samples_leaf": 5}},
    "thresholds": {"start": 0.01, "stop": 0.99, "step": 0.01},
    "pretest": None,
    "calibration_bins": 10,
    "explain": {"max_rows": 500, "top_k": 20},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
        # relative data paths are taken relative to the config file
        for key in ("train", "blind_test", "external", "schema"):
            val = user.get("data", {}).get(key)
            if val and not Path(val).is_absolute():
                user["data"][key] = str(p.parent / val)
        cfg = _merge(cfg, user)
    if os.environ.get(ENV_OUT):
        cfg["output_dir"] = os.environ[ENV_OUT]
    cfg = _merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    if cfg["seed"] is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


def config_snapshot(cfg: dict) -> dict:
    """The config minus run-environment keys that must not change artifacts."""
    snap = copy.deepcopy(cfg)
    for key in ("output_dir", "threads", "record_timings"):
        snap.pop(key, None)
    return snap


class Run:
    """Resolved config plus output-directory helpers shared by all stages."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.seed = int(cfg["seed"])
        self.threads = int(cfg["threads"] or os.cpu_count() or 1)
        self.timings: dict[str, float] = {}
        self.ingestion: dict[str, dict] = {}

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write(self, text: str, *parts) -> Path:
        p = self.path(*parts)
        p.write_text(text, encoding="utf-8")
        return p

    def write_json(self, obj, *parts) -> Path:
        return self.write(json.dumps(obj, indent=2, allow_nan=False) + "\n", *parts)

    def read_json(self, *parts):
        p = self.out.joinpath(*parts)
        if not p.is_file():
            raise DataError(f"{p} not found; run the stage that produces it first")
        return json.loads(p.read_text(encoding="utf-8"))

    # data locations, falling back to synth outputs
    def data_path(self, key: str) -> Path | None:
        val = self.cfg["data"].get(key)
        if val:
            return Path(val)
        fallback = {"train": ("data", "train.csv"), "external": ("data", "external.csv"),
                    "schema": ("data", "schema.json")}.get(key)
        if fallback and self.out.joinpath(*fallback).is_file():
            return self.out.joinpath(*fallback)
        return None

    def schema(self) -> Schema:
        p = self.data_path("schema")
        if p is None or not p.is_file():
            raise DataError("no schema file: set data.schema or run synth")
        return Schema.load(p)

    def load_raw(self, key: str) -> DataTable | None:
        p = self.data_path(key)
        if p is None:
            return None
        if not p.is_file():
            raise DataError(f"{key} data file not found: {p}")
        table, report = load_csv(p, self.schema(), self.cfg["data"]["missing_tokens"], with_report=True)
        self.ingestion[key] = report.to_dict()
        return table

    def processed(self, name: str) -> DataTable | None:
        p = self.out / "preprocess" / f"{name}.csv"
        if not p.is_file():
            return None
        return load_csv(p, Schema.load(self.out / "preprocess" / "schema.json"), ("",))

    def forest_params(self, section: dict | None = None) -> ForestParams:
        base = dict(self.cfg["forest"])
        if section:
            base.update(section)
        return ForestParams(seed=self.seed, **base)

    def features(self) -> list[str]:
        sel = self.out / "select" / "features.json"
        if sel.is_file():
            return json.loads(sel.read_text(encoding="utf-8"))["features"]
        return json.loads((self.out / "preprocess" / "features.json").read_text(encoding="utf-8"))["features"]

    def model(self) -> RandomForestModel:
        p = self.out / "model" / "model.json"
        if not p.is_file():
            raise DataError(f"{p} not found; run train first")
        return RandomForestModel.load(p)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_synth(run: Run) -> None:
    sc = run.cfg["synth"]
    table, truth = generate_synthetic(preset(sc["preset"], sc.get("n_rows"), run.seed))
    write_csv(table, run.path("data", "train.csv"))
    table.schema.save(run.path("data", "schema.json"))
    run.write(truth.dumps(), "data", "ground_truth.json")
    log.info("synth: %s n=%d positives=%d", sc["preset"], truth.n_rows, truth.n_positive)
    ext_preset = sc.get("external_preset")
    if ext_preset == "auto":
        # the two clinical presets share a schema and serve as each other's external cohort
        ext_preset = {"eicu-like": "mimic-like", "mimic-like": "eicu-like"}.get(sc["preset"])
    if ext_preset:
        ext, ext_truth = generate_synthetic(preset(ext_preset, sc.get("external_n_rows"), run.seed + 1))
        if ext.schema != table.schema:
            raise ConfigError("external preset must share the training schema")
        write_csv(ext, run.path("data", "external.csv"))
        run.write(ext_truth.dumps(), "data", "external_ground_truth.json")


def _filter_rules(run: Run, schema: Schema):
    spec = run.cfg["preprocess"]["filters"]
    if spec == "auto":
        return [r for r in CLINICAL_FILTERS if r.column in schema]
    return parse_rules(spec)


def cmd_preprocess(run: Run) -> None:
    pc = run.cfg["preprocess"]
    raw = run.load_raw("train")
    if raw is None:
        raise DataError("no training data: set data.train or run synth")
    rules = _filter_rules(run, raw.schema)
    cohort, report = apply_filters(raw, rules)
    run.write(report.dumps(), "preprocess", "filter_report.json")

    comparisons = cohort_table(cohort)
    run.write(cohort_csv(comparisons), "preprocess", "cohort_table.csv")
    run.write(cohort_text(comparisons), "preprocess", "cohort_table.txt")

    blind_raw = run.load_raw("blind_test")
    if blind_raw is None:
        train_raw, blind_raw = split_stratified(cohort, run.cfg["data"]["blind_fraction"], run.seed)
    else:
        train_raw = cohort
        blind_raw, _ = apply_filters(blind_raw, rules)
    external_raw = run.load_raw("external")
    if external_raw is not None:
        external_raw, ext_report = apply_filters(external_raw, rules)
        run.write(ext_report.dumps(), "preprocess", "external_filter_report.json")

    config = PreprocessConfig(pc["missingness_threshold"], pc["categorical_fill"])
    pre = fit_preprocessor(train_raw, config)
    pre.save(run.path("preprocess", "preprocessor.json"))
    # raw (filtered) training rows are kept for per-fold preprocessing in CV
    write_csv(train_raw, run.path("preprocess", "train_raw.csv"))
    train = transform(pre, train_raw)
    train.schema.save(run.path("preprocess", "schema.json"))
    write_csv(train, run.path("preprocess", "train.csv"))
    write_csv(transform(pre, blind_raw), run.path("preprocess", "blind.csv"))
    if external_raw is not None:
        write_csv(transform(pre, external_raw), run.path("preprocess", "external.csv"))
    run.write_json({"features": pre.feature_names}, "preprocess", "features.json")
    run.write_json(run.ingestion, "preprocess", "ingestion.json")
    log.info("preprocess: %d -> %d rows after filters; %d features, dropped %s",
             report.n_input, report.n_output, len(pre.feature_names), pre.dropped)


def _train_ratio(run: Run):
    ratio = run.cfg["preprocess"].get("undersample_ratio")
    return None if ratio in (None, "none") else ratio


def cmd_select(run: Run) -> None:
    sel = run.cfg["selection"]
    train = run.processed("train")
    if train is None:
        raise DataError("preprocessed training data missing; run preprocess first")
    if not sel.get("enabled", True):
        run.write_json({"features": train.schema.features}, "select", "features.json")
        return
    params = run.forest_params(sel.get("forest"))
    trace = greedy_forward_select(train, params, k=sel.get("k") or run.cfg["cv_folds"], seed=run.seed,
                                  max_features=sel.get("max_features"), min_gain=sel.get("min_gain", 0.0),
                                  undersample_ratio=_train_ratio(run), threads=run.threads)
    run.write(trace.dumps(), "select", "trace.json")
    run.write(trace.to_csv(), "select", "trace.csv")
    run.write_json({"features": trace.selected, "stop_reason": trace.stop_reason}, "select", "features.json")
    log.info("select: %s (%s)", trace.selected, trace.stop_reason)


def cmd_train(run: Run) -> None:
    train = run.processed("train")
    if train is None:
        raise DataError("preprocessed training data missing; run preprocess first")
    ratio = _train_ratio(run)
    if ratio is not None:
        train = undersample(train, ratio, run.seed)
    X, y, names = train.feature_matrix(run.features())
    model = fit_forest(X, y, run.forest_params(), names, threads=run.threads)
    model.save(run.path("model", "model.json"))
    log.info("train: %d trees on %d rows x %d features", len(model.trees), len(y), len(names))


def _curves(run: Run, name: str, y, p) -> None:
    roc = roc_points(y, p)
    run.write("threshold,fpr,tpr\n" + "".join(f"{_num(t)},{_num(a)},{_num(b)}\n" for t, a, b in roc),
              "evaluate", f"roc_{name}.csv")
    pr = pr_points(y, p)
    run.write("threshold,recall,precision\n" + "".join(f"{_num(t)},{_num(a)},{_num(b)}\n" for t, a, b in pr),
              "evaluate", f"pr_{name}.csv")


def _num(v) -> str:
    v = float(v)
    return ("inf" if v > 0 else "-inf") if math.isinf(v) else repr(v)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _write_predictions(run: Run, name: str, y, p) -> None:
    run.write("y,p\n" + "".join(f"{int(a)},{_num(b)}\n" for a, b in zip(y, p)), "evaluate", f"predictions_{name}.csv")


def _read_predictions(run: Run, name: str):
    path = run.out / "evaluate" / f"predictions_{name}.csv"
    if not path.is_file():
        return None
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(int), data[:, 1]


def cmd_evaluate(run: Run) -> None:
    model = run.model()
    features = list(model.feature_names)
    params = run.forest_params()
    raw_path = run.out / "preprocess" / "train_raw.csv"
    pre = FittedPreprocessor.load(run.out / "preprocess" / "preprocessor.json")
    raw = load_csv(raw_path, pre.source_schema, ("",))
    cv = cross_validate(raw, params, run.cfg["cv_folds"], run.seed, features=features,
                        undersample_ratio=_train_ratio(run), preprocess=pre, threads=run.threads)
    y_cv = raw.y
    _write_predictions(run, "cv", y_cv, cv.oof_proba)
    _curves(run, "cv", y_cv, cv.oof_proba)
    result = {"cv": {**cv.to_dict(), "pooled": full_metrics(y_cv, cv.oof_proba).to_dict()}}
    for name in ("blind", "external"):
        table = run.processed(name)
        if table is None:
            result[name] = None
            continue
        X, y, _ = table.feature_matrix(features)
        p = model.predict_proba(X)
        _write_predictions(run, name, y, p)
        _curves(run, name, y, p)
        result[name] = full_metrics(y, p).to_dict()
    if result["blind"] is not None:
        result["cv_blind_auc_gap"] = cv.mean.auc - result["blind"]["auc"]
    run.write_json(_json_safe(result), "evaluate", "metrics.json")
    series = []
    for name in ("cv", "blind", "external"):
        pts = run.out / "evaluate" / f"roc_{name}.csv"
        if pts.is_file():
            data = np.loadtxt(pts, delimiter=",", skiprows=1, ndmin=2, usecols=(1, 2))
            auc_v = result[name]["mean"]["auc"] if name == "cv" else result[name]["auc"]
            series.append((f"{name} (AUC {auc_v:.3f})", data[:, 0], data[:, 1]))
    run.write(line_plot(series, "ROC", "false positive rate", "true positive rate",
                        ylim=(0.0, 1.0), diagonal=True), "evaluate", "roc.svg")
    log.info("evaluate: CV AUC %.3f, blind %s, external %s", cv.mean.auc,
             None if result["blind"] is None else round(result["blind"]["auc"], 3),
             None if result["external"] is None else round(result["external"]["auc"], 3))


def _prediction_sets(run: Run):
    found = []
    for name in ("cv", "blind", "external"):
        data = _read_predictions(run, name)
        if data is not None:
            found.append((name, *data))
    if not found:
        raise DataError("no prediction files; run evaluate first")
    return found


def cmd_calibrate(run: Run) -> None:
    summary = {}
    for name, y, p in _prediction_sets(run):
        rep = calibration_report(y, p, run.cfg["calibration_bins"])
        run.write(rep.dumps(), "calibrate", f"{name}.json")
        run.write(rep.curve_csv(), "calibrate", f"{name}_curve.csv")
        xs = [c[0] for c in rep.curve]
        ys = [c[1] for c in rep.curve]
        run.write(line_plot([(f"{name} (ICI {rep.ici:.3f})", xs, ys)], f"Calibration: {name}",
                            "mean predicted probability", "observed rate",
                            ylim=(0.0, 1.0), diagonal=True, markers=True), "calibrate", f"{name}.svg")
        summary[name] = {k: v for k, v in rep.to_dict().items() if k != "curve"}
    run.write_json(summary, "calibrate", "summary.json")


def cmd_lr(run: Run) -> None:
    t = run.cfg["thresholds"]
    grid = default_thresholds(t["start"], t["stop"], t["step"])
    summary = {}
    series = []
    for name, y, p in _prediction_sets(run):
        curve = lr_sweep(y, p, grid, run.cfg["pretest"])
        run.write(curve.dumps(), "lr", f"{name}.json")
        run.write(curve.to_csv(), "lr", f"{name}.csv")
        best = curve.best
        at_half = next((pt for pt in curve.points if pt.threshold == 0.5), None)
        summary[name] = {
            "pretest": curve.pretest,
            "argmax_threshold": curve.argmax_threshold,
            "lr_at_argmax": None if best is None else best.lr_positive,
            "lr_at_0.5": None if at_half is None else _json_safe(at_half.lr_positive),
        }
        series.append((name, [pt.threshold for pt in curve.points], [pt.lr_positive for pt in curve.points]))
    run.write_json(_json_safe(summary), "lr", "summary.json")
    run.write(line_plot(series, "Positive likelihood ratio", "threshold", "LR+"), "lr", "lr.svg")


def cmd_explain(run: Run) -> None:
    model = run.model()
    ec = run.cfg["explain"]
    table = run.processed("blind")
    if table is None:
        table = run.processed("train")
    if table is None:
        raise DataError("no preprocessed data to explain; run preprocess first")
    if table.n_rows > ec["max_rows"]:
        rows = np.sort(np.random.default_rng(run.seed).choice(table.n_rows, ec["max_rows"], replace=False))
        table = table.take(rows)
    X, _, names = table.feature_matrix(list(model.feature_names))
    shap = forest_shap(model, X, threads=run.threads)
    err = shap.local_accuracy_error(model.predict_proba(X))
    ranking = summary_ranking(shap, ec["top_k"])
    run.write(shap.to_csv(), "explain", "shap.csv")
    run.write(ranking.to_csv(), "explain", "ranking.csv")
    raw = _raw_values(run, table, names)
    run.write(beeswarm_export(shap, X, ec["top_k"], raw=raw), "explain", "beeswarm.csv")
    idx = [names.index(n) for n in ranking.names]
    run.write(beeswarm(ranking.names, X[:, idx], shap.values[:, idx]), "explain", "beeswarm.svg")
    run.write_json({"rows": int(len(X)), "base_value": shap.base_value, "max_additivity_error": err,
                    "ranking": [{"feature": n, "mean_abs_shap": v} for n, v in ranking.items]},
                   "explain", "summary.json")


def _raw_values(run: Run, table: DataTable, names) -> dict:
    """Undo z-scoring so the beeswarm export also carries readable values."""
    pre_path = run.out / "preprocess" / "preprocessor.json"
    if not pre_path.is_file():
        return {}
    pre = FittedPreprocessor.load(pre_path)
    out = {}
    for n in names:
        if n in pre.standardize:
            mu, sd = pre.standardize[n]
            out[n] = table[n] * sd + mu if sd else np.full(table.n_rows, mu)
        else:
            out[n] = table[n]
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_report(run: Run) -> None:
    out = run.out
    artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.parts[len(out.parts)] != "report")
    checksums = {p.relative_to(out).as_posix(): _sha256(p) for p in artifacts}

    def maybe(*parts):
        p = out.joinpath(*parts)
        return json.loads(p.read_text(encoding="utf-8")) if p.is_file() else None

    bundle = {
        "version": __version__,
        "filters": maybe("preprocess", "filter_report.json"),
        "selected_features": maybe("select", "features.json"),
        "metrics": maybe("evaluate", "metrics.json"),
        "calibration": maybe("calibrate", "summary.json"),
        "likelihood_ratios": maybe("lr", "summary.json"),
        "explanations": maybe("explain", "summary.json"),
        "files": sorted(checksums),
    }
    manifest = {
        "tool": "readmit",
        "version": __version__,
        "config": config_snapshot(run.cfg),
        "artifacts": checksums,
        "stage_timings": run.timings if run.cfg.get("record_timings") else None,
    }
    run.write_json(manifest, "report", "manifest.json")
    run.write_json(bundle, "report", "report.json")
    run.write(_markdown(bundle), "report", "report.md")


def _fmt(v, digits=3):
    return "-" if v is None else f"{v:.{digits}f}"


def _markdown(b: dict) -> str:
    lines = ["# Readmission model report", ""]
    m = b.get("metrics")
    if m:
        lines += ["## Discrimination", "", "| set | AUC | APR | MCC | bal. acc. | F1 |", "|---|---|---|---|---|---|"]
        rows = [("cv (mean)", m["cv"]["mean"]), ("blind", m.get("blind")), ("external", m.get("external"))]
        for name, r in rows:
            if r is None:
                lines.append(f"| {name} | absent | | | | |")
            else:
                lines.append(f"| {name} | {_fmt(r['auc'])} | {_fmt(r['apr'])} | {_fmt(r['mcc'])} | "
                             f"{_fmt(r['balanced_accuracy'])} | {_fmt(r['f1'])} |")
        lines.append("")
    c = b.get("calibration")
    if c:
        lines += ["## Calibration", "", "| set | slope | intercept | ICI | E50 | E90 | Emax |",
                  "|---|---|---|---|---|---|---|"]
        for name, r in c.items():
            lines.append(f"| {name} | {_fmt(r['slope'])} | {_fmt(r['intercept'])} | {_fmt(r['ici'])} | "
                         f"{_fmt(r['e50'])} | {_fmt(r['e90'])} | {_fmt(r['emax'])} |")
        lines.append("")
    lr = b.get("likelihood_ratios")
    if lr:
        lines += ["## Likelihood ratios", "", "| set | LR+ at 0.5 | best threshold | LR+ there |", "|---|---|---|---|"]
        for name, r in lr.items():
            lines.append(f"| {name} | {_fmt(r['lr_at_0.5'])} | {_fmt(r['argmax_threshold'], 2)} | "
                         f"{_fmt(r['lr_at_argmax'])} |")
        lines.append("")
    e = b.get("explanations")
    if e:
        lines += ["## Top features (mean |SHAP|)", ""]
        lines += [f"{i + 1}. {r['feature']} ({r['mean_abs_shap']:.4f})" for i, r in enumerate(e["ranking"])]
        lines.append("")
    lines += ["## Files", ""] + [f"- {f}" for f in b["files"]]
    return "\n".join(lines) + "\n"


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "select": cmd_select, "train": cmd_train,
    "evaluate": cmd_evaluate, "calibrate": cmd_calibrate, "lr": cmd_lr, "explain": cmd_explain,
    "report": cmd_report,
}


def run_stages(cfg: dict, stages) -> Run:
    run = Run(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    for stage in stages:
        t0 = time.perf_counter()
        COMMANDS[stage](run)
        run.timings[stage] = round(time.perf_counter() - t0, 3)
        log.info("stage %s done in %.2fs", stage, run.timings[stage])
    return run


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (required here or in the config)")
    common.add_argument("--out", help=f"output directory (overrides ${ENV_OUT} and the config)")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--record-timings", action="store_true", default=None,
                        help="store stage timings in the run manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="readmit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"readmit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate synthetic training/external cohorts",
        "preprocess": "filter, split, impute, encode and standardise",
        "select": "greedy forward feature selection",
        "train": "fit the final random forest",
        "evaluate": "cross-validation, blind-test and external metrics",
        "calibrate": "calibration curves, slope/intercept and ICI",
        "lr": "likelihood-ratio threshold sweep",
        "explain": "TreeSHAP attributions, ranking and beeswarm data",
        "report": "bundle all outputs with a checksum manifest",
        "run": "all stages in order",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "synth":
            p.add_argument("--preset", choices=("eicu-like", "mimic-like", "balanced"))
            p.add_argument("--n-rows", type=int)
        if name == "run":
            p.add_argument("--skip", nargs="*", default=[], choices=STAGES, help="stages to skip")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {"seed": args.seed, "output_dir": args.out, "threads": args.threads,
                 "record_timings": args.record_timings}
    if args.command == "synth":
        overrides["synth"] = {k: v for k, v in (("preset", args.preset), ("n_rows", args.n_rows)) if v}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "run":
            stages = [s for s in STAGES if s not in args.skip]
            if cfg["data"]["train"]:
                stages = [s for s in stages if s != "synth"]
        else:
            stages = [args.command]
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            run_stages(cfg, stages)
    except (ConfigError, argparse.ArgumentError) as exc:
        print(f"readmit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelFormatError as exc:
        print(f"readmit: model file error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DataError, FileNotFoundError) as exc:
        print(f"readmit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, FloatingPointError) as exc:
        print(f"readmit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("unexpected failure")
        print(f"readmit: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
