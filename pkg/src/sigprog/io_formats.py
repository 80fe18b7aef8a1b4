"""File formats: long-format cohort CSVs with attribute and metadata
companions, JSON parameter files and forecast tables.

Ages are stored as decimal years. Floats are written with ``repr`` so a
save/load cycle reproduces them bit for bit. Every write goes to a
temporary file in the destination directory, which is then renamed over the
target.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .benchmarks import (LineFit, LmeBenchmark, LmeFit, SigmoidBenchmark, SigmoidFit4,
                         SubjectLinearBenchmark)
from .cohort import Cohort, Subject, TargetInfo
from .core_model import LatentState, ModelParams
from .inference import VariationalState
from .prediction import FittedModel, PosteriorForecast

FORMAT_VERSION = 1
VISIT_COLUMNS = ("subject_id", "age_years", "target_name", "value")
FORECAST_COLUMNS = ("subject_id", "target", "time", "mean", "stddev", "q05", "q50", "q95", "mode")


class FormatError(ValueError):
    """A file does not follow the expected schema."""


# ---------------------------------------------------------------------------
# low-level helpers


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _fmt(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def _read_csv(path, required) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Rows of a CSV with a mandatory header containing ``required``.

    Returned rows carry their 1-based line number in the file.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file, expected header {list(required)}")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in required if c not in header]
    if missing:
        raise FormatError(f"{path}: missing header row or columns {missing} (got {header})")
    body = [(i + 2, r) for i, r in enumerate(rows[1:]) if any(cell.strip() for cell in r)]
    for line, r in body:
        if len(r) != len(header):
            raise FormatError(f"{path}, row {line}: expected {len(header)} fields, got {len(r)}")
    return header, body


def _parse_float(text: str, path, line: int, column: str, allow_empty=False) -> float:
    text = text.strip()
    if text == "" and allow_empty:
        return float("nan")
    try:
        val = float(text)
    except ValueError:
        raise FormatError(f"{path}, row {line}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(val):
        raise FormatError(f"{path}, row {line}: column {column!r} must be finite, got {text!r}")
    return val


# ---------------------------------------------------------------------------
# cohorts


def cohort_paths(stem) -> dict[str, Path]:
    """Conventional file names for a cohort stored under ``stem``."""
    stem = Path(stem)
    return {"visits": stem.with_name(stem.name + "_visits.csv"),
            "attributes": stem.with_name(stem.name + "_attributes.csv"),
            "metadata": stem.with_name(stem.name + "_metadata.json")}


def cohort_metadata(cohort: Cohort) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "targets": [{"name": t.name, "low": t.low, "high": t.high, "polarity": t.polarity}
                    for t in cohort.targets],
        "attributes": [{"name": n, "unit": u}
                       for n, u in zip(cohort.attribute_names, cohort.attribute_units)],
    }


def save_cohort(cohort: Cohort, stem) -> dict[str, Path]:
    paths = cohort_paths(stem)
    names = cohort.target_names
    visit_rows, attr_rows = [], []
    for s in cohort.subjects:
        attr_rows.append([s.subject_id, *(_fmt(a) for a in s.attributes)])
        for age, row in zip(s.ages, s.values):
            for name, val in zip(names, row):
                visit_rows.append([s.subject_id, _fmt(age), name, _fmt(val)])
    atomic_write_text(paths["visits"], _rows_to_csv(VISIT_COLUMNS, visit_rows))
    atomic_write_text(paths["attributes"], _rows_to_csv(["subject_id", *cohort.attribute_names],
                                                        attr_rows))
    write_json(paths["metadata"], cohort_metadata(cohort))
    return paths


def _targets_from_meta(meta, path) -> tuple[list[TargetInfo], list[str], list[str]]:
    try:
        targets = [TargetInfo(t["name"], float(t["low"]), float(t["high"]), t["polarity"])
                   for t in meta["targets"]]
        attrs = meta["attributes"]
        names = [a["name"] for a in attrs]
        units = [a.get("unit", "") for a in attrs]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed cohort metadata ({exc})") from exc
    if len({t.name for t in targets}) != len(targets):
        raise FormatError(f"{path}: duplicate target names")
    return targets, names, units


def load_cohort(visits_path, attributes_path=None, metadata_path=None) -> Cohort:
    """Read a cohort written by :func:`save_cohort`.

    With one argument, it is treated as the stem passed to ``save_cohort``.
    Subjects listed in the attributes file without visit rows become
    zero-visit subjects; visit rows for unlisted subjects are rejected.
    """
    if attributes_path is None and metadata_path is None:
        paths = cohort_paths(visits_path)
    else:
        paths = {"visits": Path(visits_path), "attributes": Path(attributes_path),
                 "metadata": Path(metadata_path)}
    for p in paths.values():
        if not p.exists():
            raise FileNotFoundError(f"cohort file not found: {p}")
    targets, attr_names, units = _targets_from_meta(read_json(paths["metadata"]), paths["metadata"])
    tindex = {t.name: k for k, t in enumerate(targets)}

    apath = paths["attributes"]
    header, body = _read_csv(apath, ["subject_id", *attr_names])
    cols = [header.index(n) for n in attr_names]
    sid_col = header.index("subject_id")
    attrs: dict[str, np.ndarray] = {}
    for line, r in body:
        sid = r[sid_col].strip()
        if not sid:
            raise FormatError(f"{apath}, row {line}: empty subject_id")
        if sid in attrs:
            raise FormatError(f"{apath}, row {line}: duplicate subject {sid!r}")
        attrs[sid] = np.array([_parse_float(r[c], apath, line, attr_names[j])
                               for j, c in enumerate(cols)])

    vpath = paths["visits"]
    header, body = _read_csv(vpath, VISIT_COLUMNS)
    ci = {c: header.index(c) for c in VISIT_COLUMNS}
    cells: dict[str, dict[float, np.ndarray]] = {sid: {} for sid in attrs}
    seen = set()
    for line, r in body:
        sid = r[ci["subject_id"]].strip()
        if sid not in attrs:
            raise FormatError(f"{vpath}, row {line}: subject {sid!r} has no attributes row")
        name = r[ci["target_name"]].strip()
        if name not in tindex:
            raise FormatError(f"{vpath}, row {line}: unknown target {name!r}")
        age = _parse_float(r[ci["age_years"]], vpath, line, "age_years")
        val = _parse_float(r[ci["value"]], vpath, line, "value", allow_empty=True)
        key = (sid, age, name)
        if key in seen:
            raise FormatError(f"{vpath}, row {line}: duplicate entry for subject {sid!r}, "
                              f"age {age}, target {name!r}")
        seen.add(key)
        row = cells[sid].setdefault(age, np.full(len(targets), np.nan))
        row[tindex[name]] = val

    subjects = []
    for sid, x in attrs.items():
        ages = np.array(sorted(cells[sid]), dtype=float)
        vals = np.array([cells[sid][a] for a in ages]).reshape(ages.size, len(targets))
        subjects.append(Subject(sid, x, ages, vals))
    return Cohort(subjects, targets, attr_names, units)


# ---------------------------------------------------------------------------
# parameters


def params_to_dict(theta: ModelParams) -> dict:
    return {
        "w": theta.w.tolist(), "b": float(theta.b), "v": theta.v.tolist(), "a": theta.a.tolist(),
        "sigma_s": float(theta.sigma_s), "sigma_p": float(theta.sigma_p),
        "c": theta.c.tolist(), "h": theta.h.tolist(), "sigma_y": theta.sigma_y.tolist(),
    }


def params_from_dict(d: dict) -> ModelParams:
    try:
        return ModelParams(**{k: d[k] for k in ("w", "b", "v", "a", "sigma_s", "sigma_p",
                                                "c", "h", "sigma_y")}).validate()
    except KeyError as exc:
        raise FormatError(f"parameter record lacks field {exc}") from exc


def _check_version(obj, path, kind):
    if not isinstance(obj, dict) or obj.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} file")
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {obj.get('format_version')!r}")


def save_model(model: FittedModel, path) -> Path:
    theta = model.theta
    return write_json(path, {
        "format_version": FORMAT_VERSION, "kind": "fitted_model",
        "dims": {"d": theta.d, "m": theta.m},
        "params": params_to_dict(theta),
        "targets": [{"name": t.name, "low": t.low, "high": t.high, "polarity": t.polarity}
                    for t in model.targets],
        "attribute_names": list(model.attribute_names),
        "age_range": list(model.age_range) if model.age_range is not None else None,
        "summary": model.summary,
    })


def load_model(path) -> FittedModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    obj = read_json(path)
    _check_version(obj, path, "fitted_model")
    theta = params_from_dict(obj["params"])
    if (theta.d, theta.m) != (obj["dims"]["d"], obj["dims"]["m"]):
        raise FormatError(f"{path}: parameter shapes disagree with declared dims")
    targets, _, _ = _targets_from_meta({"targets": obj["targets"], "attributes": []}, path)
    rng = obj.get("age_range")
    return FittedModel(theta, targets, list(obj["attribute_names"]),
                       tuple(rng) if rng is not None else None, obj.get("summary", {}))


def save_proxies(gammas: list[VariationalState], subject_ids, path) -> Path:
    m = gammas[0].m if gammas else 0
    return write_json(path, {
        "format_version": FORMAT_VERSION, "kind": "proxies", "dims": {"m": m},
        "subjects": [{"subject_id": sid, "mu_s": g.mu_s, "sigma_s": g.sigma_s,
                      "mu_p": g.mu_p.tolist(), "chol_p": g.chol_p.tolist()}
                     for sid, g in zip(subject_ids, gammas)],
    })


def load_proxies(path) -> dict[str, VariationalState]:
    obj = read_json(path)
    _check_version(obj, path, "proxies")
    return {r["subject_id"]: VariationalState(r["mu_s"], r["sigma_s"], r["mu_p"],
                                              r["chol_p"]).validate()
            for r in obj["subjects"]}


def save_ground_truth(theta: ModelParams, latents: list[LatentState], subject_ids, path) -> Path:
    return write_json(path, {
        "format_version": FORMAT_VERSION, "kind": "ground_truth",
        "params": params_to_dict(theta),
        "subjects": [{"subject_id": sid, "slope": float(lat.slope),
                      "inflections": np.asarray(lat.inflections, dtype=float).tolist()}
                     for sid, lat in zip(subject_ids, latents)],
    })


def load_ground_truth(path) -> tuple[ModelParams, dict[str, LatentState]]:
    obj = read_json(path)
    _check_version(obj, path, "ground_truth")
    return (params_from_dict(obj["params"]),
            {r["subject_id"]: LatentState(r["slope"], np.array(r["inflections"]))
             for r in obj["subjects"]})


# ---------------------------------------------------------------------------
# benchmarks


def _curve_to_dict(f) -> dict:
    if isinstance(f, SigmoidFit4):
        return {"type": "sigmoid", "scale": f.scale, "bias": f.bias, "inflection": f.inflection,
                "slope": f.slope, "cost": f.cost}
    return {"type": "line", "intercept": f.intercept, "slope": f.slope}


def _curve_from_dict(d):
    if d["type"] == "sigmoid":
        return SigmoidFit4(d["scale"], d["bias"], d["inflection"], d["slope"], d.get("cost", 0.0))
    return LineFit(d["intercept"], d["slope"])


def benchmark_to_dict(bm) -> dict:
    if isinstance(bm, SigmoidBenchmark):
        return {"model_kind": "pooled_curve", "name": bm.name, "strata": bm.strata,
                "curve_kind": bm.kind, "sex_index": bm.sex_index, "apoe_index": bm.apoe_index,
                "fallback": [_curve_to_dict(f) for f in bm.fallback],
                "fits": [{"key": list(k), "curves": [_curve_to_dict(f) for f in fs]}
                         for k, fs in bm.fits.items()]}
    if isinstance(bm, LmeBenchmark):
        return {"model_kind": "lme", "name": bm.name,
                "fits": [{"fixed_effects": f.fixed_effects.tolist(),
                          "random_cov": f.random_cov.tolist(), "noise_var": f.noise_var,
                          "t_ref": f.t_ref, "loglik": f.loglik, "start_loglik": f.start_loglik,
                          "warnings": list(f.warnings)} for f in bm.fits]}
    if isinstance(bm, SubjectLinearBenchmark):
        return {"model_kind": "subject_linear", "name": bm.name}
    raise TypeError(f"cannot serialize {type(bm).__name__}")


def benchmark_from_dict(d: dict):
    kind = d.get("model_kind")
    if kind == "pooled_curve":
        fits = {tuple(int(v) for v in e["key"]): [_curve_from_dict(c) for c in e["curves"]]
                for e in d["fits"]}
        return SigmoidBenchmark(d["strata"], fits, [_curve_from_dict(c) for c in d["fallback"]],
                                d["sex_index"], d["apoe_index"], d["curve_kind"], d["name"])
    if kind == "lme":
        return LmeBenchmark([LmeFit(np.array(f["fixed_effects"]), np.array(f["random_cov"]),
                                    f["noise_var"], f["t_ref"], f["loglik"], f["start_loglik"],
                                    list(f["warnings"])) for f in d["fits"]], d["name"])
    if kind == "subject_linear":
        return SubjectLinearBenchmark(d["name"])
    raise FormatError(f"unknown benchmark model_kind {kind!r}")


def save_benchmarks(benchmarks: dict, target_names, path) -> Path:
    return write_json(path, {
        "format_version": FORMAT_VERSION, "kind": "benchmarks", "targets": list(target_names),
        "models": {name: benchmark_to_dict(bm) for name, bm in benchmarks.items()},
    })


def load_benchmarks(path) -> dict:
    obj = read_json(path)
    _check_version(obj, path, "benchmarks")
    return {name: benchmark_from_dict(d) for name, d in obj["models"].items()}


# ---------------------------------------------------------------------------
# forecasts


def forecast_rows(subject_id: str, fc: PosteriorForecast, target_names) -> list[list[str]]:
    levels = {q: fc.quantile(q) for q in (0.05, 0.5, 0.95)}
    rows = []
    for k, name in enumerate(target_names):
        for j, t in enumerate(fc.times):
            rows.append([subject_id, name, _fmt(t), _fmt(fc.mean[j, k]), _fmt(fc.stddev[j, k]),
                         _fmt(levels[0.05][j, k]), _fmt(levels[0.5][j, k]),
                         _fmt(levels[0.95][j, k]), fc.mode])
    return rows


def write_forecast_csv(path, rows) -> Path:
    return atomic_write_text(path, _rows_to_csv(FORECAST_COLUMNS, rows))


def read_forecast_csv(path) -> list[dict]:
    header, body = _read_csv(path, FORECAST_COLUMNS)
    out = []
    for line, r in body:
        rec = dict(zip(header, r))
        for c in ("time", "mean", "stddev", "q05", "q50", "q95"):
            rec[c] = _parse_float(rec[c], path, line, c)
        out.append(rec)
    return out
