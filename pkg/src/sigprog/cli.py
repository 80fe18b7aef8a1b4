"""Command-line entry point.

    sigprog [--seed N] [--config FILE] [--out-dir DIR] <command> [options]

Commands: synth, train, forecast, evaluate, analyze, bench-fit. The config
file is JSON with one optional section per command (``synth``, ``train``,
``evaluate``, ``analyze``, ``forecast``); ``train`` settings also apply to
training inside ``evaluate``. Each run writes ``manifest_<command>.json``
with package versions, the seed, the resolved config, its hash, and hashes of
the outputs.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (export_personalized_trajectories, inflection_density, latent_means,
                       mean_latent_curves, risk_factor_csv, risk_factor_report)
from .benchmarks import fit_all_benchmarks
from .cohort import History
from .core_model import ModelParams
from .evaluation import (PROPOSED, ProposedForecaster, ScenarioSpec, cross_validate,
                         default_specs, evaluate_models)
from .inference import OptimizationError, TrainConfig, train
from .io_formats import (FormatError, atomic_write_text, forecast_rows, load_benchmarks,
                         load_cohort, load_model, save_benchmarks, save_cohort,
                         save_ground_truth, save_model, save_proxies, write_forecast_csv,
                         write_json)
from .prediction import (FittedModel, PersonalizationError, UntrainedModelError, forecast,
                         personalize_many)
from .synthesis import SynthConfig, generate_cohort

log = logging.getLogger("sigprog")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

SYNTH_KEYS = {"n_subjects", "dropout_hazard", "missing_prob", "max_visits", "visit_interval_mean",
              "visit_interval_std", "age_range", "clip", "imaging"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
EVAL_KEYS = {"folds", "n_perm", "max_past", "horizons", "benchmarks"}
FORECAST_KEYS = {"past_visits", "horizons_months", "n_samples"}
ANALYZE_KEYS = {"grid_step", "n_draws", "n_samples", "past_visits"}


class InputError(ValueError):
    """Bad command-line input or configuration."""


# ---------------------------------------------------------------------------
# config and manifest


def _section(config: dict, name: str, allowed: set) -> dict:
    sec = dict(config.get(name, {}))
    unknown = sorted(set(sec) - allowed)
    if unknown:
        raise InputError(f"unknown keys in config section {name!r}: {unknown}")
    return sec


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError("config file must hold a JSON object")
    sections = {"synth": SYNTH_KEYS, "train": TRAIN_KEYS, "evaluate": EVAL_KEYS,
                "forecast": FORECAST_KEYS, "analyze": ANALYZE_KEYS}
    unknown = sorted(set(cfg) - set(sections))
    if unknown:
        raise InputError(f"unknown config sections: {unknown}")
    for name, allowed in sections.items():
        _section(cfg, name, allowed)
    return cfg


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_manifest(out_dir: Path, command: str, seed: int, resolved: dict, outputs) -> Path:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    files = {}
    for p in sorted(Path(o) for o in outputs):
        try:
            key = str(p.relative_to(out_dir))
        except ValueError:
            key = str(p)
        files[key] = _sha256(p.read_bytes())
    return write_json(out_dir / f"manifest_{command}.json", {
        "format_version": 1,
        "command": command,
        "seed": seed,
        "config": resolved,
        "config_hash": _sha256(canon.encode()),
        "versions": {"sigprog": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": files,
    })


def _train_config(config: dict, seed: int) -> tuple[TrainConfig, dict]:
    sec = _section(config, "train", TRAIN_KEYS)
    try:
        cfg = TrainConfig(seed=seed, **sec)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid train config: {exc}") from exc
    return cfg, dataclasses.asdict(cfg)


def _cohort_stem(args, default_name="cohort") -> Path:
    return Path(args.cohort) if args.cohort else args.out_dir / default_name


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, config) -> tuple[dict, list]:
    sec = _section(config, "synth", SYNTH_KEYS)
    imaging = bool(sec.pop("imaging", False))
    if "age_range" in sec:
        sec["age_range"] = tuple(sec["age_range"])
    try:
        cfg = (SynthConfig.with_imaging(seed=args.seed, **sec) if imaging
               else SynthConfig(seed=args.seed, **sec))
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid synth config: {exc}") from exc
    cohort, truth = generate_cohort(cfg)
    stem = args.out_dir / args.name
    paths = save_cohort(cohort, stem)
    gt = save_ground_truth(cfg.true_theta, truth, [s.subject_id for s in cohort.subjects],
                           stem.with_name(stem.name + "_truth.json"))
    resolved = {k: v for k, v in dataclasses.asdict(cfg).items() if k not in ("true_theta", "targets")}
    resolved.update(imaging=imaging, targets=cohort.target_names)
    return resolved, [*paths.values(), gt]


def cmd_train(args, config):
    cohort = load_cohort(_cohort_stem(args))
    tcfg, resolved = _train_config(config, args.seed)
    res = train(cohort, tcfg)
    model = FittedModel.from_training(res.theta, cohort, res.summary())
    model_path = save_model(model, args.out_dir / "model.json")
    prox = save_proxies(res.gammas, [s.subject_id for s in cohort.subjects],
                        args.out_dir / "proxies.json")
    trace = "iteration,elbo,smoothed\n" + "".join(
        f"{i},{a!r},{b!r}\n" for i, (a, b) in enumerate(zip(res.trace.tolist(),
                                                           res.smoothed_trace.tolist())))
    tr = atomic_write_text(args.out_dir / "trace.csv", trace)
    return resolved, [model_path, prox, tr]


def _require_model(path) -> FittedModel:
    if path is None or not Path(path).exists():
        raise UntrainedModelError(f"trained model file not found: {path}")
    return load_model(path)


def cmd_forecast(args, config):
    sec = _section(config, "forecast", FORECAST_KEYS)
    model = _require_model(args.model)
    cohort = load_cohort(_cohort_stem(args))
    if cohort.target_names != [t.name for t in model.targets]:
        raise InputError("cohort targets do not match the model's targets")
    past = args.past_visits if args.past_visits is not None else sec.get("past_visits")
    horizons = np.asarray(args.horizons or sec.get("horizons_months", [6, 12, 24, 36]), float)
    n_samples = int(sec.get("n_samples", 1024))
    pcfg = TrainConfig.personalization(seed=args.seed + 1)
    rows = []
    for i, s in enumerate(cohort.subjects):
        n_hist = s.n_visits if past is None else min(int(past), s.n_visits)
        hist = s.history(n_hist) if n_hist else History.empty(cohort.m)
        anchor = hist.ages[-1] if n_hist else (s.ages[0] if s.n_visits else None)
        if anchor is None:
            log.warning("subject %s has no visits and no anchor age; skipped", s.subject_id)
            continue
        times = anchor + horizons / 12.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fc = forecast(s.attributes, hist, model, times, n_samples=n_samples,
                          rng=np.random.default_rng([args.seed, i]), config=pcfg)
        rows.extend(forecast_rows(s.subject_id, fc, cohort.target_names))
    out = write_forecast_csv(args.out_dir / "forecast.csv", rows)
    return {"past_visits": past, "horizons_months": horizons.tolist(), "n_samples": n_samples}, [out]


def _specs(sec) -> list[ScenarioSpec]:
    return default_specs(int(sec.get("max_past", 4)), tuple(sec.get("horizons", (12, 18, 24, 30, 36))))


def cmd_evaluate(args, config):
    sec = _section(config, "evaluate", EVAL_KEYS)
    tcfg, tresolved = _train_config(config, args.seed)
    cohort = load_cohort(_cohort_stem(args))
    specs = _specs(sec)
    n_perm = int(sec.get("n_perm", 10000))
    fitter = (lambda c: fit_all_benchmarks(c)) if sec.get("benchmarks", True) else None
    if args.model:
        if not args.test_cohort:
            raise InputError("--model requires --test-cohort")
        model = _require_model(args.model)
        test = load_cohort(args.test_cohort)
        models = {PROPOSED: ProposedForecaster(model, seed=args.seed)}
        if args.benchmarks:
            models.update(load_benchmarks(args.benchmarks))
        elif fitter is not None:
            models.update(fitter(cohort))
        report = evaluate_models([models], [test], specs, cohort.target_names, n_perm, args.seed)
        mode = "holdout"
    else:
        folds = int(sec.get("folds", 20))
        report = cross_validate(cohort, specs, k=folds, seed=args.seed, config=tcfg,
                                benchmark_fitter=fitter, n_perm=n_perm)
        mode = f"{folds}-fold"
    csv_path = atomic_write_text(args.out_dir / "report.csv", report.to_csv())
    json_path = atomic_write_text(args.out_dir / "report.json", report.to_json() + "\n")
    resolved = {"mode": mode, "n_perm": n_perm, "max_past": int(sec.get("max_past", 4)),
                "horizons": list(sec.get("horizons", (12, 18, 24, 30, 36))),
                "benchmarks": bool(sec.get("benchmarks", True)), "train": tresolved}
    return resolved, [csv_path, json_path]


def cmd_bench_fit(args, config):
    cohort = load_cohort(_cohort_stem(args))
    bms = fit_all_benchmarks(cohort, include_linear=args.include_linear)
    out = save_benchmarks(bms, cohort.target_names, args.out_dir / "benchmarks.json")
    return {"include_linear": args.include_linear, "models": sorted(bms)}, [out]


def cmd_analyze(args, config):
    sec = _section(config, "analyze", ANALYZE_KEYS)
    model = _require_model(args.model)
    cohort = load_cohort(_cohort_stem(args))
    theta: ModelParams = model.theta
    names = cohort.target_names
    step = float(sec.get("grid_step", 0.25))
    lo, hi = model.age_range or cohort.observed_age_range()
    grid = np.arange(np.floor(lo) - 10, np.ceil(hi) + 10 + step / 2, step)
    pcfg = TrainConfig.personalization(seed=args.seed + 1)
    with_hist = [s for s in cohort.subjects if s.n_visits]
    gammas = personalize_many(theta, np.array([s.attributes for s in with_hist]),
                              [s.history() for s in with_hist], pcfg)
    dens = inflection_density(gammas, grid, n_draws=int(sec.get("n_draws", 100)), seed=args.seed,
                              target_names=names)
    slope, infl = latent_means(gammas)
    curves = mean_latent_curves(slope, infl, grid)
    curve_csv = "age," + ",".join(names) + "\n" + "".join(
        f"{t!r}," + ",".join(repr(float(v)) for v in row) + "\n"
        for t, row in zip(grid.tolist(), curves.curves))
    outs = [
        atomic_write_text(args.out_dir / "inflection_density.csv", dens.to_csv()),
        atomic_write_text(args.out_dir / "latent_curves.csv", curve_csv),
        atomic_write_text(args.out_dir / "risk_factors.csv",
                          risk_factor_csv(risk_factor_report(theta, model.attribute_names))),
    ]
    past = int(sec.get("past_visits", 4))
    export = export_personalized_trajectories(cohort, theta, grid, conditions=(0, past),
                                              n_samples=int(sec.get("n_samples", 1024)),
                                              seed=args.seed, config=pcfg)
    outs.append(atomic_write_text(args.out_dir / "trajectories.csv", export.to_csv()))
    outs.append(atomic_write_text(args.out_dir / "trajectories_notes.txt",
                                  "".join(n + "\n" for n in export.notes)))
    summary = {"mean_slope": slope, "mean_inflections": dict(zip(names, infl.tolist())),
               "lag_gaps": dict(zip(names, curves.lag_gaps().tolist())),
               "density_modes": dict(zip(names, dens.modes().tolist()))}
    outs.append(write_json(args.out_dir / "analysis_summary.json", summary))
    return {"grid_step": step, "n_draws": int(sec.get("n_draws", 100)), "past_visits": past}, outs


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "forecast": cmd_forecast,
            "evaluate": cmd_evaluate, "analyze": cmd_analyze, "bench-fit": cmd_bench_fit}


def _global_flags(p: argparse.ArgumentParser, default):
    def dflt(value):
        return value if default is None else default

    p.add_argument("--seed", type=int, default=dflt(0))
    p.add_argument("--config", default=dflt(None), help="JSON file with per-command sections")
    p.add_argument("--out-dir", type=Path, default=dflt(Path(".")))
    p.add_argument("-v", "--verbose", action="store_true", default=dflt(False))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sigprog", description="Latent-sigmoid progression modeling")
    _global_flags(p, None)
    # the same flags are accepted after the command name; SUPPRESS keeps an
    # absent flag there from overwriting one given before it
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort", parents=[common])
    s.add_argument("--name", default="cohort", help="file stem inside --out-dir")

    for name, hlp in (("train", "fit the progression model"),
                      ("bench-fit", "fit the benchmark models"),
                      ("forecast", "forecast targets for each subject"),
                      ("evaluate", "cross-validated or held-out evaluation"),
                      ("analyze", "densities, curves, effects and trajectories")):
        sp = sub.add_parser(name, help=hlp, parents=[common])
        sp.add_argument("--cohort", help="cohort file stem (default: <out-dir>/cohort)")
        if name in ("forecast", "evaluate", "analyze"):
            sp.add_argument("--model", help="model JSON written by 'train'")
        if name == "forecast":
            sp.add_argument("--past-visits", type=int)
            sp.add_argument("--horizons", type=float, nargs="+", help="months after the last visit")
        if name == "evaluate":
            sp.add_argument("--test-cohort", help="held-out cohort stem (with --model)")
            sp.add_argument("--benchmarks", help="benchmark JSON written by 'bench-fit'")
        if name == "bench-fit":
            sp.add_argument("--include-linear", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load_config(args.config)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        resolved, outputs = COMMANDS[args.command](args, config)
        write_manifest(args.out_dir, args.command, args.seed, resolved, outputs)
    except (OptimizationError, PersonalizationError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"sigprog {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FormatError, FileNotFoundError, UntrainedModelError, ValueError,
            KeyError) as exc:
        print(f"sigprog {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
