"""Cross-validation splits, scenario protocols, subject-level MAE and the
paired permutation test."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import Cohort, History
from .core_model import ModelParams
from .inference import TrainConfig, train
from .prediction import FittedModel, predict_points_batch

log = logging.getLogger(__name__)

PROPOSED = "proposed"
SCENARIO_KINDS = ("past-visit-sweep", "horizon-sweep")


class EmptyScenarioError(ValueError):
    """No test subject has enough visits for the requested scenario."""


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def kfold_split(n_or_cohort, k: int = 20, seed: int = 0) -> list[Fold]:
    """Subject-level folds: each partition is the test set once, the next
    partition (cyclically) is the validation set, the rest is training."""
    n = len(n_or_cohort) if not isinstance(n_or_cohort, (int, np.integer)) else int(n_or_cohort)
    if k < 3:
        raise ValueError("k must be at least 3 (train, validation and test partitions)")
    if n < k:
        raise ValueError(f"cannot split {n} subjects into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    parts = [np.sort(p) for p in np.array_split(perm, k)]
    folds = []
    for f in range(k):
        val = (f + 1) % k
        rest = [parts[j] for j in range(k) if j not in (f, val)]
        folds.append(Fold(np.sort(np.concatenate(rest)), parts[val], parts[f]))
    return folds


# ---------------------------------------------------------------------------
# metrics


def subject_mae(subjects, abs_errors) -> tuple[np.ndarray, np.ndarray]:
    """Average absolute error within each subject. Returns (ids, maes)."""
    subjects = np.asarray(subjects)
    abs_errors = np.asarray(abs_errors, dtype=float)
    ids, inv = np.unique(subjects, return_inverse=True)
    sums = np.bincount(inv, weights=abs_errors, minlength=ids.size)
    counts = np.bincount(inv, minlength=ids.size)
    return ids, sums / counts


def mae(predictions, truths, subjects=None, targets=None) -> dict:
    """Mean and standard deviation across subjects of the per-subject MAE.

    Entries are first averaged within subject (and target), then summarized
    across subjects. Returns ``{target: (mean, std)}``; without ``targets``
    everything is treated as one target keyed ``0``.
    """
    pred = np.asarray(predictions, dtype=float).reshape(-1)
    truth = np.asarray(truths, dtype=float).reshape(-1)
    if pred.size == 0 or pred.size != truth.size:
        raise ValueError("predictions and truths must be non-empty and aligned")
    subjects = np.zeros(pred.size, int) if subjects is None else np.asarray(subjects)
    targets = np.zeros(pred.size, int) if targets is None else np.asarray(targets)
    err = np.abs(pred - truth)
    out = {}
    for k in np.unique(targets):
        sel = targets == k
        _, per_subj = subject_mae(subjects[sel], err[sel])
        key = k.item() if hasattr(k, "item") else k
        out[key] = (float(per_subj.mean()), float(per_subj.std()))
    return out


def paired_permutation_test(model_a_errors, model_b_errors, n_perm: int = 10000,
                            seed: int = 0) -> float:
    """Subject-level paired permutation p-value that model A beats model B.

    Each argument is a sequence with one entry per subject: a scalar or an
    array of that subject's absolute errors (all of a subject's time points
    move together). The statistic is MAE(B) - MAE(A); each permutation swaps
    the two models' labels per subject with probability 1/2. The p-value is
    the rank of the observed statistic among the permuted ones sorted in
    descending order, divided by ``n_perm + 1``; permuted values equal to the
    observed one rank ahead of it.
    """
    a = np.array([np.mean(e) for e in model_a_errors], dtype=float)
    b = np.array([np.mean(e) for e in model_b_errors], dtype=float)
    if a.size != b.size:
        raise ValueError("error sets must cover the same subjects")
    if a.size < 2:
        raise ValueError("the permutation test needs at least two subjects")
    diff = b - a
    observed = diff.mean()
    rng = np.random.default_rng(seed)
    exceed = 0
    chunk = max(1, 2_000_000 // diff.size)
    done = 0
    while done < n_perm:
        size = min(chunk, n_perm - done)
        signs = np.where(rng.random((size, diff.size)) < 0.5, -1.0, 1.0)
        permuted = (signs @ diff) / diff.size
        # tolerance absorbs summation-order noise so exact ties count as ties
        exceed += int(np.count_nonzero(permuted >= observed - 1e-12 * (1 + abs(observed))))
        done += size
    return (1 + exceed) / (n_perm + 1)


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    past_visits: int = 2
    horizon_bucket_months: int = 6
    horizons: tuple[int, ...] = (12, 18, 24, 30, 36)

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"kind must be one of {SCENARIO_KINDS}")
        if self.past_visits < 0:
            raise ValueError("past_visits must be nonnegative")
        if list(self.horizons) != sorted(self.horizons):
            raise ValueError("horizons must be sorted ascending")
        if self.horizon_bucket_months <= 0:
            raise ValueError("horizon_bucket_months must be positive")


def bucket_months(months, bucket: int = 6) -> np.ndarray:
    """Nearest multiple of ``bucket``; exact midpoints go to the later bucket."""
    months = np.asarray(months, dtype=float)
    return (np.floor(months / bucket + 0.5) * bucket).astype(int)


@dataclass
class ScoredPoint:
    """Aligned test entries for one scenario point."""

    subjects: list[str]
    histories: list[History]
    xs: np.ndarray
    query_times: list[np.ndarray]
    truths: list[np.ndarray]  # (T_i, m) with NaN where unobserved
    excluded: int


def scenario_points(cohort: Cohort, spec: ScenarioSpec) -> dict:
    """Build the scored entries for each point of a scenario.

    Past-visit sweep: the first ``past_visits`` visits form the history and
    every later visit is scored (one point). Horizon sweep: the first
    ``past_visits`` visits form the history and later visits are scored at
    the horizon bucket they fall into (one point per horizon).
    """
    need = spec.past_visits + 1
    if spec.kind == "past-visit-sweep":
        keys = [spec.past_visits]
    else:
        keys = list(spec.horizons)
    acc = {key: ([], [], [], [], []) for key in keys}
    for s in cohort.subjects:
        if s.n_visits < need:
            continue
        hist = s.history(spec.past_visits)
        later_t = s.ages[spec.past_visits:]
        later_y = s.values[spec.past_visits:]
        if spec.kind == "past-visit-sweep":
            groups = {spec.past_visits: np.ones(later_t.size, bool)}
        else:
            b = bucket_months((later_t - s.ages[0]) * 12.0, spec.horizon_bucket_months)
            groups = {hzn: b == hzn for hzn in keys}
        for key, sel in groups.items():
            if not sel.any() or not np.isfinite(later_y[sel]).any():
                continue
            ids, hs, xs, qt, tr = acc[key]
            ids.append(s.subject_id)
            hs.append(hist)
            xs.append(s.attributes)
            qt.append(later_t[sel])
            tr.append(later_y[sel])
    out = {}
    for key, (ids, hs, xs, qt, tr) in acc.items():
        out[key] = ScoredPoint(ids, hs, np.array(xs).reshape(len(ids), cohort.d), qt, tr,
                               cohort.n - len(ids))
    if all(len(p.subjects) == 0 for p in out.values()):
        raise EmptyScenarioError(f"no test subject has the visits required by {spec}")
    return out


@dataclass
class ProposedForecaster:
    """Adapter giving a fitted progression model the benchmark interface."""

    model: FittedModel
    config: TrainConfig = field(default_factory=TrainConfig.personalization)
    n_samples: int = 1024
    seed: int = 0
    name: str = PROPOSED
    uses_history: bool = True

    def predict(self, xs, histories, query_times) -> list[np.ndarray]:
        return predict_points_batch(self.model, xs, histories, query_times, self.config,
                                    self.n_samples, self.seed)


@dataclass
class PointErrors:
    """Absolute errors of each model on the common support of one point."""

    subjects: np.ndarray
    targets: np.ndarray
    errors: dict[str, np.ndarray]
    not_applicable: list[str]


def score_point(models: dict, point: ScoredPoint, past_visits: int) -> PointErrors:
    preds = {}
    na = []
    for name, mdl in models.items():
        if past_visits == 0 and name == "subject_linear":
            na.append(name)
            continue
        preds[name] = mdl.predict(point.xs, point.histories, point.query_times)
    subj, tgt, truth, per_model = [], [], [], {nm: [] for nm in preds}
    for i, sid in enumerate(point.subjects):
        y = point.truths[i]
        ok = np.isfinite(y)
        for nm in preds:
            ok &= np.isfinite(preds[nm][i])
        j, k = np.nonzero(ok)
        subj.extend([sid] * j.size)
        tgt.extend(k.tolist())
        truth.append(y[j, k])
        for nm in preds:
            per_model[nm].append(preds[nm][i][j, k])
    truth = np.concatenate(truth) if truth else np.zeros(0)
    errors = {nm: np.abs(np.concatenate(v) - truth) if v else np.zeros(0)
              for nm, v in per_model.items()}
    return PointErrors(np.array(subj), np.array(tgt, dtype=int), errors, na)


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    pvalues: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    CSV_COLUMNS = ("model", "target", "scenario", "point", "mae_mean", "mae_std", "n_subjects")

    def lookup(self, model, target, scenario, point) -> dict:
        for r in self.rows:
            if (r["model"], r["target"], r["scenario"], r["point"]) == (model, target, scenario, point):
                return r
        raise KeyError((model, target, scenario, point))

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        for r in self.rows:
            vals = []
            for c in self.CSV_COLUMNS:
                v = r[c]
                vals.append("NA" if isinstance(v, float) and not np.isfinite(v) else
                            (f"{v:.10g}" if isinstance(v, float) else str(v)))
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"format_version": "1", "pvalues": self.pvalues,
                           "excluded_subjects": self.excluded}, indent=2, sort_keys=True)

    def extend(self, other: "EvalReport"):
        self.rows.extend(other.rows)
        self.pvalues.update(other.pvalues)
        self.excluded.update(other.excluded)


def summarize_point(errs: PointErrors, target_names, scenario: str, point, n_perm: int,
                    seed: int, reference: str = PROPOSED) -> EvalReport:
    """MAE rows per model and target, plus permutation p-values of the
    reference model against every other model (per target and pooled)."""
    rep = EvalReport()
    label = f"{scenario}:{point}"
    models = list(errs.errors)
    for nm in errs.not_applicable:
        for tname in target_names:
            rep.rows.append(dict(model=nm, target=tname, scenario=scenario, point=point,
                                 mae_mean=float("nan"), mae_std=float("nan"), n_subjects=0))
    for k, tname in enumerate(target_names):
        sel = errs.targets == k
        subj = errs.subjects[sel]
        for nm in models:
            if sel.any():
                _, per = subject_mae(subj, errs.errors[nm][sel])
                rep.rows.append(dict(model=nm, target=tname, scenario=scenario, point=point,
                                     mae_mean=float(per.mean()), mae_std=float(per.std()),
                                     n_subjects=int(per.size)))
            else:
                rep.rows.append(dict(model=nm, target=tname, scenario=scenario, point=point,
                                     mae_mean=float("nan"), mae_std=float("nan"), n_subjects=0))
    if reference in models:
        pv = {}
        for tk, sel in [(t, errs.targets == k) for k, t in enumerate(target_names)] + \
                       [("all", np.ones(errs.targets.size, bool))]:
            if np.unique(errs.subjects[sel]).size < 2:
                continue
            _, ref = subject_mae(errs.subjects[sel], errs.errors[reference][sel])
            pv[tk] = {}
            for nm in models:
                if nm == reference:
                    continue
                _, other = subject_mae(errs.subjects[sel], errs.errors[nm][sel])
                pv[tk][nm] = paired_permutation_test(ref, other, n_perm, seed)
        rep.pvalues[label] = pv
    return rep


def run_scenario(models: dict, cohort: Cohort, spec: ScenarioSpec, n_perm: int = 10000,
                 seed: int = 0) -> EvalReport:
    """Score trained models on test subjects under one scenario spec."""
    points = scenario_points(cohort, spec)
    rep = EvalReport()
    for key, point in points.items():
        label = spec.kind
        rep.excluded[f"{label}:{key}"] = point.excluded
        if not point.subjects:
            continue
        errs = score_point(models, point, spec.past_visits)
        rep.extend(summarize_point(errs, cohort.target_names, label, key, n_perm, seed))
    return rep


def pooled_errors(models_per_fold: list[dict], test_cohorts: list[Cohort], spec: ScenarioSpec):
    """Errors at each scenario point pooled over folds (each test subject
    appears in exactly one fold)."""
    pooled: dict = {}
    excluded: dict = {}
    for models, test in zip(models_per_fold, test_cohorts):
        try:
            points = scenario_points(test, spec)
        except EmptyScenarioError:
            continue
        for key, point in points.items():
            excluded[key] = excluded.get(key, 0) + point.excluded
            if not point.subjects:
                continue
            e = score_point(models, point, spec.past_visits)
            if key not in pooled:
                pooled[key] = e
            else:
                p = pooled[key]
                pooled[key] = PointErrors(
                    np.concatenate([p.subjects, e.subjects]),
                    np.concatenate([p.targets, e.targets]),
                    {nm: np.concatenate([p.errors[nm], e.errors[nm]]) for nm in p.errors},
                    p.not_applicable)
    if not pooled:
        raise EmptyScenarioError(f"no test subject has the visits required by {spec}")
    return pooled, excluded


def default_specs(max_past: int = 4, horizons=(12, 18, 24, 30, 36)) -> list[ScenarioSpec]:
    specs = [ScenarioSpec("past-visit-sweep", past_visits=p) for p in range(max_past + 1)]
    specs.append(ScenarioSpec("horizon-sweep", past_visits=2, horizons=tuple(horizons)))
    return specs


def fit_fold_models(train_cohort: Cohort, validation: Cohort | None, config: TrainConfig,
                    benchmark_fitter=None, extra_train: Cohort | None = None) -> dict:
    """Train the proposed model (and benchmarks) on one fold.

    ``extra_train`` optionally supplies the same training subjects with
    additional targets used only for fitting the proposed model; the
    resulting parameters are restricted to the evaluation targets.
    """
    fit_on = extra_train if extra_train is not None else train_cohort
    res = train(fit_on, config, validation=validation)
    theta = res.theta
    if extra_train is not None:
        theta = restrict_targets(theta, [fit_on.target_names.index(nm)
                                         for nm in train_cohort.target_names])
    model = FittedModel.from_training(theta, train_cohort, res.summary())
    models = {PROPOSED: ProposedForecaster(model, seed=config.seed)}
    if benchmark_fitter is not None:
        models.update(benchmark_fitter(train_cohort))
    return models


def restrict_targets(theta: ModelParams, indices) -> ModelParams:
    idx = list(indices)
    return ModelParams(theta.w, theta.b, theta.v, theta.a[idx], theta.sigma_s, theta.sigma_p,
                       theta.c[idx], theta.h[idx], theta.sigma_y[idx])


def cross_validate(cohort: Cohort, specs: list[ScenarioSpec], k: int = 20, seed: int = 0,
                   config: TrainConfig | None = None, benchmark_fitter=None,
                   n_perm: int = 10000, extra_targets_cohort: Cohort | None = None) -> EvalReport:
    """k-fold evaluation with errors pooled across folds."""
    config = config or TrainConfig(seed=seed)
    folds = kfold_split(cohort, k, seed)
    models_per_fold, tests = [], []
    for f, fold in enumerate(folds):
        log.info("fold %d/%d: %d train, %d test", f + 1, k, fold.train.size, fold.test.size)
        extra = extra_targets_cohort.subset(fold.train) if extra_targets_cohort is not None else None
        models_per_fold.append(fit_fold_models(
            cohort.subset(fold.train), cohort.subset(fold.validation),
            replace(config, seed=config.seed + f), benchmark_fitter, extra))
        tests.append(cohort.subset(fold.test))
    return evaluate_models(models_per_fold, tests, specs, cohort.target_names, n_perm, seed)


def evaluate_models(models_per_fold, tests, specs, target_names, n_perm=10000, seed=0) -> EvalReport:
    rep = EvalReport()
    for spec in specs:
        try:
            pooled, excluded = pooled_errors(models_per_fold, tests, spec)
        except EmptyScenarioError as exc:
            log.warning("%s", exc)
            continue
        for key, errs in pooled.items():
            rep.excluded[f"{spec.kind}:{key}"] = excluded.get(key, 0)
            rep.extend(summarize_point(errs, target_names, spec.kind, key, n_perm, seed))
    return rep
