"""Comparison estimators: pooled 4-parameter sigmoids (global and stratified
by sex / APOE), a per-target linear mixed effects model with random slope and
intercept, and the subject-specific line with carry-forward."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize
from scipy.special import expit

from .cohort import Cohort, History

STRATA = ("none", "sex", "apoe", "sex_apoe")
SEX_LEVELS = (0, 1)
APOE_LEVELS = (0, 1, 2)
MAX_SLOPE_SPAN = 40.0  # |slope| <= MAX_SLOPE_SPAN / age span
MIN_STRATUM_POINTS = 4
LME_BOUND = 1e3


class NotApplicableError(ValueError):
    """The estimator is undefined for this input (e.g. no history)."""


# ---------------------------------------------------------------------------
# pooled sigmoid fits


@dataclass
class SigmoidFit4:
    scale: float
    bias: float
    inflection: float
    slope: float
    cost: float = 0.0

    def predict(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.scale * expit((t - self.inflection) * self.slope) + self.bias

    def canonical(self) -> "SigmoidFit4":
        """Equivalent parameters with a nonnegative slope."""
        if self.slope >= 0:
            return self
        return SigmoidFit4(-self.scale, self.bias + self.scale, self.inflection, -self.slope, self.cost)


@dataclass
class LineFit:
    intercept: float
    slope: float

    def predict(self, t) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(t, dtype=float)


def _sigmoid_residuals(theta, t, y):
    scale, bias, infl, slope = theta
    return scale * expit((t - infl) * slope) + bias - y


def _sigmoid_jac(theta, t, y):
    scale, bias, infl, slope = theta
    z = (t - infl) * slope
    d = expit(z)
    dd = d * expit(-z)
    return np.column_stack([d, np.ones_like(t), -scale * dd * slope, scale * dd * (t - infl)])


def fit_sigmoid4(t, y, n_starts: int = 5) -> SigmoidFit4:
    """Least-squares fit of ``scale * sigmoid((t - inflection) * slope) + bias``.

    Starts are placed at evenly spaced quantiles of ``t``; the lowest-cost
    solution is returned in canonical (slope >= 0) form.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size < MIN_STRATUM_POINTS:
        raise ValueError(f"need at least {MIN_STRATUM_POINTS} points, got {t.size}")
    span = max(np.ptp(t), 1e-6)
    trend = np.polyfit(t, y, 1)[0] if np.ptp(t) > 0 else 0.0
    sign = 1.0 if trend >= 0 else -1.0
    yrange = max(np.ptp(y), 1e-6)
    # a slope cap keeps sparse strata from collapsing onto a step function,
    # whose inflection is free anywhere between two ages
    cap = MAX_SLOPE_SPAN / span
    lo = np.array([-np.inf, -np.inf, -np.inf, -cap])
    hi = np.array([np.inf, np.inf, np.inf, cap])
    qs = (np.arange(n_starts) + 0.5) / n_starts
    best = None
    for infl0 in np.quantile(t, qs):
        x0 = np.array([sign * yrange, y.min() if sign > 0 else y.max(), infl0, 4.0 / span])
        res = least_squares(_sigmoid_residuals, x0, jac=_sigmoid_jac, args=(t, y),
                            bounds=(lo, hi), method="trf", xtol=1e-14, ftol=1e-14,
                            gtol=1e-14, max_nfev=2000)
        if not np.all(np.isfinite(res.x)):
            continue
        cost = float(np.sum(res.fun**2))
        # near-ties keep the earlier start so rounding noise cannot pick the winner
        if best is None or cost < best.cost - 1e-9 * (1.0 + best.cost):
            best = SigmoidFit4(*map(float, res.x), cost=cost)
    if best is None:
        best = SigmoidFit4(0.0, float(y.mean()), float(np.median(t)), 0.0,
                           cost=float(np.sum((y - y.mean()) ** 2)))
    return best.canonical()


def fit_line(t, y) -> LineFit:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.ptp(t) == 0:
        return LineFit(float(y.mean()), 0.0)
    slope, intercept = np.polyfit(t, y, 1)
    return LineFit(float(intercept), float(slope))


def _stratum_key(x, strata: str, sex_idx: int | None, apoe_idx: int | None) -> tuple:
    if strata == "none":
        return ()
    sex = int(round(x[sex_idx])) if sex_idx is not None else None
    apoe = int(round(x[apoe_idx])) if apoe_idx is not None else None
    return {"sex": (sex,), "apoe": (apoe,), "sex_apoe": (sex, apoe)}[strata]


def _all_keys(strata: str) -> list[tuple]:
    return {
        "none": [()],
        "sex": [(s,) for s in SEX_LEVELS],
        "apoe": [(a,) for a in APOE_LEVELS],
        "sex_apoe": list(itertools.product(SEX_LEVELS, APOE_LEVELS)),
    }[strata]


def _pooled_points(cohort: Cohort, members=None):
    """Per target, the pooled (ages, values) of observed entries."""
    out = []
    subjects = cohort.subjects if members is None else [cohort.subjects[i] for i in members]
    for k in range(cohort.m):
        ts, ys = [], []
        for s in subjects:
            ok = np.isfinite(s.values[:, k])
            ts.append(s.ages[ok])
            ys.append(s.values[ok, k])
        out.append((np.concatenate(ts) if ts else np.zeros(0),
                    np.concatenate(ys) if ys else np.zeros(0)))
    return out


@dataclass
class SigmoidBenchmark:
    """Training-fixed pooled curve per target, optionally per stratum.

    ``kind="linear"`` swaps the sigmoid for a straight line.
    """

    strata: str
    fits: dict[tuple, list]
    fallback: list
    sex_index: int | None
    apoe_index: int | None
    kind: str = "sigmoid"
    name: str = ""
    uses_history: bool = False

    def predict_one(self, x, times) -> np.ndarray:
        times = np.asarray(times, dtype=float).reshape(-1)
        key = _stratum_key(np.asarray(x, dtype=float), self.strata, self.sex_index, self.apoe_index)
        fits = self.fits.get(key, self.fallback)
        return np.column_stack([f.predict(times) for f in fits]) if fits else np.zeros((times.size, 0))

    def predict(self, xs, histories, query_times) -> list[np.ndarray]:
        return [self.predict_one(x, t) for x, t in zip(xs, query_times)]


def fit_global_sigmoid(cohort: Cohort, strata: str = "none", kind: str = "sigmoid") -> SigmoidBenchmark:
    """Least-squares sigmoid per target and stratum (sex in {0,1}, APOE in {0,1,2}).

    A stratum-target pair with too few points falls back to the unstratified
    fit with a warning.
    """
    if strata not in STRATA:
        raise ValueError(f"strata must be one of {STRATA}, got {strata!r}")
    if kind not in ("sigmoid", "linear"):
        raise ValueError("kind must be 'sigmoid' or 'linear'")
    fitter = fit_sigmoid4 if kind == "sigmoid" else fit_line
    sex_idx = cohort.attribute_index("sex") if strata in ("sex", "sex_apoe") else None
    apoe_idx = cohort.attribute_index("apoe4") if strata in ("apoe", "sex_apoe") else None
    pooled = _pooled_points(cohort)
    global_fits = [fitter(t, y) for t, y in pooled]
    fits = {}
    if strata == "none":
        fits[()] = global_fits
    else:
        x = cohort.attributes()
        keys = [_stratum_key(xi, strata, sex_idx, apoe_idx) for xi in x]
        for key in _all_keys(strata):
            members = [i for i, kk in enumerate(keys) if kk == key]
            per_target = []
            for k, (t, y) in enumerate(_pooled_points(cohort, members)):
                if t.size < MIN_STRATUM_POINTS:
                    warnings.warn(f"stratum {strata}={key} has {t.size} points for target "
                                  f"{cohort.targets[k].name}; using the unstratified fit",
                                  stacklevel=2)
                    per_target.append(global_fits[k])
                else:
                    per_target.append(fitter(t, y))
            fits[key] = per_target
    label = {"none": "global", "sex": "sex", "apoe": "apoe", "sex_apoe": "sex_apoe"}[strata]
    name = f"{label}_{kind}" if kind == "linear" else label
    return SigmoidBenchmark(strata, fits, global_fits, sex_idx, apoe_idx, kind, name)


# ---------------------------------------------------------------------------
# linear mixed effects


@dataclass
class LmeFit:
    """ML fit of ``y = beta.[x, t, 1] + u_slope * t + u_int + noise`` for one target.

    Time enters centered at ``t_ref``; ``random_cov`` is the covariance of
    (u_slope, u_int) in absolute units.
    """

    fixed_effects: np.ndarray  # [attributes..., time slope, intercept]
    random_cov: np.ndarray
    noise_var: float
    t_ref: float
    loglik: float
    start_loglik: float
    warnings: list[str] = field(default_factory=list)

    @property
    def relative_cov(self) -> np.ndarray:
        return self.random_cov / self.noise_var

    def population(self, x, times) -> np.ndarray:
        times = np.asarray(times, dtype=float).reshape(-1)
        X = _lme_design(np.asarray(x, dtype=float), times - self.t_ref)
        return X @ self.fixed_effects

    def random_effects(self, x, ages, values) -> np.ndarray:
        """Posterior mean of (u_slope, u_int) given one subject's observations."""
        ages = np.asarray(ages, dtype=float).reshape(-1)
        values = np.asarray(values, dtype=float).reshape(-1)
        if ages.size == 0:
            return np.zeros(2)
        Z = _lme_z(ages - self.t_ref)
        r = values - self.population(x, ages)
        D = self.relative_cov
        V = np.eye(ages.size) + Z @ D @ Z.T
        return D @ Z.T @ np.linalg.solve(V, r)

    def predict(self, x, ages, values, times) -> np.ndarray:
        u = self.random_effects(x, ages, values)
        times = np.asarray(times, dtype=float).reshape(-1)
        return self.population(x, times) + _lme_z(times - self.t_ref) @ u


def _lme_z(tc):
    return np.column_stack([tc, np.ones_like(tc)])


def _lme_design(x, tc):
    return np.column_stack([np.tile(x, (tc.size, 1)), tc, np.ones_like(tc)])


def _lme_stats(groups, t_ref):
    """Sufficient statistics per subject for the profiled likelihood."""
    ZtZ, ZtX, Zty = [], [], []
    XtX = Xty = 0.0
    yty = 0.0
    N = 0
    for x, t, y in groups:
        tc = t - t_ref
        X = _lme_design(x, tc)
        Z = _lme_z(tc)
        ZtZ.append(Z.T @ Z)
        ZtX.append(Z.T @ X)
        Zty.append(Z.T @ y)
        XtX = XtX + X.T @ X
        Xty = Xty + X.T @ y
        yty += float(y @ y)
        N += y.size
    return (np.array(ZtZ), np.array(ZtX), np.array(Zty), np.asarray(XtX), np.asarray(Xty), yty, N)


def _profile_loglik(D, stats, ridge):
    """Profiled ML log-likelihood at relative random-effect covariance ``D``.

    Returns (loglik, beta, sigma2).
    """
    ZtZ, ZtX, Zty, XtX, Xty, yty, N = stats
    I2 = np.eye(2)
    A = I2 + ZtZ @ D  # (n, 2, 2)
    M = D @ np.linalg.inv(A)  # Woodbury core, V^-1 = I - Z M Z^T
    _, logdets = np.linalg.slogdet(A)
    XVX = XtX - np.einsum("nai,nab,nbj->ij", ZtX, M, ZtX)
    XVy = Xty - np.einsum("nai,nab,nb->i", ZtX, M, Zty)
    yVy = yty - np.einsum("na,nab,nb->", Zty, M, Zty)
    p = XVX.shape[0]
    beta = np.linalg.solve(XVX + ridge * np.eye(p), XVy)
    rss = yVy - 2 * beta @ XVy + beta @ XVX @ beta
    sigma2 = max(rss / N, 1e-300)
    ll = -0.5 * N * (np.log(2 * np.pi) + 1.0 + np.log(sigma2)) - 0.5 * logdets.sum()
    return float(ll), beta, float(sigma2)


def _chol2(params):
    L = np.array([[params[0], 0.0], [params[1], params[2]]])
    return L @ L.T


def fit_lme_target(groups, t_ref: float | None = None) -> LmeFit:
    """Maximum-likelihood LME for one target.

    ``groups`` is a list of (attributes, ages, values) for subjects with at
    least one observation.
    """
    groups = [(np.asarray(x, float), np.asarray(t, float), np.asarray(y, float))
              for x, t, y in groups if np.size(t)]
    if len(groups) < 2:
        raise ValueError("LME needs at least two subjects with observations")
    notes = []
    if t_ref is None:
        t_ref = float(np.mean(np.concatenate([g[1] for g in groups])))
    stats = _lme_stats(groups, t_ref)
    XtX = stats[3]
    ridge = 0.0
    if np.linalg.matrix_rank(XtX) < XtX.shape[0]:
        ridge = 1e-8 * max(float(np.max(np.diag(XtX))), 1.0)
        notes.append("singular fixed-effects design; ridge-regularized")
        warnings.warn(notes[-1], stacklevel=2)
    if max(g[1].size for g in groups) < 2:
        notes.append("every subject has a single visit; random effects are not identifiable")
        warnings.warn(notes[-1], stacklevel=2)

    def nll(params):
        try:
            val = -_profile_loglik(_chol2(params), stats, ridge)[0]
        except np.linalg.LinAlgError:
            return np.inf
        return val if np.isfinite(val) else np.inf

    start = np.array([0.3, 0.0, 0.3])
    start_ll = -nll(start)
    # relative (to noise) random-effect scales beyond 1e3 are numerically meaningless
    res = minimize(nll, start, method="L-BFGS-B", bounds=[(-LME_BOUND, LME_BOUND)] * 3)
    candidates = [(res.x, -res.fun), (start, start_ll), (np.zeros(3), -nll(np.zeros(3)))]
    params, _ = max(candidates, key=lambda c: c[1])
    D = _chol2(params)
    ll, beta, sigma2 = _profile_loglik(D, stats, ridge)
    return LmeFit(beta, sigma2 * D, sigma2, t_ref, ll, start_ll, notes)


@dataclass
class LmeBenchmark:
    fits: list[LmeFit]
    name: str = "lme"
    uses_history: bool = True

    def predict_one(self, x, history: History, times) -> np.ndarray:
        times = np.asarray(times, dtype=float).reshape(-1)
        cols = []
        for k, fit in enumerate(self.fits):
            ok = np.isfinite(history.values[:, k]) if history.n_visits else np.zeros(0, bool)
            cols.append(fit.predict(x, history.ages[ok], history.values[ok, k], times))
        return np.column_stack(cols)

    def predict(self, xs, histories, query_times) -> list[np.ndarray]:
        return [self.predict_one(x, h, t) for x, h, t in zip(xs, histories, query_times)]


def fit_lme(cohort: Cohort) -> LmeBenchmark:
    """One independent LME per target."""
    fits = []
    t_ref = float(np.mean(cohort.observed_age_range()))
    for k in range(cohort.m):
        groups = []
        for s in cohort.subjects:
            ok = np.isfinite(s.values[:, k])
            if ok.any():
                groups.append((s.attributes, s.ages[ok], s.values[ok, k]))
        fits.append(fit_lme_target(groups, t_ref))
    return LmeBenchmark(fits)


def predict_lme(fit: LmeFit, x, ages, values, times) -> np.ndarray:
    """Population line plus the subject's conditional random effects."""
    return fit.predict(x, ages, values, times)


# ---------------------------------------------------------------------------
# subject-specific line


def predict_subject_linear(history: History, times) -> np.ndarray:
    """Per target: least-squares line through the subject's own visits, or
    carry-forward of the single observed value. Targets never observed in
    the history are NaN."""
    if history.n_visits == 0:
        raise NotApplicableError("subject-specific line needs at least one past visit")
    times = np.asarray(times, dtype=float).reshape(-1)
    m = history.values.shape[1]
    out = np.full((times.size, m), np.nan)
    for k in range(m):
        ok = np.isfinite(history.values[:, k])
        t, y = history.ages[ok], history.values[ok, k]
        if t.size == 0:
            continue
        if t.size == 1 or np.ptp(t) == 0:
            out[:, k] = y.mean()
        else:
            out[:, k] = fit_line(t, y).predict(times)
    return out


@dataclass
class SubjectLinearBenchmark:
    name: str = "subject_linear"
    uses_history: bool = True

    def predict(self, xs, histories, query_times) -> list[np.ndarray]:
        return [predict_subject_linear(h, t) for h, t in zip(histories, query_times)]


def fit_all_benchmarks(cohort: Cohort, include_linear: bool = False) -> dict:
    """The six standard comparison models keyed by name."""
    out = {}
    for strata in STRATA:
        bm = fit_global_sigmoid(cohort, strata)
        out[bm.name] = bm
        if include_linear:
            lin = fit_global_sigmoid(cohort, strata, kind="linear")
            out[lin.name] = lin
    out["lme"] = fit_lme(cohort)
    out["subject_linear"] = SubjectLinearBenchmark()
    return out
