"""Interrogating a trained model: empirical inflection priors, mean latent
curves, attribute effect table and personalized trajectory exports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .cohort import Cohort, History
from .core_model import ModelParams, max_rate, sigmoid_latent
from .inference import TrainConfig, VariationalState
from .prediction import forecast, personalize_many

KDE_VARIANCE = 2.5  # years^2
MIN_KDE_SAMPLES = 10
KDE_CHUNK = 2_000_000  # grid x sample cells evaluated at once


def kde(samples, grid, variance: float = KDE_VARIANCE) -> np.ndarray:
    """Gaussian kernel density estimate with a fixed kernel variance."""
    samples = np.asarray(samples, dtype=float).reshape(-1)
    samples = samples[np.isfinite(samples)]
    if samples.size == 0:
        raise ValueError("cannot estimate a density from zero samples")
    if not variance > 0:
        raise ValueError("kernel variance must be positive")
    grid = np.asarray(grid, dtype=float)
    scale = np.sqrt(variance)
    # sorting makes the floating-point sum independent of input order
    samples = np.sort(samples)
    flat = grid.reshape(-1)
    out = np.empty(flat.size)
    step = max(1, KDE_CHUNK // samples.size)
    for i in range(0, flat.size, step):
        out[i:i + step] = norm.pdf(flat[i:i + step, None], loc=samples, scale=scale).mean(axis=-1)
    return out.reshape(grid.shape)


def inflection_samples(gammas: list[VariationalState], n_draws: int = 100,
                       seed: int = 0) -> np.ndarray:
    """Pooled inflection draws from per-subject proxies, shape (n * n_draws, m)."""
    if not gammas:
        raise ValueError("no proxies to sample from")
    rng = np.random.default_rng(seed)
    out = []
    for g in gammas:
        eps = rng.standard_normal((n_draws, g.m))
        out.append(g.mu_p + eps @ g.chol_p)
    return np.concatenate(out, axis=0)


@dataclass
class InflectionDensity:
    grid: np.ndarray
    density: np.ndarray  # (G, m)
    n_samples: np.ndarray  # per target
    target_names: list[str] = field(default_factory=list)

    def modes(self) -> np.ndarray:
        return self.grid[np.argmax(self.density, axis=0)]

    def integrals(self) -> np.ndarray:
        return np.trapezoid(self.density, self.grid, axis=0)

    def to_csv(self) -> str:
        names = self.target_names or [f"target_{k}" for k in range(self.density.shape[1])]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["age", *names])
        for t, row in zip(self.grid, self.density):
            wr.writerow([f"{t:.10g}", *(f"{v:.10g}" for v in row)])
        return buf.getvalue()


def inflection_density(source, grid, n_draws: int = 100, seed: int = 0,
                       variance: float = KDE_VARIANCE, min_samples: int = MIN_KDE_SAMPLES,
                       target_names=None) -> InflectionDensity:
    """Per-target density of inflection ages.

    ``source`` is either a list of proxies (each contributes ``n_draws``
    samples) or an array of already-sampled inflections of shape (N, m).
    """
    if isinstance(source, (list, tuple)) and source and isinstance(source[0], VariationalState):
        samples = inflection_samples(list(source), n_draws, seed)
    else:
        samples = np.asarray(source, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
    if samples.size == 0:
        raise ValueError("no inflection samples")
    grid = np.asarray(grid, dtype=float).reshape(-1)
    counts = np.isfinite(samples).sum(axis=0)
    if np.any(counts < min_samples):
        raise ValueError(f"need at least {min_samples} samples per target, got {counts.tolist()}")
    dens = np.column_stack([kde(samples[:, k], grid, variance) for k in range(samples.shape[1])])
    return InflectionDensity(grid, dens, counts, list(target_names or []))


@dataclass
class LatentCurves:
    grid: np.ndarray
    curves: np.ndarray  # (G, m)
    slope: float
    inflections: np.ndarray

    def lag_gaps(self) -> np.ndarray:
        """Mean-inflection offsets of each target relative to the first."""
        return self.inflections - self.inflections[0]


def mean_latent_curves(mean_slope: float, mean_inflections, grid) -> LatentCurves:
    """Latent sigmoids at the mean slope and mean inflection of every target."""
    grid = np.asarray(grid, dtype=float).reshape(-1)
    p = np.asarray(mean_inflections, dtype=float).reshape(-1)
    curves = sigmoid_latent(grid[:, None], p[None, :], float(mean_slope))
    return LatentCurves(grid, curves, float(mean_slope), p)


def latent_means(gammas: list[VariationalState]) -> tuple[float, np.ndarray]:
    """Empirical means of the proxy slope and inflection means."""
    if not gammas:
        raise ValueError("no proxies")
    return (float(np.mean([g.mu_s for g in gammas])),
            np.mean([g.mu_p for g in gammas], axis=0))


@dataclass
class RiskFactorRow:
    attribute: str
    w: float
    v: float
    delta_max_rate: float  # per unit of the attribute, absolute rate per year
    delta_inflection: float  # years per unit
    w_std: float = 0.0
    v_std: float = 0.0


def risk_factor_report(thetas, attribute_names=None) -> list[RiskFactorRow]:
    """Per-attribute effects, averaged over several trained parameter sets.

    The maximum progression rate of a sigmoid with slope s is s/4, so a unit
    change in attribute j moves it by w_j/4. This is reported as an absolute
    rate, not a percentage.
    """
    thetas = [thetas] if isinstance(thetas, ModelParams) else list(thetas)
    if not thetas:
        raise ValueError("no parameter sets given")
    w = np.array([t.w for t in thetas])
    v = np.array([t.v for t in thetas])
    names = list(attribute_names) if attribute_names is not None else [
        f"attr_{j}" for j in range(w.shape[1])]
    if len(names) != w.shape[1]:
        raise ValueError("attribute_names length does not match the parameter dimension")
    w_mean, v_mean = w.mean(axis=0), v.mean(axis=0)
    w_std, v_std = w.std(axis=0), v.std(axis=0)
    return [RiskFactorRow(names[j], float(w_mean[j]), float(v_mean[j]),
                          float(max_rate(w_mean[j])), float(v_mean[j]),
                          float(w_std[j]), float(v_std[j]))
            for j in range(w.shape[1])]


def risk_factor_csv(rows: list[RiskFactorRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["attribute", "w", "v", "delta_max_rate", "delta_inflection_years", "w_std", "v_std"])
    for r in rows:
        wr.writerow([r.attribute, *(f"{x:.10g}" for x in (r.w, r.v, r.delta_max_rate,
                                                         r.delta_inflection, r.w_std, r.v_std))])
    return buf.getvalue()


@dataclass
class TrajectoryExport:
    """Long table of predictive mean and one-standard-deviation band."""

    rows: list[dict]
    notes: list[str]

    COLUMNS = ("subject_id", "past_visits", "target", "age", "mean", "lower", "upper", "stddev")

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.COLUMNS)
        for r in self.rows:
            wr.writerow([r[c] if not isinstance(r[c], float) else f"{r[c]:.10g}"
                         for c in self.COLUMNS])
        return buf.getvalue()

    def select(self, subject_id, past_visits, target) -> dict[str, np.ndarray]:
        rows = [r for r in self.rows if r["subject_id"] == subject_id
                and r["past_visits"] == past_visits and r["target"] == target]
        return {c: np.array([r[c] for r in rows]) for c in ("age", "mean", "lower", "upper", "stddev")}


def export_personalized_trajectories(cohort: Cohort, theta_star: ModelParams, grid,
                                     conditions=(0, 4), n_samples: int = 1024, seed: int = 0,
                                     config: TrainConfig | None = None) -> TrajectoryExport:
    """Predictive bands for each subject under each history condition.

    A condition needing more visits than a subject has is skipped for that
    subject and recorded in ``notes``.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1)
    names = cohort.target_names
    rows, notes = [], []
    for cond in conditions:
        cond = int(cond)
        keep = [s for s in cohort.subjects if s.n_visits >= cond]
        for s in cohort.subjects:
            if s.n_visits < cond:
                notes.append(f"{s.subject_id}: {s.n_visits} visits, condition {cond} dropped")
        if not keep:
            continue
        hists = [s.history(cond) if cond else History.empty(cohort.m) for s in keep]
        xs = np.array([s.attributes for s in keep])
        gammas = (personalize_many(theta_star, xs, hists, config) if cond
                  else [VariationalState.from_prior(x, theta_star) for x in xs])
        for i, (s, g) in enumerate(zip(keep, gammas)):
            fc = forecast(s.attributes, hists[i], theta_star, grid, n_samples=n_samples,
                          rng=np.random.default_rng([seed, cond, i]), gamma=g, quantile_levels=())
            for k, name in enumerate(names):
                for j, t in enumerate(grid):
                    mu, sd = float(fc.mean[j, k]), float(fc.stddev[j, k])
                    rows.append({"subject_id": s.subject_id, "past_visits": cond, "target": name,
                                 "age": float(t), "mean": mu, "lower": mu - sd,
                                 "upper": mu + sd, "stddev": sd})
    return TrajectoryExport(rows, notes)
