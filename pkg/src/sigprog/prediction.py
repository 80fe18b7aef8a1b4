"""Test-time forecasting.

Without history the slope and inflections are drawn from their
attribute-conditioned priors. With history, the proxies are first fitted to
the subject's visits (population parameters frozen) and then used as
customized priors. Targets are produced by ancestral sampling through the
observation model.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, History, TargetInfo, pack
from .core_model import ModelParams, sigmoid_latent
from .inference import (TrainConfig, VariationalState, _chol_factor, gammas_from_unconstrained,
                        personalize_batch)

log = logging.getLogger(__name__)

DEFAULT_QUANTILES = (0.05, 0.5, 0.95)
POINT_SAMPLES = 1024


class UntrainedModelError(ValueError):
    """Forecasting was requested without trained parameters."""


class PersonalizationError(RuntimeError):
    """Test-time optimization of the proxies failed."""


@dataclass
class FittedModel:
    """Trained parameters plus the cohort metadata needed to use them."""

    theta: ModelParams
    targets: list[TargetInfo]
    attribute_names: list[str]
    age_range: tuple[float, float] | None = None
    summary: dict = field(default_factory=dict)

    @classmethod
    def from_training(cls, theta: ModelParams, cohort: Cohort, summary: dict | None = None):
        return cls(theta, list(cohort.targets), list(cohort.attribute_names),
                   cohort.observed_age_range(), summary or {})


def _theta_of(model) -> tuple[ModelParams, tuple[float, float] | None]:
    if model is None:
        raise UntrainedModelError("no trained model parameters were supplied")
    if isinstance(model, FittedModel):
        return model.theta.validate(), model.age_range
    if isinstance(model, ModelParams):
        return model.validate(), None
    raise UntrainedModelError(f"expected trained parameters, got {type(model).__name__}")


@dataclass
class PosteriorForecast:
    """Posterior predictive summaries at the query ages; arrays are (T, m)."""

    times: np.ndarray
    mean: np.ndarray
    stddev: np.ndarray
    quantile_levels: tuple[float, ...]
    quantiles: np.ndarray  # (Q, T, m)
    point: np.ndarray  # mean of the noise-free readouts
    samples: np.ndarray  # (n_samples, T, m)
    mode: str
    extrapolated: np.ndarray

    @property
    def sample_count(self) -> int:
        return self.samples.shape[0]

    def quantile(self, level: float) -> np.ndarray:
        return self.quantiles[self.quantile_levels.index(level)]


def personalize(x, history: History, theta_star, config: TrainConfig | None = None) -> VariationalState:
    """Fit one subject's proxy posterior to its visit history.

    An empty history returns the prior itself (slope mean ``w.x + b``,
    inflection means ``v.x + a``, isotropic ``sigma_p`` factor).
    """
    theta, _ = _theta_of(theta_star)
    config = config or TrainConfig.personalization()
    x = np.asarray(x, dtype=float).reshape(1, theta.d)
    obs = pack(x, [history], theta.m)
    try:
        gamma_u = personalize_batch(obs, theta, config)
    except RuntimeError as exc:
        raise PersonalizationError(str(exc)) from exc
    if not all(np.all(np.isfinite(v)) for v in gamma_u.values()):
        raise PersonalizationError("personalization produced non-finite proxies")
    return gammas_from_unconstrained(gamma_u)[0]


def sample_latents(gamma: VariationalState, n_samples: int, rng: np.random.Generator):
    """Ancestral draws of (slope, inflections) from a proxy or prior."""
    eta = rng.standard_normal(n_samples)
    eps = rng.standard_normal((n_samples, gamma.m))
    s = gamma.mu_s + gamma.sigma_s * eta
    p = gamma.mu_p + eps @ gamma.chol_p
    return s, p


def _readout(theta: ModelParams, times: np.ndarray, s: np.ndarray, p: np.ndarray) -> np.ndarray:
    lat = sigmoid_latent(times[None, :, None], p[:, None, :], s[:, None, None])
    return theta.c * lat + theta.h


def forecast(x, history: History | None, theta_star, times, n_samples: int = POINT_SAMPLES,
             rng: np.random.Generator | None = None, config: TrainConfig | None = None,
             quantile_levels=DEFAULT_QUANTILES, gamma: VariationalState | None = None
             ) -> PosteriorForecast:
    """Posterior predictive distribution of every target at each query age.

    ``gamma`` skips personalization when the proxies are already known.
    """
    theta, age_range = _theta_of(theta_star)
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    times = np.asarray(times, dtype=float).reshape(-1)
    if not np.all(np.isfinite(times)):
        raise ValueError("query times must be finite")
    rng = rng if rng is not None else np.random.default_rng(0)
    history = history if history is not None else History.empty(theta.m)
    personalized = history.n_observed > 0
    if gamma is None:
        gamma = (personalize(x, history, theta, config) if personalized
                 else VariationalState.from_prior(x, theta))
    s, p = sample_latents(gamma, n_samples, rng)
    means = _readout(theta, times, s, p)
    y = means + theta.sigma_y * rng.standard_normal(means.shape)
    levels = tuple(float(q) for q in quantile_levels)
    if age_range is not None:
        extrap = (times < age_range[0]) | (times > age_range[1])
        if extrap.any():
            warnings.warn(f"{int(extrap.sum())} query ages fall outside the training range "
                          f"{age_range}", stacklevel=2)
    else:
        extrap = np.zeros(times.size, dtype=bool)
    return PosteriorForecast(
        times=times,
        mean=y.mean(axis=0),
        stddev=y.std(axis=0, ddof=1) if n_samples > 1 else np.zeros(means.shape[1:]),
        quantile_levels=levels,
        quantiles=np.quantile(y, levels, axis=0) if levels else np.zeros((0,) + means.shape[1:]),
        point=means.mean(axis=0),
        samples=y,
        mode="personalized" if personalized else "prior-based",
        extrapolated=extrap,
    )


def map_point_forecast(x, history: History | None, theta_star, times,
                       config: TrainConfig | None = None, n_samples: int = POINT_SAMPLES,
                       seed: int = 0) -> np.ndarray:
    """Point prediction used in evaluation, shape (T, m).

    The Monte Carlo predictive density is a mixture of Gaussians
    ``N(c_k d^(s) + h_k, sigma_k^2)``; the returned value is the mixture mean,
    i.e. the average noise-free readout over posterior draws.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    theta, _ = _theta_of(theta_star)
    if times.size == 0:
        return np.zeros((0, theta.m))
    fc = forecast(x, history, theta, times, n_samples=n_samples,
                  rng=np.random.default_rng(seed), config=config, quantile_levels=())
    return fc.point


def predict_points_batch(theta_star, xs: np.ndarray, histories: list[History], query_times,
                         config: TrainConfig | None = None, n_samples: int = POINT_SAMPLES,
                         seed: int = 0) -> list[np.ndarray]:
    """Posterior-mean predictions for many subjects at once.

    Proxies of all subjects are personalized jointly (they are independent
    given the frozen parameters); draws use one stream per subject position.
    """
    theta, _ = _theta_of(theta_star)
    config = config or TrainConfig.personalization()
    xs = np.asarray(xs, dtype=float).reshape(len(histories), theta.d)
    obs = pack(xs, histories, theta.m)
    gamma_u = personalize_batch(obs, theta, config)
    chol = _chol_factor(gamma_u["chol"])
    sig = np.exp(gamma_u["log_sigma_s"])
    out = []
    for i, times in enumerate(query_times):
        times = np.asarray(times, dtype=float).reshape(-1)
        if times.size == 0:
            out.append(np.zeros((0, theta.m)))
            continue
        rng = np.random.default_rng([seed, i])
        s = gamma_u["mu_s"][i] + sig[i] * rng.standard_normal(n_samples)
        p = gamma_u["mu_p"][i] + rng.standard_normal((n_samples, theta.m)) @ chol[i]
        out.append(_readout(theta, times, s, p).mean(axis=0))
    return out


def personalize_many(theta_star, xs, histories, config: TrainConfig | None = None):
    theta, _ = _theta_of(theta_star)
    config = config or TrainConfig.personalization()
    obs = pack(np.asarray(xs, dtype=float).reshape(len(histories), theta.d), histories, theta.m)
    return gammas_from_unconstrained(personalize_batch(obs, theta, config))

