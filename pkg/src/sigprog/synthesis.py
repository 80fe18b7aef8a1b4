"""Synthetic longitudinal cohorts drawn from the generative model, with
irregular visit spacing, geometric dropout and per-target missingness."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .cohort import Cohort, Subject, TargetInfo
from .core_model import LatentState, ModelParams, sigmoid_latent

ATTRIBUTE_NAMES = ["apoe4", "sex", "education", "hippocampus", "ventricles"]
ATTRIBUTE_UNITS = ["E4 allele count", "0=female,1=male", "standardized", "standardized",
                   "standardized"]
APOE_PROBS = (0.6, 0.3, 0.1)

CLINICAL_TARGETS = [
    TargetInfo("MMSE", 0.0, 30.0, "decreasing"),
    TargetInfo("ADAS", 0.0, 70.0, "increasing"),
    TargetInfo("CDRSB", 0.0, 18.0, "increasing"),
]
IMAGING_TARGETS = [
    TargetInfo("HIPPO", 0.0, 10.0, "decreasing"),
    TargetInfo("VENT", 0.0, 10.0, "increasing"),
]


def default_theta(with_imaging: bool = False) -> ModelParams:
    """Ground-truth parameters: slope and inflection weights for APOE, sex and
    education follow the published estimates; the imaging attributes get zero
    weight. Lags put MMSE first, then ADAS, then CDR-SB."""
    a = [70.0, 73.5, 78.0]
    c = [-30.0, 70.0, 18.0]
    h = [30.0, 0.0, 0.0]
    sigma_y = [1.5, 3.5, 0.9]
    if with_imaging:
        a += [68.0, 72.0]
        c += [-10.0, 10.0]
        h += [10.0, 0.0]
        sigma_y += [0.3, 0.3]
    return ModelParams(
        w=[0.98, 0.38, 0.33, 0.0, 0.0], b=0.3,
        v=[0.11, 0.31, 0.44, 0.0, 0.0], a=a,
        sigma_s=0.1, sigma_p=0.5,
        c=c, h=h, sigma_y=sigma_y,
    )


@dataclass
class SynthConfig:
    n_subjects: int = 500
    true_theta: ModelParams = field(default_factory=default_theta)
    targets: list[TargetInfo] = field(default_factory=lambda: list(CLINICAL_TARGETS))
    age_range: tuple[float, float] = (60.0, 85.0)
    visit_interval_mean: float = 9.0  # months
    visit_interval_std: float = 4.0
    dropout_hazard: float = 0.3
    max_visits: int = 10
    missing_prob: float = 0.1
    clip: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_hazard <= 1.0:
            raise ValueError("dropout_hazard must lie in [0, 1]")
        if not 0.0 <= self.missing_prob <= 1.0:
            raise ValueError("missing_prob must lie in [0, 1]")
        if not self.visit_interval_mean > 0:
            raise ValueError("visit_interval_mean must be positive")
        if self.max_visits < 1:
            raise ValueError("max_visits must be at least 1")
        if self.true_theta.m != len(self.targets):
            raise ValueError("true_theta and targets disagree on the number of targets")
        if self.true_theta.d != len(ATTRIBUTE_NAMES):
            raise ValueError(f"true_theta must have d={len(ATTRIBUTE_NAMES)}")
        self.true_theta.validate()

    @property
    def d(self) -> int:
        return self.true_theta.d

    @property
    def m(self) -> int:
        return self.true_theta.m

    @classmethod
    def with_imaging(cls, **kw) -> "SynthConfig":
        kw.setdefault("true_theta", default_theta(with_imaging=True))
        kw.setdefault("targets", CLINICAL_TARGETS + IMAGING_TARGETS)
        return cls(**kw)

    def expected_visits(self) -> float:
        """Mean visits per subject under geometric dropout capped at ``max_visits``."""
        q = 1.0 - self.dropout_hazard
        if q == 1.0:
            return float(self.max_visits)
        return (1.0 - q**self.max_visits) / (1.0 - q)


def sample_attributes(rng: np.random.Generator) -> np.ndarray:
    apoe = rng.choice(3, p=APOE_PROBS)
    sex = rng.integers(0, 2)
    rest = rng.standard_normal(3)
    return np.concatenate([[apoe, sex], rest]).astype(float)


def _visit_count(rng, hazard, cap):
    k = 1
    while k < cap and rng.random() >= hazard:
        k += 1
    return k


def _gaps_months(rng, n, mean, std):
    if n == 0:
        return np.zeros(0)
    if std <= 0:
        return np.full(n, mean)
    lo = (0.0 - mean) / std
    return truncnorm.rvs(lo, np.inf, loc=mean, scale=std, size=n, random_state=rng)


def generate_subject(config: SynthConfig, rng: np.random.Generator, subject_id: str):
    theta = config.true_theta
    x = sample_attributes(rng)
    latent = LatentState(
        theta.slope_mean(x) + theta.sigma_s * rng.standard_normal(),
        theta.inflection_mean(x) + theta.sigma_p * rng.standard_normal(theta.m),
    )
    n_vis = _visit_count(rng, config.dropout_hazard, config.max_visits)
    age0 = rng.uniform(*config.age_range)
    ages = age0 + np.concatenate([[0.0], np.cumsum(_gaps_months(
        rng, n_vis - 1, config.visit_interval_mean, config.visit_interval_std))]) / 12.0
    lat = sigmoid_latent(ages[:, None], latent.inflections[None, :], latent.slope)
    values = theta.c * lat + theta.h + theta.sigma_y * rng.standard_normal(lat.shape)
    if config.clip:
        lo = np.array([t.low for t in config.targets])
        hi = np.array([t.high for t in config.targets])
        values = np.clip(values, lo, hi)
    values[rng.random(values.shape) < config.missing_prob] = np.nan
    return Subject(subject_id, x, ages, values), latent


def generate_cohort(config: SynthConfig) -> tuple[Cohort, list[LatentState]]:
    """Draw a cohort and the per-subject ground-truth latent states."""
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_subjects)
    subjects, truth = [], []
    width = max(4, len(str(config.n_subjects)))
    for i, ss in enumerate(seeds):
        subj, lat = generate_subject(config, np.random.default_rng(ss), f"S{i:0{width}d}")
        subjects.append(subj)
        truth.append(lat)
    cohort = Cohort(subjects, list(config.targets), list(ATTRIBUTE_NAMES), list(ATTRIBUTE_UNITS))
    return cohort, truth
