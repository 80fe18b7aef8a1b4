import numpy as np
import pytest
from scipy import stats

from sigprog.core_model import sigmoid_latent
from sigprog.synthesis import (ATTRIBUTE_NAMES, SynthConfig, default_theta, generate_cohort)


def test_all_missing():
    cohort, _ = generate_cohort(SynthConfig(n_subjects=30, seed=1, missing_prob=1.0))
    assert all(np.isnan(s.values).all() for s in cohort.subjects)


def test_certain_dropout_gives_single_visit():
    cohort, _ = generate_cohort(SynthConfig(n_subjects=50, seed=2, dropout_hazard=1.0))
    assert all(s.n_visits == 1 for s in cohort.subjects)


def test_mean_visit_count():
    cfg = SynthConfig(n_subjects=4000, seed=3)
    cohort, _ = generate_cohort(cfg)
    mean = np.mean([s.n_visits for s in cohort.subjects])
    assert abs(mean - cfg.expected_visits()) <= 0.03 * cfg.expected_visits()


def test_slope_regression_recovers_w():
    cfg = SynthConfig(n_subjects=5000, seed=4)
    cohort, truth = generate_cohort(cfg)
    X = np.column_stack([np.array([s.attributes for s in cohort.subjects]), np.ones(cohort.n)])
    s = np.array([t.slope for t in truth])
    coef, *_ = np.linalg.lstsq(X, s, rcond=None)
    resid = s - X @ coef
    sigma2 = resid @ resid / (X.shape[0] - X.shape[1])
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(X.T @ X)))
    theta = cfg.true_theta
    assert np.all(np.abs(coef[:-1] - theta.w) <= 2.5 * se[:-1])
    assert abs(coef[-1] - theta.b) <= 2.5 * se[-1]


def test_residuals_are_gaussian():
    cfg = SynthConfig(n_subjects=1500, seed=5, missing_prob=0.0, dropout_hazard=0.15)
    cohort, truth = generate_cohort(cfg)
    theta = cfg.true_theta
    z = []
    for s, lat in zip(cohort.subjects, truth):
        d = sigmoid_latent(s.ages[:, None], lat.inflections[None, :], lat.slope)
        z.append(((s.values - theta.c * d - theta.h) / theta.sigma_y).ravel())
    z = np.concatenate(z)
    n = z.size
    assert n >= 10_000
    assert abs(stats.skew(z)) <= 4 * np.sqrt(6 / n)
    assert abs(stats.kurtosis(z)) <= 4 * np.sqrt(24 / n)
    assert abs(z.std() - 1) < 0.03


def test_determinism_and_shapes():
    cfg = SynthConfig(n_subjects=40, seed=9)
    a, ta = generate_cohort(cfg)
    b, tb = generate_cohort(cfg)
    assert [s.subject_id for s in a.subjects] == [s.subject_id for s in b.subjects]
    for sa, sb in zip(a.subjects, b.subjects):
        np.testing.assert_array_equal(sa.values, sb.values)
        np.testing.assert_array_equal(sa.ages, sb.ages)
        assert sa.values.shape == (sa.n_visits, 3)
        assert np.all(np.diff(sa.ages) >= 0)
    assert all(x.slope == y.slope for x, y in zip(ta, tb))
    assert a.attribute_names == ATTRIBUTE_NAMES


def test_clipping_respects_ranges():
    cohort, _ = generate_cohort(SynthConfig(n_subjects=200, seed=6, clip=True, missing_prob=0.0))
    for k, t in enumerate(cohort.targets):
        vals = np.concatenate([s.values[:, k] for s in cohort.subjects])
        assert vals.min() >= t.low and vals.max() <= t.high


def test_imaging_variant():
    cfg = SynthConfig.with_imaging(n_subjects=5, seed=0)
    cohort, _ = generate_cohort(cfg)
    assert cohort.m == cfg.m == default_theta(with_imaging=True).m > 3


@pytest.mark.parametrize("kw", [dict(dropout_hazard=1.5), dict(missing_prob=-0.1),
                                dict(max_visits=0), dict(visit_interval_mean=0.0)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)
