import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sigprog.cohort import Cohort, Subject, TargetInfo, pack_cohort
from sigprog.core_model import ModelParams, ParameterDomainError
from sigprog.inference import (Adam, OptimizationError, TrainConfig, VariationalState,
                               draw_noise, elbo_and_gradients, elbo_estimate, evaluate_objective,
                               gammas_from_unconstrained, gammas_to_unconstrained,
                               initial_params, moving_average, prior_gammas, proxy_entropy,
                               reparameterize, train)
from sigprog.synthesis import SynthConfig, generate_cohort

LOG_2PIE = 2.8378770664093454836  # log(2 pi e), mpmath


def _perturbed_gammas(obs, theta, rng):
    g = prior_gammas(obs.x, theta)
    g["chol"] += np.tril(rng.normal(0, 0.3, g["chol"].shape))
    g["mu_p"] += rng.normal(0, 1, g["mu_p"].shape)
    g["mu_s"] += rng.normal(0, 0.2, g["mu_s"].shape)
    return g


def fd_check(theta_u, gamma_u, obs, eta, eps, step=1e-5, floor=None, stats=None):
    """Largest relative gap between analytic and central-difference gradients.

    The denominator is floored at ``1e-6 * max(1, |ELBO|)``: central-difference
    roundoff is about ``|ELBO| * eps_mach / step``, so components smaller than
    the floor (exact zeros included) are compared on an absolute scale.
    ``stats`` (a dict) receives the number of components checked and floored.
    """
    res = evaluate_objective(theta_u, gamma_u, obs, eta, eps)
    if floor is None:
        floor = 1e-6 * max(1.0, abs(res.elbo))
    worst = 0.0
    for which, params, grads in (("theta", theta_u, res.grad_theta), ("gamma", gamma_u, res.grad_gamma)):
        for key in params:
            arr = np.array(params[key], dtype=float)
            for idx in np.ndindex(arr.shape):
                if key == "chol" and idx[-1] > idx[-2]:
                    continue

                def f(delta):
                    moved = arr.copy()
                    moved[idx] += delta
                    p2 = dict(params, **{key: moved})
                    args = (p2, gamma_u) if which == "theta" else (theta_u, p2)
                    return evaluate_objective(*args, obs, eta, eps, grad=False).elbo

                num = (f(step) - f(-step)) / (2 * step)
                ana = float(np.asarray(grads[key])[idx])
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
                if stats is not None:
                    stats["checked"] = stats.get("checked", 0) + 1
                    stats["floored"] = stats.get("floored", 0) + (max(abs(num), abs(ana)) < floor)
    return worst


class TestEntropy:
    def test_standard(self):
        g = VariationalState(0.0, 1.0, [0.0], [[1.0]])
        assert proxy_entropy(g) == pytest.approx(LOG_2PIE, rel=1e-15)

    def test_doubling_factor(self):
        base = VariationalState(0.3, 0.7, [70.0, 72.0], [[1.0, 0.0], [0.4, 0.5]])
        doubled = VariationalState(0.3, 0.7, [70.0, 72.0], 2 * base.chol_p)
        assert proxy_entropy(doubled) - proxy_entropy(base) == pytest.approx(2 * np.log(2), rel=1e-12)

    def test_degenerate(self):
        with pytest.raises(ParameterDomainError):
            proxy_entropy(VariationalState(0.0, 1.0, [0.0, 0.0], [[1.0, 0.0], [0.2, 0.0]]))

    def test_upper_factor_rejected(self):
        with pytest.raises(ParameterDomainError):
            VariationalState(0.0, 1.0, [0.0, 0.0], [[1.0, 0.3], [0.0, 1.0]]).validate()


class TestObjective:
    def test_gradients_three_subjects(self):
        cfg = SynthConfig(n_subjects=3, seed=3)
        cohort, _ = generate_cohort(cfg)
        obs = pack_cohort(cohort)
        rng = np.random.default_rng(0)
        g = _perturbed_gammas(obs, cfg.true_theta, rng)
        eta, eps = draw_noise(rng, 4, obs.n, obs.m)
        assert fd_check(cfg.true_theta.to_unconstrained(), g, obs, eta, eps) <= 1e-4

    def test_public_wrapper_matches(self, toy_theta):
        subj = [Subject("a", [0.3, 1.0], [70.0, 71.0], [[25.0, 2.0], [24.0, np.nan]]),
                Subject("b", [1.0, 0.0], [75.0], [[18.0, 6.0]])]
        cohort = Cohort(subj, [TargetInfo("A", 0, 30, "decreasing"), TargetInfo("B", 0, 18)],
                        ["x1", "x2"])
        gammas = [VariationalState.from_prior(s.attributes, toy_theta) for s in subj]
        cfg = TrainConfig(mc_samples=5)
        elbo, gt, gg = elbo_and_gradients(toy_theta, gammas, cohort, cfg, np.random.default_rng(3))
        obs = pack_cohort(cohort)
        eta, eps = draw_noise(np.random.default_rng(3), 5, obs.n, obs.m)
        direct = evaluate_objective(toy_theta.to_unconstrained(), gammas_to_unconstrained(gammas),
                                    obs, eta, eps)
        assert elbo == direct.elbo
        np.testing.assert_array_equal(gt["a"], direct.grad_theta["a"])

    def test_dimension_mismatch(self, toy_theta):
        cohort, _ = generate_cohort(SynthConfig(n_subjects=2, seed=0))
        gammas = [VariationalState.from_prior([0, 0], toy_theta)] * 2
        with pytest.raises(ValueError):
            elbo_and_gradients(toy_theta, gammas, cohort, TrainConfig(), np.random.default_rng(0))

    def test_all_missing_is_likelihood_free(self):
        cfg = SynthConfig(n_subjects=6, seed=1, missing_prob=1.0)
        cohort, _ = generate_cohort(cfg)
        theta = cfg.true_theta
        gammas = [VariationalState.from_prior(s.attributes, theta) for s in cohort.subjects]
        elbo, _, _ = elbo_and_gradients(theta, gammas, cohort, TrainConfig(), np.random.default_rng(0))
        # proxies equal to the priors: cross-entropy plus entropy is -KL = 0
        assert elbo == pytest.approx(0.0, abs=1e-9)
        other = theta.copy()
        other.c, other.h, other.sigma_y = other.c * 2, other.h + 5, other.sigma_y * 3
        moved = [VariationalState(g.mu_s + 0.1, g.sigma_s * 0.5, g.mu_p - 1, g.chol_p * 0.7)
                 for g in gammas]
        e1, _, _ = elbo_and_gradients(theta, moved, cohort, TrainConfig(), np.random.default_rng(0))
        e2, _, _ = elbo_and_gradients(other, moved, cohort, TrainConfig(), np.random.default_rng(7))
        assert e1 == pytest.approx(e2, rel=1e-12)

    def test_doubling_samples_within_mc_error(self, small_cohort):
        cohort, _ = small_cohort
        theta = SynthConfig().true_theta
        gammas = [VariationalState.from_prior(s.attributes, theta) for s in cohort.subjects]
        e1, se1 = elbo_estimate(theta, gammas, cohort, 64, np.random.default_rng(0))
        e2, se2 = elbo_estimate(theta, gammas, cohort, 128, np.random.default_rng(0))
        assert abs(e2 - e1) < 3 * se1

    def test_reparameterization_identity(self, rng):
        g = {"mu_s": rng.normal(size=4), "log_sigma_s": rng.normal(size=4),
             "mu_p": rng.normal(size=(4, 3)), "chol": np.tril(rng.normal(size=(4, 3, 3)))}
        eta, eps = draw_noise(rng, 5, 4, 3)
        s, p = reparameterize(g, eta, eps)
        assert np.array_equal(s - (eta * np.exp(g["log_sigma_s"]) + g["mu_s"]), np.zeros_like(s))
        chol = gammas_from_unconstrained(g)
        for i in range(4):
            np.testing.assert_allclose(p[:, i], g["mu_p"][i] + eps[:, i] @ chol[i].chol_p, rtol=1e-13)

    def test_proxy_only_ascent_with_common_draws(self, small_cohort):
        cohort, _ = small_cohort
        theta = SynthConfig().true_theta
        obs = pack_cohort(cohort)
        theta_u = theta.to_unconstrained()
        gamma_u = prior_gammas(obs.x, theta)
        eta, eps = draw_noise(np.random.default_rng(2), 8, obs.n, obs.m)
        opt = Adam(1e-2)
        values = []
        for it in range(600):
            res = evaluate_objective(theta_u, gamma_u, obs, eta, eps)
            values.append(res.elbo)
            opt.step(gamma_u, res.grad_gamma)
        checkpoints = moving_average(values, 50)[::50]
        assert np.all(np.diff(checkpoints) >= 0)
        assert values[-1] > values[0]


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_proxy_packing_round_trip(m, n, seed):
    rng = np.random.default_rng(seed)
    states = []
    for _ in range(n):
        chol = np.tril(rng.normal(size=(m, m)), -1) + np.diag(rng.uniform(0.1, 2, m))
        states.append(VariationalState(rng.normal(), rng.uniform(0.1, 2), rng.normal(size=m), chol))
    back = gammas_from_unconstrained(gammas_to_unconstrained(states))
    for a, b in zip(states, back):
        assert b.mu_s == a.mu_s
        np.testing.assert_allclose(b.chol_p, a.chol_p, rtol=1e-14)
        np.testing.assert_allclose(b.sigma_s, a.sigma_s, rtol=1e-14)


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(mc_samples=0)
        with pytest.raises(ValueError):
            TrainConfig(step_size=-1)
        with pytest.raises(ValueError):
            TrainConfig(restarts=-1)

    def test_minimal_cohort(self):
        cohort = Cohort([Subject("only", [1.0], [72.0], [[20.0]])],
                        [TargetInfo("A", 0, 30, "decreasing")], ["x"])
        res = train(cohort, TrainConfig(max_iters=200, restarts=1))
        for f in ("w", "b", "v", "a", "c", "h", "sigma_y"):
            assert np.all(np.isfinite(getattr(res.theta, f)))

    def test_bitwise_determinism(self):
        cohort, _ = generate_cohort(SynthConfig(n_subjects=40, seed=4))
        cfg = TrainConfig(max_iters=300, restarts=2, seed=5)
        a, b = train(cohort, cfg), train(cohort, cfg)
        for f in ("w", "b", "v", "a", "sigma_s", "sigma_p", "c", "h", "sigma_y"):
            assert np.array_equal(getattr(a.theta, f), getattr(b.theta, f))
        assert np.array_equal(a.trace, b.trace)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self):
        cohort = Cohort([Subject("a", [0.0], [70.0, 71.0], [[1e300], [-1e300]]),
                         Subject("b", [1.0], [72.0], [[1e300]])],
                        [TargetInfo("A", 0, 30)], ["x"])
        with pytest.raises(OptimizationError, match="iteration"):
            train(cohort, TrainConfig(max_iters=50, restarts=1))

    def test_empty_cohort(self):
        with pytest.raises(ValueError):
            train(Cohort([], [TargetInfo("A", 0, 1)], ["x"]))

    def test_init_follows_polarity(self, small_cohort):
        cohort, _ = small_cohort
        theta = initial_params(cohort)
        assert theta.c.tolist() == [-30.0, 70.0, 18.0]
        assert theta.h.tolist() == [30.0, 0.0, 0.0]
        assert theta.b > 0 and np.all(theta.w == 0) and np.all(theta.v == 0)

    def test_summary_counts_zero_visit_subjects(self):
        cohort, _ = generate_cohort(SynthConfig(n_subjects=20, seed=2))
        subj = cohort.subjects + [Subject("empty", np.zeros(5), [], np.zeros((0, 3)))]
        res = train(Cohort(subj, cohort.targets, cohort.attribute_names),
                    TrainConfig(max_iters=100, restarts=1))
        assert res.summary()["n_zero_visit_subjects"] == 1
        assert len(res.gammas) == 21

    def test_fit_tracks_truth(self, small_fit):
        truth = SynthConfig().true_theta
        assert np.corrcoef(small_fit.theta.w, truth.w)[0, 1] > 0.9
        assert np.all(np.diff(small_fit.theta.a) > 0)
