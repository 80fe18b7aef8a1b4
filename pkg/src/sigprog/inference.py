"""Variational training of the progression model.

The objective is the Monte Carlo ELBO

    sum_i E_q[ sum_{j,k observed} log p(y_ijk | s_i, p_ik) ]
        + E_q[log p(s_i, p_i | x_i)] + H[q(s_i)] + H[q(p_i)]

with q(s_i) = N(mu_s, sigma_s^2) and q(p_i) = N(mu_p, G^T G) for a lower
triangular G. The likelihood expectation is estimated with reparameterized
draws ``s = mu_s + sigma_s * eta`` and ``p = mu_p + G^T eps``; the prior
cross-entropy and the entropies are Gaussian and evaluated in closed form.
Gradients are derived by hand and vectorized over subjects and draws.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .cohort import Cohort, History, PackedObservations, pack, pack_cohort
from .core_model import LOG_2PI, ModelParams, ParameterDomainError

log = logging.getLogger(__name__)

LOG_2PIE = LOG_2PI + 1.0

THETA_KEYS = ("w", "b", "v", "a", "log_sigma_s", "log_sigma_p", "c", "h", "log_sigma_y")
GAMMA_KEYS = ("mu_s", "log_sigma_s", "mu_p", "chol")


class OptimizationError(RuntimeError):
    """Training produced a non-finite objective."""


@dataclass
class VariationalState:
    """Gaussian proxy posterior of one subject.

    ``chol_p`` is lower triangular with a positive diagonal and the inflection
    covariance is ``chol_p.T @ chol_p``.
    """

    mu_s: float
    sigma_s: float
    mu_p: np.ndarray
    chol_p: np.ndarray

    def __post_init__(self):
        self.mu_s = float(self.mu_s)
        self.sigma_s = float(self.sigma_s)
        self.mu_p = np.asarray(self.mu_p, dtype=float).reshape(-1)
        self.chol_p = np.asarray(self.chol_p, dtype=float).reshape(self.mu_p.size, self.mu_p.size)

    @property
    def m(self) -> int:
        return self.mu_p.size

    @property
    def cov_p(self) -> np.ndarray:
        return self.chol_p.T @ self.chol_p

    def validate(self):
        if not self.sigma_s > 0:
            raise ParameterDomainError(f"proxy slope sigma must be positive, got {self.sigma_s}")
        diag = np.diag(self.chol_p)
        if not np.all(diag > 0):
            raise ParameterDomainError(f"proxy Cholesky diagonal must be positive, got {diag}")
        if np.any(np.triu(self.chol_p, 1) != 0):
            raise ParameterDomainError("proxy Cholesky factor must be lower triangular")
        return self

    @classmethod
    def from_prior(cls, x, theta: ModelParams) -> "VariationalState":
        return cls(theta.slope_mean(x), theta.sigma_s, theta.inflection_mean(x),
                   theta.sigma_p * np.eye(theta.m))


@dataclass
class TrainConfig:
    mc_samples: int = 8
    step_size: float = 1e-2
    max_iters: int = 5000
    convergence_tol: float = 1e-4
    restarts: int = 3
    seed: int = 0
    report_samples: int = 256
    window: int = 50

    def __post_init__(self):
        for name in ("mc_samples", "max_iters", "report_samples", "window"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be nonnegative")

    @classmethod
    def personalization(cls, **overrides) -> "TrainConfig":
        base = dict(max_iters=2000, restarts=1, seed=1)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# proxy parameter packing


def gammas_to_unconstrained(gammas: list[VariationalState]) -> dict[str, np.ndarray]:
    n = len(gammas)
    m = gammas[0].m if n else 0
    chol = np.zeros((n, m, m))
    for i, g in enumerate(gammas):
        g.validate()
        raw = np.tril(g.chol_p, -1)
        raw[np.diag_indices(m)] = np.log(np.diag(g.chol_p))
        chol[i] = raw
    return {
        "mu_s": np.array([g.mu_s for g in gammas], dtype=float),
        "log_sigma_s": np.log([g.sigma_s for g in gammas]).astype(float).reshape(n),
        "mu_p": np.array([g.mu_p for g in gammas], dtype=float).reshape(n, m),
        "chol": chol,
    }


def gammas_from_unconstrained(u: dict[str, np.ndarray]) -> list[VariationalState]:
    chol = _chol_factor(u["chol"])
    return [VariationalState(u["mu_s"][i], np.exp(u["log_sigma_s"][i]), u["mu_p"][i], chol[i])
            for i in range(u["mu_s"].size)]


def prior_gammas(x: np.ndarray, theta: ModelParams) -> dict[str, np.ndarray]:
    """Unconstrained proxies equal to each subject's prior."""
    x = np.asarray(x, dtype=float).reshape(-1, theta.d)
    n, m = x.shape[0], theta.m
    chol = np.zeros((n, m, m))
    chol[:, np.arange(m), np.arange(m)] = np.log(theta.sigma_p)
    return {
        "mu_s": theta.slope_mean(x).reshape(n),
        "log_sigma_s": np.full(n, np.log(theta.sigma_s)),
        "mu_p": theta.inflection_mean(x).reshape(n, m),
        "chol": chol,
    }


def _chol_factor(raw: np.ndarray) -> np.ndarray:
    m = raw.shape[-1]
    g = np.tril(raw, -1)
    idx = np.arange(m)
    g[..., idx, idx] = np.exp(raw[..., idx, idx])
    return g


def proxy_entropy(gamma: VariationalState) -> float:
    """Entropy of q(s) plus entropy of q(p)."""
    gamma.validate()
    log_det_chol = np.sum(np.log(np.diag(gamma.chol_p)))
    return float(0.5 * LOG_2PIE + np.log(gamma.sigma_s) + 0.5 * gamma.m * LOG_2PIE + log_det_chol)


# ---------------------------------------------------------------------------
# objective


@dataclass
class ObjectiveValue:
    elbo: float
    sample_totals: np.ndarray  # per-draw likelihood sums, for standard errors
    grad_theta: dict[str, np.ndarray] | None = None
    grad_gamma: dict[str, np.ndarray] | None = None
    per_subject: np.ndarray | None = None

    @property
    def stderr(self) -> float:
        s = self.sample_totals.size
        return float(np.std(self.sample_totals, ddof=1) / np.sqrt(s)) if s > 1 else float("nan")


def draw_noise(rng: np.random.Generator, n_samples: int, n: int, m: int):
    """Standard-normal auxiliaries (eta, eps) of shapes (S, n) and (S, n, m)."""
    eta = rng.standard_normal((n_samples, n))
    eps = rng.standard_normal((n_samples, n, m))
    return eta, eps


def reparameterize(gamma_u: dict[str, np.ndarray], eta: np.ndarray, eps: np.ndarray):
    """Map auxiliaries to slope and inflection draws under the proxies."""
    sig = np.exp(gamma_u["log_sigma_s"])
    s = gamma_u["mu_s"] + sig * eta
    p = gamma_u["mu_p"] + np.einsum("njk,snj->snk", _chol_factor(gamma_u["chol"]), eps)
    return s, p


def evaluate_objective(theta_u: dict, gamma_u: dict, obs: PackedObservations,
                       eta: np.ndarray, eps: np.ndarray, grad: bool = True,
                       per_subject: bool = False) -> ObjectiveValue:
    """ELBO estimate (and gradients) for fixed auxiliary draws.

    Gradients are with respect to the unconstrained coordinates in
    ``theta_u`` and ``gamma_u``.
    """
    n, m = obs.n, obs.m
    n_samples = eta.shape[0]
    x = obs.x
    w, b, v, a = theta_u["w"], float(theta_u["b"]), theta_u["v"], theta_u["a"]
    sigma_s = float(np.exp(theta_u["log_sigma_s"]))
    sigma_p = float(np.exp(theta_u["log_sigma_p"]))
    c, h = theta_u["c"], theta_u["h"]
    log_sig_y = theta_u["log_sigma_y"]
    sig_y = np.exp(log_sig_y)

    sig_q = np.exp(gamma_u["log_sigma_s"])
    G = _chol_factor(gamma_u["chol"])
    mu_s, mu_p = gamma_u["mu_s"], gamma_u["mu_p"]
    s_draw = mu_s + sig_q * eta
    p_draw = mu_p + np.einsum("njk,snj->snk", G, eps)

    # likelihood over observed entries, shape (S, N)
    subj, tgt, t, y = obs.subject, obs.target, obs.time, obs.value
    s_o = s_draw[:, subj]
    p_o = p_draw[:, subj, tgt]
    delta = t - p_o
    z = delta * s_o
    lat = expit(z)
    ck, hk, sk = c[tgt], h[tgt], sig_y[tgt]
    r = y - (ck * lat + hk)
    inv_var = 1.0 / (sk * sk)
    ll = -0.5 * LOG_2PI - log_sig_y[tgt] - 0.5 * r * r * inv_var
    sample_totals = ll.sum(axis=1)
    lik = float(sample_totals.mean()) if obs.size else 0.0

    # prior cross-entropy under q, closed form
    es = mu_s - (x @ w + b)
    ep = mu_p - ((x @ v)[:, None] + a)
    var_p = np.sum(G * G, axis=1)  # diag of G^T G, (n, m)
    cross_s = -0.5 * LOG_2PI - np.log(sigma_s) - 0.5 * (es * es + sig_q * sig_q) / sigma_s**2
    cross_p = -0.5 * LOG_2PI - np.log(sigma_p) - 0.5 * (ep * ep + var_p) / sigma_p**2
    diag_raw = np.diagonal(gamma_u["chol"], axis1=1, axis2=2)
    entropy = 0.5 * (1 + m) * LOG_2PIE + gamma_u["log_sigma_s"] + diag_raw.sum(axis=1)
    closed = cross_s + cross_p.sum(axis=1) + entropy
    elbo = lik + float(closed.sum())

    out = ObjectiveValue(elbo=elbo, sample_totals=sample_totals + closed.sum())
    if per_subject:
        lik_i = np.bincount(subj, weights=ll.mean(axis=0), minlength=n) if obs.size else np.zeros(n)
        out.per_subject = lik_i + closed
    if not grad:
        return out

    inv_S = 1.0 / n_samples
    g_mean = r * inv_var
    g_z = g_mean * ck * (lat * expit(-z))
    g_s = g_z * delta
    g_p = -g_z * s_o

    gt = {}
    gt["c"] = np.bincount(tgt, weights=(g_mean * lat).sum(axis=0), minlength=m) * inv_S
    gt["h"] = np.bincount(tgt, weights=g_mean.sum(axis=0), minlength=m) * inv_S
    gt["log_sigma_y"] = np.bincount(tgt, weights=(r * r * inv_var - 1.0).sum(axis=0),
                                    minlength=m) * inv_S
    ws = es / sigma_s**2
    wp = ep / sigma_p**2
    gt["w"] = x.T @ ws
    gt["b"] = np.array(ws.sum())
    gt["v"] = x.T @ wp.sum(axis=1)
    gt["a"] = wp.sum(axis=0)
    gt["log_sigma_s"] = np.array(np.sum((es * es + sig_q * sig_q) / sigma_s**2 - 1.0))
    gt["log_sigma_p"] = np.array(np.sum((ep * ep + var_p) / sigma_p**2 - 1.0))

    # accumulate per-draw subject gradients, (S, n) and (S, n, m)
    offs = (np.arange(n_samples) * n)[:, None]
    G_s = np.bincount((offs + subj).ravel(), weights=g_s.ravel(),
                      minlength=n_samples * n).reshape(n_samples, n)
    offs_p = (np.arange(n_samples) * n * m)[:, None]
    G_p = np.bincount((offs_p + subj * m + tgt).ravel(), weights=g_p.ravel(),
                      minlength=n_samples * n * m).reshape(n_samples, n, m)

    gg = {}
    gg["mu_s"] = G_s.sum(axis=0) * inv_S - ws
    gg["log_sigma_s"] = (G_s * eta).sum(axis=0) * inv_S * sig_q - sig_q**2 / sigma_s**2 + 1.0
    gg["mu_p"] = G_p.sum(axis=0) * inv_S - wp
    # d p_k / d G_jk = eps_j; prior term contributes -G_jk / sigma_p^2
    gG = np.einsum("snj,snk->njk", eps, G_p) * inv_S - G / sigma_p**2
    gG = np.tril(gG)
    idx = np.arange(m)
    gG[:, idx, idx] = gG[:, idx, idx] * G[:, idx, idx] + 1.0
    gg["chol"] = gG

    out.grad_theta = gt
    out.grad_gamma = gg
    return out


def elbo_and_gradients(theta: ModelParams, gammas: list[VariationalState], cohort: Cohort,
                       config: TrainConfig, rng: np.random.Generator):
    """One Monte Carlo ELBO estimate with its gradients.

    Returns ``(elbo, grad_theta, grad_gammas)``; gradients are dictionaries
    keyed by unconstrained coordinate (sigmas as log-sigmas, the proxy
    Cholesky diagonal as logs).
    """
    if cohort.n == 0:
        raise ValueError("cohort is empty")
    if theta.d != cohort.d or theta.m != cohort.m:
        raise ValueError(f"parameter dims (d={theta.d}, m={theta.m}) do not match cohort "
                         f"(d={cohort.d}, m={cohort.m})")
    if len(gammas) != cohort.n:
        raise ValueError(f"expected {cohort.n} proxy states, got {len(gammas)}")
    obs = pack_cohort(cohort)
    eta, eps = draw_noise(rng, config.mc_samples, obs.n, obs.m)
    res = evaluate_objective(theta.to_unconstrained(), gammas_to_unconstrained(gammas), obs, eta, eps)
    return res.elbo, res.grad_theta, res.grad_gamma


def elbo_estimate(theta: ModelParams, gammas: list[VariationalState], cohort: Cohort,
                  n_samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """ELBO estimate and its Monte Carlo standard error."""
    obs = pack_cohort(cohort)
    eta, eps = draw_noise(rng, n_samples, obs.n, obs.m)
    res = evaluate_objective(theta.to_unconstrained(), gammas_to_unconstrained(gammas), obs,
                             eta, eps, grad=False)
    return res.elbo, res.stderr


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam ascent on a dict of arrays. Keys absent from ``grads`` stay fixed."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             active: np.ndarray | None = None):
        """Update ``params`` in place. ``active`` optionally masks the leading
        axis of every array (used to freeze converged subjects)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = self.lr * corr * self.m[k] / (np.sqrt(self.v[k]) + self.eps)
            if active is not None:
                upd = upd * active.reshape((-1,) + (1,) * (upd.ndim - 1))
            params[k] = params[k] + upd


def _converged(trace: list[float], window: int, tol: float) -> bool:
    if len(trace) < 2 * window:
        return False
    now = np.mean(trace[-window:])
    prev = np.mean(trace[-2 * window:-window])
    return bool(now - prev < tol * abs(prev))


def moving_average(trace, window: int) -> np.ndarray:
    trace = np.asarray(trace, dtype=float)
    if trace.size == 0:
        return trace
    csum = np.cumsum(np.insert(trace, 0, 0.0))
    lo = np.maximum(np.arange(trace.size) + 1 - window, 0)
    return (csum[1:] - csum[lo]) / (np.arange(trace.size) + 1 - lo)


# ---------------------------------------------------------------------------
# training


def initial_params(cohort: Cohort) -> ModelParams:
    """Deterministic starting point.

    Readouts come from each target's declared range and polarity (``h`` at
    the healthy end, ``c`` the signed range), which fixes the sign of ``c``.
    Per-target lags start at the inflection of a pooled least-squares sigmoid
    so the targets begin in a data-consistent order; the slope intercept
    starts at the median pooled slope.
    """
    from .benchmarks import MIN_STRATUM_POINTS, _pooled_points, fit_sigmoid4

    lo, hi = cohort.observed_age_range()
    span = max(hi - lo, 1.0)
    mid = 0.5 * (lo + hi)
    a0 = np.full(cohort.m, mid)
    slopes = []
    for k, (t, y) in enumerate(_pooled_points(cohort)):
        if t.size < MIN_STRATUM_POINTS or np.ptp(t) == 0:
            continue
        fit = fit_sigmoid4(t, y)
        if fit.slope > 0 and lo - span <= fit.inflection <= hi + span:
            a0[k] = fit.inflection
            slopes.append(fit.slope)
    slope0 = float(np.median(slopes)) if slopes else 8.0 / span
    slope0 = float(np.clip(slope0, 1.0 / span, 40.0 / span))
    ranges = np.array([t.high - t.low for t in cohort.targets])
    return ModelParams(
        w=np.zeros(cohort.d), b=slope0, v=np.zeros(cohort.d), a=a0,
        sigma_s=0.5 * slope0, sigma_p=0.1 * span,
        c=np.array([t.signed_range for t in cohort.targets]),
        h=np.array([t.healthy for t in cohort.targets]),
        sigma_y=0.1 * ranges,
    )


def _jitter(theta: ModelParams, rng: np.random.Generator, span: float) -> ModelParams:
    u = theta.to_unconstrained()
    u["a"] = u["a"] + rng.normal(0.0, 0.1 * span, size=u["a"].shape)
    u["b"] = u["b"] * np.exp(rng.normal(0.0, 0.3))
    u["w"] = u["w"] + rng.normal(0.0, 0.1 * abs(float(u["b"])), size=u["w"].shape)
    u["v"] = u["v"] + rng.normal(0.0, 0.5, size=u["v"].shape)
    return ModelParams.from_unconstrained(u)


@dataclass
class RunRecord:
    restart: int
    iterations: int
    converged: bool
    score: float


@dataclass
class TrainResult:
    theta: ModelParams
    gammas: list[VariationalState]
    trace: np.ndarray
    smoothed_trace: np.ndarray
    runs: list[RunRecord] = field(default_factory=list)
    n_zero_visit: int = 0
    best_restart: int = 0

    def __iter__(self):
        return iter((self.theta, self.gammas, self.trace))

    def summary(self) -> dict:
        return {
            "best_restart": self.best_restart,
            "n_zero_visit_subjects": self.n_zero_visit,
            "runs": [vars(r) for r in self.runs],
            "final_elbo": float(self.smoothed_trace[-1]) if self.smoothed_trace.size else None,
        }


def optimize(theta_u: dict, gamma_u: dict, obs: PackedObservations, config: TrainConfig,
             rng: np.random.Generator, update_theta: bool = True):
    """Adam ascent on the Monte Carlo ELBO. Returns (theta_u, gamma_u, trace, converged)."""
    theta_u = {k: np.array(v, dtype=float) for k, v in theta_u.items()}
    gamma_u = {k: np.array(v, dtype=float) for k, v in gamma_u.items()}
    opt = Adam(config.step_size)
    trace: list[float] = []
    converged = False
    for it in range(config.max_iters):
        eta, eps = draw_noise(rng, config.mc_samples, obs.n, obs.m)
        res = evaluate_objective(theta_u, gamma_u, obs, eta, eps)
        if not np.isfinite(res.elbo):
            raise OptimizationError(f"non-finite ELBO at iteration {it}")
        trace.append(res.elbo)
        grads = {f"g.{k}": v for k, v in res.grad_gamma.items()}
        params = {f"g.{k}": v for k, v in gamma_u.items()}
        if update_theta:
            grads.update({f"t.{k}": v for k, v in res.grad_theta.items()})
            params.update({f"t.{k}": v for k, v in theta_u.items()})
        opt.step(params, grads)
        gamma_u = {k: params[f"g.{k}"] for k in gamma_u}
        if update_theta:
            theta_u = {k: params[f"t.{k}"] for k in theta_u}
        if _converged(trace, config.window, config.convergence_tol):
            converged = True
            break
    return theta_u, gamma_u, np.array(trace), converged


def train(cohort: Cohort, config: TrainConfig | None = None,
          validation: Cohort | None = None) -> TrainResult:
    """Fit population parameters and per-subject proxies by gradient ascent.

    Runs ``max(restarts, 1)`` initializations (the first deterministic, the
    rest jittered) and keeps the one with the best ELBO: on ``validation``
    when given (proxies personalized with the parameters frozen), otherwise
    on the training cohort, each estimated with ``report_samples`` draws.
    """
    config = config or TrainConfig()
    if cohort.n == 0:
        raise ValueError("cohort is empty")
    obs = pack_cohort(cohort)
    if obs.size == 0:
        raise ValueError("cohort has no observed target values")
    n_zero = sum(1 for s in cohort.subjects if not np.isfinite(s.values).any())
    if n_zero:
        log.info("%d training subjects have no observed values", n_zero)
    lo, hi = cohort.observed_age_range()
    base = initial_params(cohort)

    best = None
    runs = []
    for r in range(max(config.restarts, 1)):
        rng = np.random.default_rng([config.seed, r])
        theta0 = base if r == 0 else _jitter(base, rng, hi - lo)
        gamma0 = prior_gammas(obs.x, theta0)
        theta_u, gamma_u, trace, conv = optimize(theta0.to_unconstrained(), gamma0, obs, config, rng)
        theta = ModelParams.from_unconstrained(theta_u)
        score_rng = np.random.default_rng([config.seed, r, 1])
        if validation is not None and validation.n:
            vobs = pack_cohort(validation)
            vg = personalize_batch(vobs, theta, replace(config, seed=config.seed + 7919 * (r + 1)))
            eta, eps = draw_noise(score_rng, config.report_samples, vobs.n, vobs.m)
            score = evaluate_objective(theta_u, vg, vobs, eta, eps, grad=False).elbo
        else:
            eta, eps = draw_noise(score_rng, config.report_samples, obs.n, obs.m)
            score = evaluate_objective(theta_u, gamma_u, obs, eta, eps, grad=False).elbo
        runs.append(RunRecord(r, len(trace), conv, float(score)))
        log.info("restart %d: %d iterations, score %.3f", r, len(trace), score)
        if best is None or score > best[0]:
            best = (score, r, theta, gamma_u, trace)

    _, r, theta, gamma_u, trace = best
    return TrainResult(theta=theta, gammas=gammas_from_unconstrained(gamma_u), trace=trace,
                       smoothed_trace=moving_average(trace, config.window), runs=runs,
                       n_zero_visit=n_zero, best_restart=r)


def personalize_batch(obs: PackedObservations, theta: ModelParams,
                      config: TrainConfig) -> dict[str, np.ndarray]:
    """Maximize the test-time ELBO over the proxies of every subject in
    ``obs`` with ``theta`` frozen. Subjects without observations keep their
    prior proxies exactly."""
    gamma_u = prior_gammas(obs.x, theta)
    if obs.size == 0:
        return gamma_u
    has_obs = np.zeros(obs.n, dtype=bool)
    has_obs[obs.subject] = True
    idx = np.flatnonzero(has_obs)
    remap = np.full(obs.n, -1)
    remap[idx] = np.arange(idx.size)
    sub = PackedObservations(remap[obs.subject], obs.target, obs.time, obs.value, obs.x[idx], obs.m)
    sub_gamma = {k: v[idx] for k, v in gamma_u.items()}
    rng = np.random.default_rng(config.seed)
    _, fitted, _, _ = optimize(theta.to_unconstrained(), sub_gamma, sub, config, rng,
                               update_theta=False)
    for k in gamma_u:
        gamma_u[k][idx] = fitted[k]
    return gamma_u


def histories_to_obs(x: np.ndarray, histories: list[History], m: int) -> PackedObservations:
    return pack(x, histories, m)
