"""Generative model: Gaussian priors on slope and inflections, latent sigmoid,
affine-Gaussian observation model.

All functions are pure. Densities come with their analytic partial
derivatives so the variational objective can be differentiated by hand.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LOG_2PI = float(np.log(2.0 * np.pi))

# Output clamp for the latent sigmoid, keeps logs and gradients finite.
LATENT_FLOOR = 1e-300
LATENT_CEIL = 1.0 - 1e-16


class ParameterDomainError(ValueError):
    """A parameter lies outside its admissible domain (e.g. sigma <= 0)."""


@dataclass
class ModelParams:
    """Population parameters of the progression model.

    ``w, b`` regress the slope prior mean on attributes, ``v, a`` regress the
    inflection prior means (``a`` holds one lag per target). ``c, h`` and
    ``sigma_y`` define each target's affine readout and noise level.
    """

    w: np.ndarray
    b: float
    v: np.ndarray
    a: np.ndarray
    sigma_s: float
    sigma_p: float
    c: np.ndarray
    h: np.ndarray
    sigma_y: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        self.v = np.asarray(self.v, dtype=float).reshape(-1)
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        self.sigma_y = np.asarray(self.sigma_y, dtype=float).reshape(-1)
        self.b = float(self.b)
        self.sigma_s = float(self.sigma_s)
        self.sigma_p = float(self.sigma_p)
        if self.w.shape != self.v.shape:
            raise ValueError(f"w and v differ in length: {self.w.size} vs {self.v.size}")
        m = self.a.size
        for name in ("c", "h", "sigma_y"):
            if getattr(self, name).size != m:
                raise ValueError(f"{name} has length {getattr(self, name).size}, expected {m}")

    @property
    def d(self) -> int:
        return self.w.size

    @property
    def m(self) -> int:
        return self.a.size

    def validate(self):
        if not self.sigma_s > 0:
            raise ParameterDomainError(f"sigma_s must be positive, got {self.sigma_s}")
        if not self.sigma_p > 0:
            raise ParameterDomainError(f"sigma_p must be positive, got {self.sigma_p}")
        if not np.all(self.sigma_y > 0):
            raise ParameterDomainError(f"sigma_y must be positive, got {self.sigma_y}")
        arrays = [self.w, self.v, self.a, self.c, self.h, self.sigma_y]
        scalars = [self.b, self.sigma_s, self.sigma_p]
        if not (all(np.all(np.isfinite(x)) for x in arrays) and np.all(np.isfinite(scalars))):
            raise ParameterDomainError("model parameters contain non-finite values")
        return self

    def slope_mean(self, x) -> np.ndarray:
        """Prior mean of the slope, ``w.x + b``; ``x`` may be (d,) or (n, d)."""
        return np.asarray(x, dtype=float) @ self.w + self.b

    def inflection_mean(self, x) -> np.ndarray:
        """Prior means of the inflections, shape (m,) or (n, m)."""
        x = np.asarray(x, dtype=float)
        return (x @ self.v)[..., None] + self.a

    # Unconstrained coordinates used by the optimizers: sigmas live in log space.
    def to_unconstrained(self) -> dict[str, np.ndarray]:
        self.validate()
        return {
            "w": self.w.copy(),
            "b": np.array(self.b),
            "v": self.v.copy(),
            "a": self.a.copy(),
            "log_sigma_s": np.array(np.log(self.sigma_s)),
            "log_sigma_p": np.array(np.log(self.sigma_p)),
            "c": self.c.copy(),
            "h": self.h.copy(),
            "log_sigma_y": np.log(self.sigma_y),
        }

    @classmethod
    def from_unconstrained(cls, u: dict[str, np.ndarray]) -> "ModelParams":
        return cls(
            w=np.array(u["w"], dtype=float),
            b=float(u["b"]),
            v=np.array(u["v"], dtype=float),
            a=np.array(u["a"], dtype=float),
            sigma_s=float(np.exp(u["log_sigma_s"])),
            sigma_p=float(np.exp(u["log_sigma_p"])),
            c=np.array(u["c"], dtype=float),
            h=np.array(u["h"], dtype=float),
            sigma_y=np.exp(np.asarray(u["log_sigma_y"], dtype=float)),
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_unconstrained(self.to_unconstrained())


@dataclass
class LatentState:
    """One subject's shared slope (per year) and per-target inflection ages."""

    slope: float
    inflections: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.slope = float(self.slope)
        self.inflections = np.asarray(self.inflections, dtype=float).reshape(-1)


def sigmoid_latent(t, p, s):
    """Latent severity ``1 / (1 + exp(-(t - p) * s))``, broadcasting over inputs."""
    z = (np.asarray(t, dtype=float) - p) * s
    return np.clip(expit(z), LATENT_FLOOR, LATENT_CEIL)


def sigmoid_latent_grad(t, p, s):
    """Partial derivatives of :func:`sigmoid_latent` with respect to (t, p, s)."""
    delta = np.asarray(t, dtype=float) - p
    z = delta * s
    # expit(z) * expit(-z) is accurate in both tails, unlike d * (1 - d).
    dz = expit(z) * expit(-z)
    return dz * s, -dz * s, dz * delta


def max_rate(s):
    """Peak rate of change of the latent curve, reached at the inflection."""
    return s / 4.0


def _normal_logpdf(x, mean, sigma):
    r = (x - mean) / sigma
    return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * r * r


def prior_logdensity(latent: LatentState, x, theta: ModelParams) -> float:
    """Joint log prior of slope and inflections given the attribute vector."""
    theta.validate()
    x = np.asarray(x, dtype=float)
    if x.shape != (theta.d,):
        raise ValueError(f"attribute vector has shape {x.shape}, expected ({theta.d},)")
    if latent.inflections.shape != (theta.m,):
        raise ValueError(f"expected {theta.m} inflections, got {latent.inflections.size}")
    lp_s = _normal_logpdf(latent.slope, theta.slope_mean(x), theta.sigma_s)
    lp_p = _normal_logpdf(latent.inflections, theta.inflection_mean(x), theta.sigma_p)
    return float(lp_s + lp_p.sum())


def prior_logdensity_grad(latent: LatentState, x, theta: ModelParams) -> dict[str, np.ndarray]:
    """Gradient of :func:`prior_logdensity`.

    Keys ``slope`` and ``inflections`` hold derivatives with respect to the
    latent state; the remaining keys are the unconstrained model coordinates
    (``log_sigma_s``, ``log_sigma_p`` rather than the sigmas themselves).
    """
    theta.validate()
    x = np.asarray(x, dtype=float)
    rs = (latent.slope - theta.slope_mean(x)) / theta.sigma_s
    rp = (latent.inflections - theta.inflection_mean(x)) / theta.sigma_p
    gs = rs / theta.sigma_s
    gp = rp / theta.sigma_p
    return {
        "slope": np.array(-gs),
        "inflections": -gp,
        "w": gs * x,
        "b": np.array(gs),
        "v": gp.sum() * x,
        "a": gp,
        "log_sigma_s": np.array(rs * rs - 1.0),
        "log_sigma_p": np.array(np.sum(rp * rp - 1.0)),
    }


def observation_loglik(target: int, y: float, latent_value: float, theta: ModelParams) -> float:
    """Log density of one observed target value given its latent severity."""
    k = _check_target(target, theta)
    sigma = theta.sigma_y[k]
    if not sigma > 0:
        raise ParameterDomainError(f"sigma_y[{k}] must be positive, got {sigma}")
    return float(_normal_logpdf(y, theta.c[k] * latent_value + theta.h[k], sigma))


def observation_loglik_grad(target: int, y: float, latent_value: float,
                            theta: ModelParams) -> dict[str, float]:
    """Derivatives of :func:`observation_loglik` w.r.t. the latent value,
    ``c_k``, ``h_k`` and ``log sigma_k``."""
    k = _check_target(target, theta)
    sigma = theta.sigma_y[k]
    r = y - (theta.c[k] * latent_value + theta.h[k])
    g_mean = r / sigma**2
    return {
        "latent": float(g_mean * theta.c[k]),
        "c": float(g_mean * latent_value),
        "h": float(g_mean),
        "log_sigma_y": float(r * r / sigma**2 - 1.0),
    }


def _check_target(target, theta) -> int:
    k = int(target)
    if k != target or not 0 <= k < theta.m:
        raise IndexError(f"target index {target} out of range for m={theta.m}")
    return k


def sample_latent_prior(x, theta: ModelParams, rng: np.random.Generator) -> LatentState:
    """Draw (slope, inflections) from the attribute-conditioned priors."""
    theta.validate()
    x = np.asarray(x, dtype=float)
    s = theta.slope_mean(x) + theta.sigma_s * rng.standard_normal()
    p = theta.inflection_mean(x) + theta.sigma_p * rng.standard_normal(theta.m)
    return LatentState(slope=float(s), inflections=p)
