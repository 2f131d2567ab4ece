"""Variance schedules and closed-form forward/inverse noising."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed per-timestep tables, immutable after construction.

    Index convention: table[i] holds the value for timestep n = i + 1.
    ``alpha_bar_prev[i]`` is alpha_bar at n-1 with alpha_bar_0 = 1.
    ``lambdas`` are half-log-SNR values, strictly decreasing in n.
    """

    kind: str
    N: int
    beta_min: float
    beta_max: float
    sigma_kind: str
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    alpha_bar_prev: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)
    lambdas: np.ndarray = field(repr=False)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "N": self.N, "beta_min": self.beta_min,
                "beta_max": self.beta_max, "sigma_kind": self.sigma_kind}

    def _check_n(self, n):
        n = np.asarray(n)
        if np.any(n < 1) or np.any(n > self.N):
            raise InputError(f"timestep out of range [1, {self.N}]")
        return n


def make_schedule(kind: str = "linear", N: int = 1000,
                  beta_min: float = 1e-4, beta_max: float = 0.02,
                  sigma_kind: str = "posterior") -> DiffusionSchedule:
    """Build all derived tables for a linear or squared-cosine schedule.

    ``sigma_kind`` selects the ancestral noise level: "posterior" uses the
    true posterior variance (1-abar_{n-1})/(1-abar_n) * beta_n, "beta" uses
    beta_n directly.  sigma_1 is forced to 0 either way.
    """
    if N < 1:
        raise ConfigError(f"N must be >= 1, got {N}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got "
                          f"({beta_min}, {beta_max})")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, N)
    elif kind == "cosine":
        # squared-cosine alpha_bar curve, betas clipped into [beta_min, beta_max]
        s = 0.008
        grid = np.arange(N + 1) / N
        f = np.cos((grid + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if sigma_kind not in ("posterior", "beta"):
        raise ConfigError(f"unknown sigma_kind {sigma_kind!r}")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    if sigma_kind == "posterior":
        var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bars) * betas
    else:
        var = betas.copy()
    sigmas = np.sqrt(var)
    sigmas[0] = 0.0  # final reverse step is deterministic
    lambdas = 0.5 * np.log(alpha_bars / (1.0 - alpha_bars))

    if not np.all(np.diff(alpha_bars) < 0):
        raise ConfigError("alpha_bar must be strictly decreasing")
    if not np.all(np.diff(lambdas) < 0):
        raise ConfigError("lambda must be strictly decreasing")
    return DiffusionSchedule(kind=kind, N=N, beta_min=beta_min,
                             beta_max=beta_max, sigma_kind=sigma_kind,
                             betas=betas, alphas=alphas,
                             alpha_bars=alpha_bars,
                             alpha_bar_prev=alpha_bar_prev,
                             sigmas=sigmas, lambdas=lambdas)


def schedule_from_descriptor(desc: dict) -> DiffusionSchedule:
    return make_schedule(kind=desc["kind"], N=int(desc["N"]),
                         beta_min=float(desc["beta_min"]),
                         beta_max=float(desc["beta_max"]),
                         sigma_kind=desc.get("sigma_kind", "posterior"))


def forward_noise(sched: DiffusionSchedule, z0, n, eps):
    """Closed-form noising: sqrt(abar_n) z0 + sqrt(1-abar_n) eps.

    ``n`` may be a scalar or an array broadcast against leading axes.
    """
    n = sched._check_n(n)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise InputError(f"z0/eps shape mismatch: {z0.shape} vs {eps.shape}")
    abar = sched.alpha_bars[n - 1]
    if z0.ndim > np.ndim(abar):
        abar = np.expand_dims(abar, tuple(range(np.ndim(abar), z0.ndim)))
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def predict_x0(sched: DiffusionSchedule, zn, n, eps_hat):
    """Algebraic inverse of forward_noise for a noise estimate."""
    n = sched._check_n(n)
    zn = np.asarray(zn, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    abar = sched.alpha_bars[n - 1]
    if zn.ndim > np.ndim(abar):
        abar = np.expand_dims(abar, tuple(range(np.ndim(abar), zn.ndim)))
    return (zn - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
