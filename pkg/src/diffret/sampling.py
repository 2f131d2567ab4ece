"""Reverse-process inference.

Guidance-combined noise predictions drive either full-length ancestral
sampling or a second-order deterministic multistep solver over half-log-
SNR, with optional multi-hypothesis ensembling.  Toy denoisers with
known closed-form behaviour live here too; they share the sampler code
paths with the trained model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, NumericError
from .rng import stream
from .schedule import DiffusionSchedule, predict_x0


@dataclass(frozen=True)
class SampleConfig:
    method: str = "solver2m"
    steps: int = 14
    gamma: float = 2.5
    delta: float = 1.0
    hypotheses: int = 1
    seed: int = 0
    grid: str = "lambda"

    def __post_init__(self):
        if self.method not in ("ancestral", "solver2m"):
            raise ConfigError(f"unknown sampling method {self.method!r}")
        if self.grid not in ("lambda", "n"):
            raise ConfigError(f"unknown grid kind {self.grid!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.hypotheses < 1:
            raise ConfigError("hypotheses must be >= 1")
        if self.gamma < 0:
            warnings.warn(f"negative guidance scale {self.gamma}",
                          stacklevel=3)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in
                ("method", "steps", "gamma", "delta", "hypotheses", "seed",
                 "grid")}

    @classmethod
    def from_json(cls, d: dict) -> "SampleConfig":
        return cls(**d)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray,
                gamma: float) -> np.ndarray:
    # written as e + g*(e - u) rather than (1+g)*e - g*u so that equal
    # branches (and g = 0) reproduce eps_cond bit-for-bit
    return eps_cond + gamma * (eps_cond - eps_uncond)


def _model_dim(model) -> int:
    return model.cfg.d_vl if hasattr(model, "cfg") else model.dim


def _guided(model, z, n, conditions, z_query, gamma,
            uncond_keep_control=False):
    """One guided prediction; the unconditional branch drops text and
    (unless flagged otherwise) the control query."""
    eps_c = model.denoise(z, n, conditions, z_query)
    if gamma == 0.0 or (conditions is None and z_query is None):
        return eps_c, eps_c, eps_c
    uq = z_query if uncond_keep_control else None
    eps_u = model.denoise(z, n, None, uq)
    return cfg_combine(eps_c, eps_u, gamma), eps_c, eps_u


def _record(trace, step, n, z, eps, eps_c, eps_u):
    if trace is not None:
        trace.append({"step": step, "n": int(n),
                      "state_norm": float(np.linalg.norm(z)),
                      "eps_norm": float(np.linalg.norm(eps)),
                      "state": z.copy(), "eps": eps.copy(),
                      "eps_cond": eps_c.copy(), "eps_uncond": eps_u.copy()})


def sample_ancestral(model, sched: DiffusionSchedule, config: SampleConfig,
                     batch: int = 1, conditions=None, z_query=None,
                     rng: np.random.Generator | None = None,
                     deterministic: bool = False,
                     trace: list | None = None) -> np.ndarray:
    """Full-length reverse process, one model call per schedule step.

    The stochastic path applies Eq. 6's posterior-mean update plus
    sigma_n-scaled noise (sigma_1 = 0 always).  ``deterministic`` takes
    the sigma = 0 member of the same generalized update family
    sqrt(abar')*x0 + sqrt(1 - abar' - sigma^2)*eps + sigma*w, whose
    sigma = posterior member is algebraically identical to the
    stochastic path's mean; sigma = 0 is the deterministic (DDIM-style)
    trajectory that the multistep solver integrates."""
    if rng is None:
        rng = stream(config.seed, "ancestral")
    z = rng.standard_normal((batch, _model_dim(model)))
    for step, n in enumerate(range(sched.N, 0, -1)):
        eps, eps_c, eps_u = _guided(model, z, n, conditions, z_query,
                                    config.gamma)
        a = sched.alphas[n - 1]
        abar = sched.alpha_bars[n - 1]
        if deterministic:
            x0 = predict_x0(sched, z, n, eps)
            if n > 1:
                abar_prev = sched.alpha_bars[n - 2]
                z = np.sqrt(abar_prev) * x0 + np.sqrt(1.0 - abar_prev) * eps
            else:
                z = x0
        else:
            z = (z - (1.0 - a) / np.sqrt(1.0 - abar) * eps) / np.sqrt(a)
            sigma = sched.sigmas[n - 1]
            if sigma > 0.0:
                z = z + sigma * rng.standard_normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state at timestep {n}")
        _record(trace, step, n, z, eps, eps_c, eps_u)
    return z


def solver_grid(sched: DiffusionSchedule, steps: int,
                kind: str = "lambda") -> np.ndarray:
    """Timestep grid from N down to 1, deduplicated.

    ``lambda`` spaces the grid uniformly in half-log-SNR (each multistep
    transition covers a comparable h, which keeps few-step truncation
    error small); ``n`` spaces it uniformly in the timestep index.
    """
    if steps > sched.N:
        raise ConfigError(f"steps {steps} exceeds schedule length {sched.N}")
    if steps == 1:
        return np.array([sched.N])
    if steps == sched.N:
        return np.arange(sched.N, 0, -1)
    if kind == "lambda":
        targets = np.linspace(sched.lambdas[sched.N - 1], sched.lambdas[0],
                              steps)
        raw = np.array([int(np.argmin(np.abs(sched.lambdas - t))) + 1
                        for t in targets])
    elif kind == "n":
        raw = np.rint(np.linspace(sched.N, 1, steps)).astype(int)
    else:
        raise ConfigError(f"unknown grid kind {kind!r}")
    ns = raw[np.concatenate([[True], np.diff(raw) != 0])]
    assert ns[0] == sched.N and ns[-1] == 1 and np.all(np.diff(ns) < 0)
    return ns


def sample_solver2m(model, sched: DiffusionSchedule, config: SampleConfig,
                    batch: int = 1, conditions=None, z_query=None,
                    rng: np.random.Generator | None = None,
                    first_order_only: bool = False,
                    trace: list | None = None) -> np.ndarray:
    """Second-order multistep data-prediction solver over half-log-SNR.

    The first transition is first-order (no history yet); the final model
    call at n=1 returns the clean-data prediction directly, matching the
    ancestral sampler's deterministic last step.
    """
    if rng is None:
        rng = stream(config.seed, "solver2m")
    ns = solver_grid(sched, config.steps, config.grid)
    lam = sched.lambdas
    a_lam = np.sqrt(sched.alpha_bars)
    s_lam = np.sqrt(1.0 - sched.alpha_bars)
    z = rng.standard_normal((batch, _model_dim(model)))
    prev_x0 = prev_h = None
    for i, n in enumerate(ns):
        eps, eps_c, eps_u = _guided(model, z, n, conditions, z_query,
                                    config.gamma)
        x0 = predict_x0(sched, z, n, eps)
        _record(trace, i, n, z, eps, eps_c, eps_u)
        if i == len(ns) - 1:
            z = x0
            break
        nn = ns[i + 1]
        h = lam[nn - 1] - lam[n - 1]
        if prev_x0 is None or first_order_only:
            D = x0
        else:
            r = prev_h / h
            D = (1.0 + 1.0 / (2.0 * r)) * x0 - (1.0 / (2.0 * r)) * prev_x0
        z = (s_lam[nn - 1] / s_lam[n - 1]) * z \
            - a_lam[nn - 1] * np.expm1(-h) * D
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state at timestep {int(nn)}")
        prev_x0, prev_h = x0, h
    return z


def sample_one(model, sched, config: SampleConfig, batch=1, conditions=None,
               z_query=None, rng=None, trace=None) -> np.ndarray:
    if config.method == "ancestral":
        return sample_ancestral(model, sched, config, batch, conditions,
                                z_query, rng, trace=trace)
    return sample_solver2m(model, sched, config, batch, conditions,
                           z_query, rng, trace=trace)


def sample_hypotheses(model, sched, config: SampleConfig, batch=1,
                      conditions=None, z_query=None, trace=None):
    """K independent-seed samples plus their l2-normalized mean.

    Returns (samples list, ensemble); each hypothesis uses its own
    counter-based stream so the set is order- and parallelism-invariant.
    ``trace`` records the first hypothesis only.
    """
    samples = []
    for k in range(config.hypotheses):
        rng = stream(config.seed, "hyp", k)
        samples.append(sample_one(model, sched, config, batch, conditions,
                                  z_query, rng=rng,
                                  trace=trace if k == 0 else None))
    mean = np.mean(samples, axis=0)
    norm = np.linalg.norm(mean, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise NumericError("zero-norm hypothesis mean")
    return samples, mean / norm


# -- analytic toy denoisers ---------------------------------------------------

class ZeroDenoiser:
    """Predicts zero noise; the reverse process becomes linear-Gaussian."""

    def __init__(self, dim: int):
        self.dim = dim

    def denoise(self, z, n, conditions=None, z_query=None):
        return np.zeros_like(np.atleast_2d(z))


class MixtureDenoiser:
    """Exact noise prediction for an isotropic Gaussian mixture prior.

    With data ~ sum_i w_i N(mu_i, s2 I), the noised marginal at step n is
    sum_i w_i N(sqrt(abar) mu_i, (abar s2 + 1 - abar) I), and the optimal
    eps is -sqrt(1-abar) times its score.
    """

    def __init__(self, sched: DiffusionSchedule, means, weights,
                 s2: float = 0.25):
        self.sched = sched
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.shape[0] != self.means.shape[0]:
            raise ConfigError("means/weights length mismatch")
        if not np.isclose(self.weights.sum(), 1.0):
            raise ConfigError("mixture weights must sum to 1")
        self.s2 = float(s2)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def denoise(self, z, n, conditions=None, z_query=None):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n = self.sched._check_n(n)
        abar = np.broadcast_to(self.sched.alpha_bars[np.atleast_1d(n) - 1],
                               (z.shape[0],))[:, None]
        var = abar * self.s2 + (1.0 - abar)
        diff = z[:, None, :] - np.sqrt(abar)[:, None] * self.means
        logits = (np.log(self.weights)
                  - 0.5 * (diff ** 2).sum(-1) / var)
        resp = softmax(logits, axis=1)
        score = (resp[..., None] * (-diff / var[:, None])).sum(axis=1)
        return -np.sqrt(1.0 - abar) * score

    def assign(self, samples: np.ndarray) -> np.ndarray:
        """Nearest-mean component index for each sample."""
        d = np.linalg.norm(np.atleast_2d(samples)[:, None, :] - self.means,
                           axis=-1)
        return d.argmin(axis=1)
