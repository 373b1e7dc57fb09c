"""Noise schedule, forward corruption, and the denoising-error score.

The nonconformity score of a state x at physical step k averages
``gamma * ||eps_hat(x_tau, tau, k) - eps||^2`` over a small set of low-noise
diffusion steps, each repeated with independent noise.  Noise for every
query comes from its own stream derived from (seed, domain, k, query index),
so scores are reproducible and independent of batching or evaluation order.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigurationError, NumericError

# stream domains keep calibration / test / grid / sensitivity noise disjoint
DOMAIN_CAL = 1
DOMAIN_TEST = 2
DOMAIN_GRID = 3
DOMAIN_SENSITIVITY = 4
DOMAIN_QUERY = 5


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule beta_1..beta_T with cached products."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigurationError("beta must be a nonempty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ConfigurationError("beta values must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)

    @property
    def n_steps(self):
        return self.beta.size

    @property
    def alpha(self):
        return 1.0 - self.beta

    @property
    def alpha_bar(self):
        return np.cumprod(self.alpha)

    def alpha_bar_at(self, tau):
        """Cumulative signal retention for 1-indexed ``tau`` (scalar or array)."""
        tau = np.asarray(tau)
        if np.any(tau < 1) or np.any(tau > self.n_steps):
            raise ValueError(f"tau out of range [1, {self.n_steps}]")
        return self.alpha_bar[tau - 1]

    def snr(self, tau):
        abar = self.alpha_bar_at(tau)
        return abar / (1.0 - abar)

    def tobytes(self):
        return self.beta.astype("<f8").tobytes()


def make_schedule(n_steps=1000, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule; defaults are the standard DDPM endpoints."""
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if n_steps < 1:
        raise ConfigurationError("n_steps must be >= 1")
    return NoiseSchedule(beta=np.linspace(beta_start, beta_end, n_steps))


def noisify(x0, tau, eps, schedule):
    """Forward corruption: sqrt(abar)*x0 + sqrt(1-abar)*eps.

    ``tau`` may be scalar or broadcast against leading axes of ``x0``.
    """
    abar = schedule.alpha_bar_at(tau)
    abar = np.asarray(abar)[..., None] if np.ndim(abar) else abar
    return np.sqrt(abar) * np.asarray(x0) + np.sqrt(1.0 - abar) * np.asarray(eps)


@dataclass(frozen=True)
class ScoreConfig:
    """Low-noise diffusion steps, repeats, and weighting of the score."""

    taus: tuple = (1, 2, 3)
    repeats: int = 8
    weighting: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        taus = tuple(int(t) for t in self.taus)
        if len(taus) < 1 or any(t < 1 for t in taus):
            raise ConfigurationError("taus must be positive diffusion steps")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if self.weighting not in ("uniform", "elbo"):
            raise ConfigurationError(f"unknown weighting {self.weighting!r}")
        object.__setattr__(self, "taus", taus)

    @property
    def n_evaluations(self):
        return len(self.taus) * self.repeats

    def evaluation_weights(self, schedule):
        """Per-(tau, repeat) weight; uniform weights sum to one."""
        if max(self.taus) > schedule.n_steps:
            raise ConfigurationError("taus exceed the schedule length")
        if self.weighting == "uniform":
            return np.full(len(self.taus), 1.0 / self.n_evaluations)
        tau_arr = np.asarray(self.taus)
        w = schedule.beta[tau_arr - 1] / (1.0 - schedule.alpha_bar_at(tau_arr))
        return w / (self.repeats * w.sum())


def query_rng(seed, domain, k, index):
    """Independent stream for one (domain, step, query) triple."""
    return np.random.default_rng(
        np.random.SeedSequence((int(seed), int(domain), int(k), int(index)))
    )


def draw_query_noise(cfg, n_dims, k, n_queries, domain, start_index=0):
    """Per-query noise block of shape (m, len(taus), repeats, n_dims)."""
    shape = (len(cfg.taus), cfg.repeats, n_dims)
    out = np.empty((n_queries,) + shape)
    for i in range(n_queries):
        out[i] = query_rng(cfg.seed, domain, k, start_index + i).standard_normal(shape)
    return out


def score_states(X, k, denoiser, schedule, normalizer, cfg,
                 domain=DOMAIN_QUERY, start_index=0, eps=None):
    """Nonconformity scores of unnormalized states ``X`` (m, n) at step ``k``.

    ``denoiser(x_tau, tau, k)`` must accept batched inputs.  ``eps``
    overrides the per-query noise block (test seam).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    m, n = X.shape
    x0 = normalizer.apply(X)
    if eps is None:
        eps = draw_query_noise(cfg, n, k, m, domain, start_index)
    weights = cfg.evaluation_weights(schedule)

    tau_arr = np.asarray(cfg.taus)
    abar = schedule.alpha_bar_at(tau_arr)  # (T,)
    signal = np.sqrt(abar)[None, :, None, None]
    noise = np.sqrt(1.0 - abar)[None, :, None, None]
    x_tau = signal * x0[:, None, None, :] + noise * eps

    flat_x = x_tau.reshape(-1, n)
    flat_tau = np.broadcast_to(
        tau_arr[None, :, None], (m, len(tau_arr), cfg.repeats)
    ).reshape(-1)
    flat_k = np.full(flat_x.shape[0], k, dtype=np.int64)
    pred = np.asarray(denoiser(flat_x, flat_tau, flat_k))
    if not np.all(np.isfinite(pred)):
        raise NumericError("denoiser produced non-finite predictions")
    terms = ((pred.reshape(m, len(tau_arr), cfg.repeats, n) - eps) ** 2).sum(axis=-1)
    return (terms * weights[None, :, None]).sum(axis=(1, 2))


def score(x, k, denoiser, schedule, normalizer, cfg, rng=None):
    """Score of a single state; ``rng`` supplies the noise stream."""
    x = np.asarray(x, dtype=np.float64)
    if rng is None:
        eps = None
    else:
        eps = rng.standard_normal((1, len(cfg.taus), cfg.repeats, x.size))
    return float(
        score_states(x[None, :], k, denoiser, schedule, normalizer, cfg, eps=eps)[0]
    )


@dataclass(frozen=True)
class GaussianToy:
    """Gaussian data distribution with a closed-form optimal denoiser."""

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError("cov must be (n, n) matching mean")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("cov must be symmetric positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def n_dims(self):
        return self.mean.size

    def sample(self, rng, size):
        return rng.multivariate_normal(self.mean, self.cov, size=size, method="cholesky")


def gaussian_posterior_mean(toy, x_tau, tau, schedule):
    """E[x0 | x_tau] for Gaussian data under the forward process."""
    abar = float(schedule.alpha_bar_at(tau))
    single = np.asarray(x_tau).ndim == 1
    x_tau = np.atleast_2d(np.asarray(x_tau, dtype=np.float64))
    n = toy.n_dims
    system = abar * toy.cov + (1.0 - abar) * np.eye(n)
    factor = cho_factor(system)
    resid = x_tau - np.sqrt(abar) * toy.mean
    correction = cho_solve(factor, resid.T).T
    out = toy.mean + np.sqrt(abar) * correction @ toy.cov
    return out[0] if single else out


def gaussian_oracle_denoiser(toy, x_tau, tau, schedule):
    """Bayes-optimal noise prediction for the Gaussian toy distribution."""
    abar = float(schedule.alpha_bar_at(tau))
    x_tau = np.asarray(x_tau, dtype=np.float64)
    x0_hat = gaussian_posterior_mean(toy, x_tau, tau, schedule)
    return (x_tau - np.sqrt(abar) * x0_hat) / np.sqrt(1.0 - abar)


def make_oracle_denoiser(toy, schedule):
    """Adapter exposing the analytic denoiser as a batched callable."""

    def denoiser(x_tau, tau, k):
        x_tau = np.atleast_2d(x_tau)
        tau = np.broadcast_to(np.asarray(tau), (x_tau.shape[0],))
        out = np.empty_like(x_tau)
        for t in np.unique(tau):
            mask = tau == t
            out[mask] = gaussian_oracle_denoiser(toy, x_tau[mask], int(t), schedule)
        return out

    return denoiser
