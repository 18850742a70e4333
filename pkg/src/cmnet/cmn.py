"""Two-layer conditional mixture network fitted by coordinate ascent.

Layer one is a stick-breaking gate over K linear experts producing a latent
``x1``; layer two is a stick-breaking classifier on ``x1``. The variational
family keeps ``q(x1 | z) q(z)`` per datapoint, Gaussian factors for the stick
coefficients, Matrix-Normal-Gamma factors for the experts and Polya-Gamma
factors for the augmentation variables.

One sweep updates, in order: q(x1 | z), q(omega1), q(omega0), q(z), then
q(beta1), q(beta0) and the experts. Every step is an exact coordinate update
of the same objective, so the bound returned by :func:`elbo` never decreases
between sweeps (up to rounding).
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp, xlogy

from ._linalg import cholesky, spd_inverse
from .distributions import (
    LOG2,
    DomainError,
    kappa_vector,
    log_cosh,
    log_stick_breaking,
    mng_expectations,
    pad_ones,
    pg_mean,
)
from .experts import ExpertBank, accumulate_stats, expected_gaussian_ll
from .mnlr import AugmentationBatch, MNLRPosterior, beta_kl, expected_loglik_bound, update_beta

__all__ = [
    "CMNModel",
    "CMNPosterior",
    "Locals",
    "FitConfig",
    "FitTrace",
    "FitError",
    "Batch",
    "init_posterior",
    "e_step",
    "m_step",
    "elbo",
    "fit",
    "predict",
    "sample_class_probs",
]

LOG_2PI = np.log(2 * np.pi)


class FitError(RuntimeError):
    """Numerical failure during fitting; ``sweep`` is the 1-based sweep index."""

    def __init__(self, sweep: int, cause: Exception):
        self.sweep = sweep
        super().__init__(f"sweep {sweep}: {cause}")


@dataclass(frozen=True)
class CMNModel:
    """Dimensions and prior hyperparameters.

    ``sigma0`` and ``sigma1`` are prior standard deviations of the gating and
    output stick coefficients.
    """

    d: int
    h: int
    K: int
    L: int
    v0: float = 10.0
    a0: float = 2.0
    b0: float = 1.0
    sigma0: float = 5.0
    sigma1: float = 5.0

    def __post_init__(self):
        if self.K < 1 or self.L < 2 or self.h < 1 or self.d < 1:
            raise DomainError("need K >= 1, L >= 2, h >= 1 and d >= 1")

    @classmethod
    def default(cls, d: int, L: int, K: int = 20, **kw) -> "CMNModel":
        return cls(d=d, h=L - 1, K=K, L=L, **kw)

    def expert_prior(self):
        return ExpertBank.make_prior(self.h, self.d, self.v0, self.a0, self.b0)


@dataclass(frozen=True)
class Locals:
    """Per-datapoint factors.

    x1_mean (N, K, h), x1_cov (N, K, h, h), x1_logdet (N, K) log det of the
    covariance, gamma (N, K), xi0 (N, K-1), xi1 (N, L-1).
    """

    x1_mean: np.ndarray
    x1_cov: np.ndarray
    x1_logdet: np.ndarray
    gamma: np.ndarray
    xi0: np.ndarray
    xi1: np.ndarray


@dataclass(frozen=True)
class CMNPosterior:
    gating: MNLRPosterior
    output: MNLRPosterior
    experts: ExpertBank
    locals: Locals | None = None

    def globals_only(self) -> "CMNPosterior":
        return replace(self, locals=None)


@dataclass(frozen=True)
class FitConfig:
    max_sweeps: int = 500
    inner_iters: int = 1
    seed: int = 0
    elbo_record: bool = True
    init_scale: float = 1.0
    rel_tol: float | None = None
    gamma_entropy: bool = True

    def __post_init__(self):
        if self.max_sweeps < 1 or self.inner_iters < 1:
            raise DomainError("max_sweeps and inner_iters must be >= 1")


@dataclass
class FitTrace:
    elbo_per_sweep: list = field(default_factory=list)
    wall_time_per_sweep: list = field(default_factory=list)
    warnings: Counter = field(default_factory=Counter)

    def __len__(self):
        return len(self.wall_time_per_sweep)


@dataclass(frozen=True)
class Batch:
    """Observed data with derived per-datapoint constants."""

    x0: np.ndarray
    y: np.ndarray
    x_hat: np.ndarray
    kappa1: np.ndarray
    b1: np.ndarray

    @classmethod
    def make(cls, x0, y, num_classes: int) -> "Batch":
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim != 2 or not np.all(np.isfinite(x0)):
            raise DomainError("inputs must be a finite (N, d) array")
        y = np.asarray(y, dtype=int)
        kappa1, b1 = kappa_vector(y, num_classes)
        return cls(x0, y, pad_ones(x0), kappa1, b1)

    @property
    def n(self) -> int:
        return self.x0.shape[0]


def _gate_tables(K: int):
    if K == 1:
        return np.zeros((1, 0)), np.zeros((1, 0))
    return kappa_vector(np.arange(K), K)


def _output_psi(output: MNLRPosterior, x1_mean, x1_cov):
    """Moments of the output activations under each q(x1 | z = k): (N, K, L-1)."""
    h = x1_mean.shape[-1]
    w = output.mean[:, :h]
    mean = x1_mean @ w.T + output.mean[:, h]
    M2 = output.second_moment
    S2 = x1_cov + x1_mean[..., :, None] * x1_mean[..., None, :]
    lead = S2.shape[:-2]
    quad = S2.reshape(-1, h * h) @ M2[:, :h, :h].reshape(-1, h * h).T
    second = quad.reshape(lead + (-1,)) + 2.0 * x1_mean @ M2[:, h, :h].T + M2[:, h, h]
    return mean, second


def _mixture_xi(gamma, psi_second):
    return np.sqrt(np.maximum(np.einsum("nk,nkl->nl", gamma, psi_second), 0.0))


def _gate_psi(gating: MNLRPosterior, x_hat):
    mean = x_hat @ gating.mean.T
    second = np.sum((x_hat @ gating.second_moment) * x_hat, axis=-1).T
    return mean, np.sqrt(np.maximum(second, 0.0))


def _gate_bound(gating: MNLRPosterior, x_hat, K: int):
    """Gating bound for every assignment z = k with optimal tilts: (N, K), xi0."""
    kappa0, b0 = _gate_tables(K)
    psi_mean, xi0 = _gate_psi(gating, x_hat)
    bound = psi_mean @ kappa0.T - (LOG2 + log_cosh(0.5 * xi0)) @ b0.T
    return bound, xi0


def _x1_entropy(logdet_cov, h: int):
    return 0.5 * h * (1.0 + LOG_2PI) + 0.5 * logdet_cov


def _expert_only_locals(model, experts: ExpertBank, batch: Batch):
    exp = mng_expectations(experts.posteriors)
    n = batch.n
    mean = np.einsum("khp,np->nkh", experts.posteriors.M, batch.x_hat)
    var = 1.0 / exp.precision
    cov = np.zeros((n, model.K, model.h, model.h))
    idx = np.arange(model.h)
    cov[:, :, idx, idx] = var
    logdet = np.broadcast_to(np.sum(np.log(var), axis=-1), (n, model.K)).copy()
    return mean, cov, logdet


def init_posterior(model: CMNModel, x0, y, config: FitConfig = FitConfig()) -> CMNPosterior:
    """Priors for the sticks, random expert means, jittered responsibilities.

    Local Gaussians come from the experts alone (no output-layer term).
    """
    batch = x0 if isinstance(x0, Batch) else Batch.make(x0, y, model.L)
    rng = np.random.default_rng(config.seed)
    prior = model.expert_prior()
    means = config.init_scale * rng.standard_normal((model.K, model.h, model.d + 1))
    experts = ExpertBank.from_prior(model.K, prior, means)
    jitter = rng.dirichlet(np.ones(model.K), size=batch.n)
    gamma = 0.5 / model.K + 0.5 * jitter
    gamma /= gamma.sum(axis=1, keepdims=True)
    gating = MNLRPosterior.prior(model.K - 1, model.d, model.sigma0**2)
    output = MNLRPosterior.prior(model.L - 1, model.h, model.sigma1**2)
    mean, cov, logdet = _expert_only_locals(model, experts, batch)
    _, psi_sq = _output_psi(output, mean, cov)
    _, xi0 = _gate_psi(gating, batch.x_hat)
    locals_ = Locals(mean, cov, logdet, gamma, xi0, _mixture_xi(gamma, psi_sq))
    return CMNPosterior(gating, output, experts, locals_)


def e_step(model: CMNModel, post: CMNPosterior, batch: Batch, inner_iters: int = 1,
           counters: Counter | None = None, gamma_entropy: bool = True) -> CMNPosterior:
    """Update q(x1 | z), the Polya-Gamma tilts and q(z) with globals fixed."""
    loc = post.locals
    h = model.h
    out = post.output
    M2 = out.second_moment
    exp = mng_expectations(post.experts.posteriors)
    expert_lin = np.swapaxes(batch.x_hat @ np.swapaxes(exp.precision_mean, -1, -2), 0, 1)
    tau_diag = np.zeros((model.K, h, h))
    tau_diag[:, np.arange(h), np.arange(h)] = exp.precision

    gamma = loc.gamma
    mean, cov = loc.x1_mean, loc.x1_cov
    _, psi_sq = _output_psi(out, mean, cov)
    xi1 = _mixture_xi(gamma, psi_sq)
    for _ in range(inner_iters):
        e1 = pg_mean(batch.b1, xi1)
        out_prec = (e1 @ M2[:, :h, :h].reshape(-1, h * h)).reshape(-1, h, h)
        out_lin = batch.kappa1 @ out.mean[:, :h] - e1 @ M2[:, h, :h]
        precision = tau_diag[None] + out_prec[:, None]
        lam1 = expert_lin + out_lin[:, None, :]
        cov, logdet_prec = spd_inverse(precision, counters)
        mean = (cov @ lam1[..., None])[..., 0]
        psi_mean, psi_sq = _output_psi(out, mean, cov)
        xi1 = _mixture_xi(gamma, psi_sq)
    logdet_cov = -logdet_prec

    e1 = pg_mean(batch.b1, xi1)
    gate, xi0 = _gate_bound(post.gating, batch.x_hat, model.K)
    out_term = (
        np.einsum("nl,nkl->nk", batch.kappa1, psi_mean)
        - (batch.b1.sum(axis=1) * LOG2)[:, None]
        - 0.5 * np.einsum("nl,nkl->nk", e1, psi_sq)
    )
    expert_term = expected_gaussian_ll(post.experts.posteriors, batch.x0, mean, cov)
    log_gamma = expert_term + out_term + gate
    if gamma_entropy:
        log_gamma = log_gamma + _x1_entropy(logdet_cov, h)
    gamma = np.exp(log_gamma - logsumexp(log_gamma, axis=1, keepdims=True))
    return replace(post, locals=Locals(mean, cov, logdet_cov, gamma, xi0, xi1))


def _output_batch(post: CMNPosterior, batch: Batch) -> AugmentationBatch:
    loc = post.locals
    g = loc.gamma
    mu = np.einsum("nk,nki->ni", g, loc.x1_mean)
    S2 = loc.x1_cov + loc.x1_mean[..., :, None] * loc.x1_mean[..., None, :]
    n, h = mu.shape
    mu_hat = np.concatenate([mu, np.ones((n, 1))], axis=1)
    M_hat = np.empty((n, h + 1, h + 1))
    M_hat[:, :h, :h] = (g[:, None, :] @ S2.reshape(n, g.shape[1], h * h)).reshape(n, h, h)
    M_hat[:, :h, h] = mu
    M_hat[:, h, :h] = mu
    M_hat[:, h, h] = 1.0
    return AugmentationBatch(mu_hat, M_hat, batch.kappa1, batch.b1, loc.xi1)


def _gating_batch(post: CMNPosterior, batch: Batch, K: int) -> AugmentationBatch:
    kappa0, b0 = _gate_tables(K)
    g = post.locals.gamma
    x_hat = batch.x_hat
    return AugmentationBatch(
        x_hat, x_hat[:, :, None] * x_hat[:, None, :], g @ kappa0, g @ b0, post.locals.xi0
    )


def m_step(model: CMNModel, post: CMNPosterior, batch: Batch, counters: Counter | None = None) -> CMNPosterior:
    """Update q(beta1), q(beta0) and the experts from the current locals."""
    output = update_beta(model.sigma1**2, _output_batch(post, batch), counters=counters)
    if model.K > 1:
        gating = update_beta(model.sigma0**2, _gating_batch(post, batch, model.K), counters=counters)
    else:
        gating = post.gating
    loc = post.locals
    stats = accumulate_stats(batch.x0, loc.x1_mean, loc.x1_cov, loc.gamma)
    experts = post.experts.updated(stats, counters)
    return replace(post, gating=gating, output=output, experts=experts)


def local_elbo(model: CMNModel, post: CMNPosterior, batch: Batch) -> np.ndarray:
    """Per-datapoint ELBO contribution with both tilts set optimally: (N,)."""
    loc = post.locals
    g = loc.gamma
    psi_mean, psi_sq = _output_psi(post.output, loc.x1_mean, loc.x1_cov)
    out = expected_loglik_bound(
        batch.kappa1,
        batch.b1,
        np.einsum("nk,nkl->nl", g, psi_mean),
        np.einsum("nk,nkl->nl", g, psi_sq),
    )
    gate, _ = _gate_bound(post.gating, batch.x_hat, model.K)
    expert_term = expected_gaussian_ll(post.experts.posteriors, batch.x0, loc.x1_mean, loc.x1_cov)
    per_k = expert_term + gate + _x1_entropy(loc.x1_logdet, model.h)
    return out + np.sum(g * per_k, axis=1) - np.sum(xlogy(g, g), axis=1)


def global_kl(model: CMNModel, post: CMNPosterior) -> float:
    kl = beta_kl(post.output, model.sigma1**2) + post.experts.kl()
    if model.K > 1:
        kl += beta_kl(post.gating, model.sigma0**2)
    return kl


def elbo(model: CMNModel, post: CMNPosterior, batch: Batch) -> float:
    if post.locals is None or batch.n == 0:
        return -global_kl(model, post)
    return float(np.sum(local_elbo(model, post, batch))) - global_kl(model, post)


def fit(model: CMNModel, x0, y, config: FitConfig = FitConfig(), init: CMNPosterior | None = None):
    """Run ``config.max_sweeps`` E/M sweeps. Returns ``(posterior, trace)``."""
    batch = Batch.make(x0, y, model.L)
    if batch.n == 0:
        raise DomainError("cannot fit on an empty dataset")
    post = init_posterior(model, batch, None, config) if init is None else init
    trace = FitTrace()
    previous = None
    for sweep in range(1, config.max_sweeps + 1):
        start = time.perf_counter()
        try:
            post = e_step(model, post, batch, config.inner_iters, trace.warnings, config.gamma_entropy)
            post = m_step(model, post, batch, trace.warnings)
            track = config.elbo_record or config.rel_tol is not None
            value = elbo(model, post, batch) if track else None
        except np.linalg.LinAlgError as err:
            raise FitError(sweep, err) from err
        trace.wall_time_per_sweep.append(time.perf_counter() - start)
        if config.elbo_record:
            trace.elbo_per_sweep.append(value)
        if config.rel_tol is not None and previous is not None:
            if abs(value - previous) <= config.rel_tol * abs(previous):
                break
        previous = value
    return post, trace


# --------------------------------------------------------------------------
# prediction


def _cov_factor(cov):
    try:
        return cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.maximum(w, 0.0))[..., None, :]


def _sample_gaussian(rng, mean, cov, num_samples):
    z = rng.standard_normal((num_samples,) + mean.shape)
    return mean + np.einsum("kij,skj->ski", _cov_factor(cov), z)


def sample_class_probs(post: CMNPosterior, x0, num_samples: int = 64, seed: int = 0) -> np.ndarray:
    """Class probabilities under ``num_samples`` posterior draws: (S, N, L).

    Each draw samples the stick coefficients, every expert's noise precision
    and map, and one latent ``x1`` per expert; the gate is summed over
    experts analytically.
    """
    if num_samples < 1:
        raise DomainError("num_samples must be >= 1")
    x_hat = pad_ones(np.atleast_2d(np.asarray(x0, dtype=float)))
    rng = np.random.default_rng(seed)
    S = num_samples
    mng = post.experts.posteriors
    K, h, p = mng.M.shape

    beta0 = _sample_gaussian(rng, post.gating.mean, post.gating.cov, S)
    beta1 = _sample_gaussian(rng, post.output.mean, post.output.cov, S)
    tau = rng.gamma(shape=np.broadcast_to(mng.a[:, None], (S, K, h)), scale=1.0 / mng.b)
    z = rng.standard_normal((S, K, h, p))
    A = mng.M + (z @ np.swapaxes(_cov_factor(mng.V), -1, -2)) / np.sqrt(tau)[..., None]
    noise = rng.standard_normal((S, x_hat.shape[0], K, h))

    log_gate = log_stick_breaking(np.einsum("np,sjp->snj", x_hat, beta0))
    x1 = np.einsum("skhp,np->snkh", A, x_hat) + noise / np.sqrt(tau)[:, None]
    psi1 = np.einsum("snkh,slh->snkl", x1, beta1[..., :h]) + beta1[:, None, None, :, h]
    log_out = log_stick_breaking(psi1)
    return np.exp(logsumexp(log_gate[..., None] + log_out, axis=2))


def predict(post: CMNPosterior, x0, num_samples: int = 64, seed: int = 0) -> np.ndarray:
    """Monte Carlo posterior predictive class probabilities: (N, L)."""
    probs = sample_class_probs(post, x0, num_samples, seed).mean(axis=0)
    return probs / probs.sum(axis=1, keepdims=True)
