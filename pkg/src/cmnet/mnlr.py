"""Variational Bayesian multinomial logistic regression with Polya-Gamma augmentation.

The categorical likelihood is written in stick-breaking form, one sigmoid per
stick, and each sigmoid is augmented with a Polya-Gamma variable. Given the
augmentation the log-likelihood is quadratic in the stick coefficients, so
every factor has a closed-form coordinate update.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from ._linalg import spd_inverse, symmetrize
from .distributions import (
    LOG2,
    GaussianNatural,
    gaussian_kl_isotropic,
    kappa_vector,
    log_cosh,
    natural_to_moments,
    pad_ones,
    pg_mean,
)

__all__ = [
    "MNLRPosterior",
    "AugmentationBatch",
    "psi_moments",
    "update_xi",
    "update_beta",
    "expected_loglik_bound",
    "expected_loglik_fixed_omega",
    "beta_kl",
    "update_latent_inputs",
    "fit_mnlr",
    "predict_proba",
]


@dataclass(frozen=True)
class MNLRPosterior:
    """Independent Gaussian factors q(beta_k), one per stick.

    ``mean`` is (C-1, m+1) and ``cov`` is (C-1, m+1, m+1); the last
    coordinate of each stick is the bias. ``sigma_sq`` is the isotropic
    prior variance.
    """

    mean: np.ndarray
    cov: np.ndarray
    sigma_sq: float

    def __post_init__(self):
        mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != mean.shape + mean.shape[-1:]:
            raise ValueError(f"cov shape {cov.shape} does not match mean {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", symmetrize(cov))

    @classmethod
    def prior(cls, num_sticks: int, dim: int, sigma_sq: float) -> "MNLRPosterior":
        """The prior over ``num_sticks`` sticks acting on ``dim`` inputs plus bias."""
        p = dim + 1
        return cls(np.zeros((num_sticks, p)), np.tile(sigma_sq * np.eye(p), (num_sticks, 1, 1)), sigma_sq)

    @classmethod
    def from_natural(cls, g: GaussianNatural, sigma_sq: float, counters=None) -> "MNLRPosterior":
        mean, cov = natural_to_moments(g, counters)
        return cls(mean, cov, sigma_sq)

    @property
    def num_sticks(self) -> int:
        return self.mean.shape[0]

    @property
    def second_moment(self) -> np.ndarray:
        return self.cov + self.mean[:, :, None] * self.mean[:, None, :]

    def natural(self) -> GaussianNatural:
        prec, _ = spd_inverse(self.cov)
        return GaussianNatural(np.einsum("kij,kj->ki", prec, self.mean), -0.5 * prec)


@dataclass(frozen=True)
class AugmentationBatch:
    """Per-datapoint input moments and Polya-Gamma states.

    ``mu_hat`` is (N, m+1) ending in 1 and ``M_hat`` is the (N, m+1, m+1)
    second moment of the padded input. ``kappa``, ``b_shape`` and ``xi`` are
    (N, C-1).
    """

    mu_hat: np.ndarray
    M_hat: np.ndarray
    kappa: np.ndarray
    b_shape: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        n, p = self.mu_hat.shape
        if self.M_hat.shape != (n, p, p):
            raise ValueError("M_hat must be (N, m+1, m+1)")
        if not (self.kappa.shape == self.b_shape.shape == self.xi.shape) or self.kappa.shape[0] != n:
            raise ValueError("kappa, b_shape and xi must share shape (N, C-1)")

    @property
    def e_omega(self) -> np.ndarray:
        return pg_mean(self.b_shape, self.xi)

    def with_xi(self, xi) -> "AugmentationBatch":
        return AugmentationBatch(self.mu_hat, self.M_hat, self.kappa, self.b_shape, np.asarray(xi))

    @classmethod
    def from_inputs(cls, x, y, num_classes: int, x_cov=None) -> "AugmentationBatch":
        """Build a batch for inputs with mean ``x`` and optional covariance."""
        x = np.asarray(x, dtype=float)
        mu_hat = pad_ones(x)
        M_hat = mu_hat[:, :, None] * mu_hat[:, None, :]
        if x_cov is not None:
            m = x.shape[1]
            M_hat[:, :m, :m] += np.asarray(x_cov, dtype=float)
        kappa, b = kappa_vector(y, num_classes)
        return cls(mu_hat, M_hat, kappa, b, np.zeros_like(kappa))


def psi_moments(post: MNLRPosterior, batch: AugmentationBatch):
    """First and second moments of ``psi_nk = beta_k . x_hat_n`` (each N x (C-1))."""
    mean = batch.mu_hat @ post.mean.T
    p = batch.M_hat.shape[-1]
    second = batch.M_hat.reshape(-1, p * p) @ post.second_moment.reshape(-1, p * p).T
    return mean, second


def update_xi(post: MNLRPosterior, batch: AugmentationBatch) -> np.ndarray:
    """Optimal tilts ``xi_nk = sqrt(Tr(M_k M_hat_n))``."""
    if batch.mu_hat.shape[1] != post.mean.shape[1]:
        raise ValueError(
            f"input dimension {batch.mu_hat.shape[1]} does not match coefficients {post.mean.shape[1]}"
        )
    _, second = psi_moments(post, batch)
    return np.sqrt(np.maximum(second, 0.0))


def update_beta(sigma_sq: float, batch: AugmentationBatch, e_omega=None, counters: Counter | None = None) -> MNLRPosterior:
    """Closed-form update of every q(beta_k) given the current E[omega].

    Precision ``I / sigma_sq + sum_n E[omega_nk] M_hat_n`` and linear term
    ``sum_n kappa_nk mu_hat_n``; sticks are independent.
    """
    if e_omega is None:
        e_omega = batch.e_omega
    p = batch.mu_hat.shape[1]
    lambda1 = batch.kappa.T @ batch.mu_hat
    n = batch.M_hat.shape[0]
    weighted = (e_omega.T @ batch.M_hat.reshape(n, p * p)).reshape(-1, p, p)
    precision = np.eye(p) / sigma_sq + weighted
    return MNLRPosterior.from_natural(GaussianNatural(lambda1, -0.5 * precision), sigma_sq, counters)


def expected_loglik_bound(kappa, b_shape, psi_mean, psi_second):
    """E_q[l] - KL[q(omega) || p(omega)] at the optimal tilt, summed over sticks.

    With ``xi = sqrt(<psi^2>)`` the quadratic term and the Polya-Gamma KL
    combine to ``-b ln cosh(xi / 2)``.
    """
    xi = np.sqrt(np.maximum(psi_second, 0.0))
    terms = kappa * psi_mean - b_shape * (LOG2 + log_cosh(0.5 * xi))
    return np.sum(terms, axis=-1)


def expected_loglik_fixed_omega(kappa, b_shape, e_omega, psi_mean, psi_second):
    """E_q[l] for a fixed q(omega), summed over sticks (no KL term)."""
    terms = kappa * psi_mean - b_shape * LOG2 - 0.5 * e_omega * psi_second
    return np.sum(terms, axis=-1)


def beta_kl(post: MNLRPosterior, sigma_sq: float | None = None) -> float:
    """Sum over sticks of KL[q(beta_k) || N(0, sigma_sq I)]."""
    sigma_sq = post.sigma_sq if sigma_sq is None else sigma_sq
    return float(np.sum(gaussian_kl_isotropic(post.mean, post.cov, sigma_sq)))


def update_latent_inputs(post: MNLRPosterior, kappa, e_omega, prior: GaussianNatural) -> GaussianNatural:
    """Gaussian q(x_n) for uncertain inputs under a Gaussian prior term.

    ``kappa`` and ``e_omega`` are (N, C-1); ``prior`` holds natural parameters
    for each datapoint, shape (N, m) and (N, m, m).
    """
    m = post.mean.shape[1] - 1
    second = post.second_moment
    lambda1 = prior.lambda1 + kappa @ post.mean[:, :m] - e_omega @ second[:, m, :m]
    lambda2 = prior.lambda2 - 0.5 * np.einsum("nk,kij->nij", e_omega, second[:, :m, :m])
    return GaussianNatural(lambda1, lambda2)


def _elbo(post, batch):
    mean, second = psi_moments(post, batch)
    return float(np.sum(expected_loglik_bound(batch.kappa, batch.b_shape, mean, second)) - beta_kl(post))


def fit_mnlr(x, y, num_classes: int, sigma_sq: float = 25.0, max_iter: int = 500, tol: float = 1e-12):
    """CAVI for observed inputs. Returns ``(posterior, elbo_trace)``."""
    batch = AugmentationBatch.from_inputs(x, y, num_classes)
    post = MNLRPosterior.prior(num_classes - 1, np.asarray(x).shape[1], sigma_sq)
    trace = []
    for _ in range(max_iter):
        batch = batch.with_xi(update_xi(post, batch))
        post = update_beta(sigma_sq, batch)
        trace.append(_elbo(post, batch))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            break
    return post, np.array(trace)


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(64)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(2 * np.pi)


def predict_proba(post: MNLRPosterior, x) -> np.ndarray:
    """Posterior predictive class probabilities for observed inputs.

    Sticks are independent under q, so each factor E[sigma(+-psi)] is a 1-D
    Gauss-Hermite integral.
    """
    x_hat = pad_ones(np.atleast_2d(x))
    m = x_hat @ post.mean.T
    s = np.sqrt(np.maximum(np.einsum("ni,kij,nj->nk", x_hat, post.cov, x_hat), 0.0))
    psi = m[..., None] + s[..., None] * _GH_NODES
    p_stick = np.exp(-np.logaddexp(0.0, -psi)) @ _GH_WEIGHTS
    rest = np.cumprod(1.0 - p_stick, axis=-1)
    n = x_hat.shape[0]
    probs = np.empty((n, post.num_sticks + 1))
    probs[:, 0] = p_stick[:, 0]
    probs[:, 1:-1] = p_stick[:, 1:] * rest[:, :-1]
    probs[:, -1] = rest[:, -1]
    return probs

