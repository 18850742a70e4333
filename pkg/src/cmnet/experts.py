"""Mixture of linear experts with Matrix-Normal-Gamma posteriors.

Each expert maps a bias-padded input ``x0_hat`` to a Gaussian over the
latent ``x1`` with diagonal noise precision. Updates are responsibility
weighted sums of sufficient statistics.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from ._linalg import spd_inverse, spd_logdet, symmetrize
from .distributions import DomainError, MatrixNormalGamma, gamma_kl, mng_expectations, pad_ones

__all__ = [
    "ExpertSuffStats",
    "ExpertBank",
    "accumulate_stats",
    "update_expert",
    "expected_gaussian_ll",
    "expert_kl",
]

B_FLOOR = 1e-12


@dataclass(frozen=True)
class ExpertSuffStats:
    """Responsibility-weighted sums for each expert (leading axis K)."""

    n_eff: np.ndarray
    sxx: np.ndarray
    syx: np.ndarray
    syy_diag: np.ndarray

    def __add__(self, other: "ExpertSuffStats") -> "ExpertSuffStats":
        return ExpertSuffStats(
            self.n_eff + other.n_eff,
            self.sxx + other.sxx,
            self.syx + other.syx,
            self.syy_diag + other.syy_diag,
        )

    def __getitem__(self, k) -> "ExpertSuffStats":
        return ExpertSuffStats(self.n_eff[k], self.sxx[k], self.syx[k], self.syy_diag[k])

    @classmethod
    def zeros(cls, num_experts: int, h: int, p: int) -> "ExpertSuffStats":
        return cls(np.zeros(num_experts), np.zeros((num_experts, p, p)), np.zeros((num_experts, h, p)), np.zeros((num_experts, h)))


def accumulate_stats(x0, x1_mean, x1_cov, gamma) -> ExpertSuffStats:
    """Sum sufficient statistics for every expert.

    Parameters
    ----------
    x0 : (N, d) raw inputs; a bias column is appended here.
    x1_mean : (N, K, h) means of q(x1 | z = k).
    x1_cov : (N, K, h, h) covariances of q(x1 | z = k).
    gamma : (N, K) responsibilities; each row must sum to one.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim != 2 or np.any(gamma < 0) or np.any(np.abs(gamma.sum(axis=1) - 1.0) > 1e-8):
        raise DomainError("responsibility rows must be probability vectors")
    x_hat = pad_ones(x0)
    x1_mean = np.asarray(x1_mean, dtype=float)
    x1_cov = np.asarray(x1_cov, dtype=float)
    n_eff = gamma.sum(axis=0)
    n, p = x_hat.shape
    outer = (x_hat[:, :, None] * x_hat[:, None, :]).reshape(n, p * p)
    sxx = (gamma.T @ outer).reshape(-1, p, p)
    weighted = gamma.T[:, :, None] * np.swapaxes(x1_mean, 0, 1)
    syx = np.swapaxes(weighted, 1, 2) @ x_hat
    second = np.diagonal(x1_cov, axis1=-2, axis2=-1) + x1_mean**2
    syy = np.einsum("nk,nki->ki", gamma, second)
    return ExpertSuffStats(n_eff, symmetrize(sxx), syx, syy)


def update_expert(prior: MatrixNormalGamma, stats: ExpertSuffStats, counters: Counter | None = None) -> MatrixNormalGamma:
    """Conjugate update of one or many experts from weighted statistics.

    ``prior`` may be a single factor (broadcast across experts) or batched.
    Experts whose statistics are all zero get the prior back unchanged.
    """
    V0_inv = prior.V_inv
    M0 = prior.M
    V_inv = symmetrize(V0_inv + stats.sxx)
    V, _ = spd_inverse(V_inv, counters)
    M = (M0 @ V0_inv + stats.syx) @ V
    a = prior.a + 0.5 * stats.n_eff
    quad = np.einsum("...ij,...jk,...ik->...i", M, V_inv, M)
    quad0 = np.einsum("...ij,...jk,...ik->...i", M0, V0_inv, M0)
    b = prior.b + 0.5 * (stats.syy_diag - quad + quad0)
    low = b < B_FLOOR
    if np.any(low):
        if counters is not None:
            counters["b_clamp"] += int(np.sum(low))
        b = np.maximum(b, B_FLOOR)

    empty = (
        (stats.n_eff == 0)
        & np.all(stats.sxx == 0, axis=(-2, -1))
        & np.all(stats.syx == 0, axis=(-2, -1))
        & np.all(stats.syy_diag == 0, axis=-1)
    )
    if np.any(empty):
        shape = np.shape(empty)
        M = np.where(empty[..., None, None], np.broadcast_to(M0, M.shape), M)
        V = np.where(empty[..., None, None], np.broadcast_to(prior.V, V.shape), V)
        V_inv = np.where(empty[..., None, None], np.broadcast_to(V0_inv, V_inv.shape), V_inv)
        a = np.where(empty, np.broadcast_to(prior.a, shape), a)
        b = np.where(empty[..., None], np.broadcast_to(prior.b, b.shape), b)
    return MatrixNormalGamma(M, V, a, b, V_inv)


def expected_gaussian_ll(post: MatrixNormalGamma, x0, x1_mean, x1_cov):
    """E over q(A, Sigma) and q(x1) of ln N(x1; A x0_hat, Sigma).

    For a batched ``post`` (K experts) ``x1_mean`` is (N, K, h) and the result
    is (N, K); for a single expert it is (N, h) and the result is (N,).
    """
    exp = mng_expectations(post)
    x_hat = pad_ones(x0)
    x1_mean = np.asarray(x1_mean, dtype=float)
    x1_cov = np.asarray(x1_cov, dtype=float)
    second_diag = np.diagonal(x1_cov, axis1=-2, axis2=-1) + x1_mean**2
    if post.M.ndim == 2:
        trace = second_diag @ exp.precision
        cross = np.einsum("ni,ij,nj->n", x1_mean, exp.precision_mean, x_hat)
        quad = np.einsum("ni,ij,nj->n", x_hat, exp.quad, x_hat)
    else:
        trace = np.sum(second_diag * exp.precision, axis=-1)
        proj = np.swapaxes(x_hat @ np.swapaxes(exp.precision_mean, -1, -2), 0, 1)
        cross = np.sum(x1_mean * proj, axis=-1)
        quad = np.sum((x_hat @ exp.quad) * x_hat, axis=-1).T
    h = post.h
    return 0.5 * exp.logdet_precision - 0.5 * h * np.log(2 * np.pi) - 0.5 * (trace - 2.0 * cross + quad)


def expert_kl(post: MatrixNormalGamma, prior: MatrixNormalGamma):
    """KL[q(A, tau) || p(A, tau)] per expert.

    Sum over rows of the Gamma KL plus the expected (over q(tau)) KL between
    the row Gaussians ``N(m_i, V / tau_i)`` and ``N(m0_i, V0 / tau_i)``.
    """
    p = post.p
    tau = post.a[..., None] / post.b
    diff = post.M - prior.M
    maha = np.einsum("...ij,...jk,...ik->...i", diff, prior.V_inv, diff)
    trace = np.einsum("...ij,...ji->...", prior.V_inv, post.V)
    logdet_ratio = spd_logdet(prior.V) - spd_logdet(post.V)
    row_gauss = 0.5 * (trace[..., None] - p + tau * maha + logdet_ratio[..., None])
    row_gamma = gamma_kl(post.a[..., None], post.b, prior.a[..., None], prior.b)
    return np.sum(row_gauss + row_gamma, axis=-1)


@dataclass(frozen=True)
class ExpertBank:
    """K expert posteriors sharing one prior with zero prior mean."""

    posteriors: MatrixNormalGamma
    prior: MatrixNormalGamma

    @property
    def num_experts(self) -> int:
        return self.posteriors.M.shape[0]

    @staticmethod
    def make_prior(h: int, d: int, v0: float, a0: float, b0: float) -> MatrixNormalGamma:
        p = d + 1
        return MatrixNormalGamma(np.zeros((h, p)), v0 * np.eye(p), a0, np.full(h, float(b0)), np.eye(p) / v0)

    @classmethod
    def from_prior(cls, num_experts: int, prior: MatrixNormalGamma, means=None) -> "ExpertBank":
        M = np.broadcast_to(prior.M, (num_experts,) + prior.M.shape).copy() if means is None else np.asarray(means, dtype=float)
        post = MatrixNormalGamma(
            M,
            np.broadcast_to(prior.V, (num_experts,) + prior.V.shape).copy(),
            np.full(num_experts, float(prior.a)),
            np.broadcast_to(prior.b, (num_experts,) + prior.b.shape).copy(),
            np.broadcast_to(prior.V_inv, (num_experts,) + prior.V.shape).copy(),
        )
        return cls(post, prior)

    def updated(self, stats: ExpertSuffStats, counters: Counter | None = None) -> "ExpertBank":
        return ExpertBank(update_expert(self.prior, stats, counters), self.prior)

    def kl(self) -> float:
        return float(np.sum(expert_kl(self.posteriors, self.prior)))
