"""Exponential-family building blocks.

Natural-parameter Gaussians, Matrix-Normal-Gamma factors over linear maps
with diagonal noise precision, Polya-Gamma moments and KL, and the
stick-breaking parameterization of a categorical distribution.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import digamma, gammaln

from ._linalg import SingularPrecisionError, spd_inverse, symmetrize

__all__ = [
    "DomainError",
    "SingularPrecisionError",
    "GaussianNatural",
    "MatrixNormalGamma",
    "MNGExpectations",
    "PGState",
    "StickBreakingCoefficients",
    "pg_mean",
    "pg_kl",
    "log_cosh",
    "natural_to_moments",
    "moments_to_natural",
    "mng_expectations",
    "log_stick_breaking",
    "stick_breaking_probs",
    "kappa_vector",
    "gaussian_entropy",
    "gaussian_kl_isotropic",
    "gamma_kl",
]

LOG2 = np.log(2.0)
PG_SERIES_THRESHOLD = 1e-4


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


def _check_nonnegative(name, value):
    value = np.asarray(value, dtype=float)
    if np.any(np.isnan(value)) or np.any(value < 0):
        raise DomainError(f"{name} must be nonnegative")
    return value


def log_cosh(x):
    """Overflow-safe ``ln cosh(x)``."""
    ax = np.abs(np.asarray(x, dtype=float))
    return ax + np.log1p(np.exp(-2.0 * ax)) - LOG2


def pg_mean(b_shape, xi):
    """Mean of PG(b, xi): ``b / (2 xi) * tanh(xi / 2)``.

    Below ``xi = 1e-4`` the two-term series ``b/4 (1 - xi^2/12)`` is used.
    """
    b = _check_nonnegative("b_shape", b_shape)
    xi = _check_nonnegative("xi", xi)
    small = xi < PG_SERIES_THRESHOLD
    safe = np.where(small, 1.0, xi)
    out = np.where(
        small,
        0.25 * (1.0 - xi**2 / 12.0),
        np.tanh(0.5 * safe) / (2.0 * safe),
    )
    out = b * out
    return out if out.ndim else float(out)


def pg_kl(b_shape, xi):
    """KL[PG(b, xi) || PG(b, 0)] = -(b xi / 4) tanh(xi / 2) + b ln cosh(xi / 2)."""
    b = _check_nonnegative("b_shape", b_shape)
    xi = _check_nonnegative("xi", xi)
    out = b * (log_cosh(0.5 * xi) - 0.25 * xi * np.tanh(0.5 * xi))
    # exact zero at xi = 0, tiny negative rounding elsewhere
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PGState:
    """Polya-Gamma posterior for one data point and one stick."""

    b_shape: float
    xi: float
    kappa: float

    def __post_init__(self):
        if self.xi < 0 or self.b_shape < 0:
            raise DomainError("PGState requires b_shape >= 0 and xi >= 0")

    @property
    def mean(self) -> float:
        return pg_mean(self.b_shape, self.xi)

    @property
    def kl(self) -> float:
        return pg_kl(self.b_shape, self.xi)


# --------------------------------------------------------------------------
# Gaussians


@dataclass(frozen=True)
class GaussianNatural:
    """Multivariate Gaussian in natural parameters.

    ``lambda1 = P mu`` and ``lambda2 = -P / 2`` where ``P`` is the precision.
    Leading batch dimensions are allowed on both arrays.
    """

    lambda1: np.ndarray
    lambda2: np.ndarray

    def __post_init__(self):
        l1 = np.asarray(self.lambda1, dtype=float)
        l2 = np.asarray(self.lambda2, dtype=float)
        if l2.shape[-2:] != (l1.shape[-1], l1.shape[-1]) or l2.shape[:-2] != l1.shape[:-1]:
            raise ValueError(
                f"incompatible natural parameter shapes {l1.shape} and {l2.shape}"
            )
        object.__setattr__(self, "lambda1", l1)
        object.__setattr__(self, "lambda2", l2)

    @property
    def dim(self) -> int:
        return self.lambda1.shape[-1]

    @property
    def precision(self) -> np.ndarray:
        return -2.0 * self.lambda2

    @classmethod
    def from_moments(cls, mean, cov) -> "GaussianNatural":
        return cls(*moments_to_natural(mean, cov))

    @classmethod
    def isotropic(cls, dim: int, variance: float) -> "GaussianNatural":
        return cls(np.zeros(dim), -0.5 / variance * np.eye(dim))

    def moments(self, counters: Counter | None = None):
        return natural_to_moments(self, counters)


def natural_to_moments(g: GaussianNatural, counters: Counter | None = None):
    """Return ``(mean, cov)`` with ``cov = (-2 lambda2)^-1`` via Cholesky."""
    cov, _ = spd_inverse(g.precision, counters)
    mean = np.einsum("...ij,...j->...i", cov, g.lambda1)
    return mean, cov


def moments_to_natural(mean, cov):
    mean = np.asarray(mean, dtype=float)
    prec, _ = spd_inverse(np.asarray(cov, dtype=float))
    return np.einsum("...ij,...j->...i", prec, mean), -0.5 * prec


def gaussian_entropy(logdet_cov, dim: int):
    return 0.5 * dim * (1.0 + np.log(2 * np.pi)) + 0.5 * np.asarray(logdet_cov)


def gaussian_kl_isotropic(mean, cov, variance: float, logdet_cov=None):
    """KL[N(mean, cov) || N(0, variance I)], batched over leading dims."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    m = mean.shape[-1]
    if logdet_cov is None:
        sign, logdet_cov = np.linalg.slogdet(cov)
        if np.any(sign <= 0):
            raise SingularPrecisionError(np.min(np.diagonal(cov, axis1=-2, axis2=-1)))
    trace = np.trace(cov, axis1=-2, axis2=-1)
    quad = np.sum(mean**2, axis=-1)
    return 0.5 * ((trace + quad) / variance - m + m * np.log(variance) - logdet_cov)


def gamma_kl(a, b, a0, b0):
    """KL[Gamma(a, rate b) || Gamma(a0, rate b0)]."""
    a, b, a0, b0 = (np.asarray(v, dtype=float) for v in (a, b, a0, b0))
    return (
        (a - a0) * digamma(a)
        - gammaln(a)
        + gammaln(a0)
        + a0 * (np.log(b) - np.log(b0))
        + a * (b0 - b) / b
    )


# --------------------------------------------------------------------------
# Matrix-Normal-Gamma


@dataclass(frozen=True)
class MatrixNormalGamma:
    """Joint factor over ``A`` (h x p) and diagonal noise precisions.

    ``A | tau ~ MN(M, diag(1/tau), V)`` and ``tau_i ~ Gamma(a, rate=b_i)``.
    Arrays may carry one leading batch dimension (one entry per expert).
    """

    M: np.ndarray
    V: np.ndarray
    a: np.ndarray | float
    b: np.ndarray
    V_inv: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        V = symmetrize(np.asarray(self.V, dtype=float))
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if V.shape[-1] != M.shape[-1] or b.shape[-1] != M.shape[-2]:
            raise ValueError("inconsistent Matrix-Normal-Gamma shapes")
        if np.any(a <= 0) or np.any(b <= 0):
            raise DomainError("Gamma shape and rates must be positive")
        V_inv = self.V_inv
        if V_inv is None:
            V_inv, _ = spd_inverse(V)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "V_inv", symmetrize(np.asarray(V_inv, dtype=float)))

    @property
    def h(self) -> int:
        return self.M.shape[-2]

    @property
    def p(self) -> int:
        return self.M.shape[-1]

    def __getitem__(self, k) -> "MatrixNormalGamma":
        return MatrixNormalGamma(self.M[k], self.V[k], self.a[k], self.b[k], self.V_inv[k])

    @classmethod
    def stack(cls, factors) -> "MatrixNormalGamma":
        factors = list(factors)
        return cls(
            np.stack([f.M for f in factors]),
            np.stack([f.V for f in factors]),
            np.stack([f.a for f in factors]),
            np.stack([f.b for f in factors]),
            np.stack([f.V_inv for f in factors]),
        )


class MNGExpectations(NamedTuple):
    precision: np.ndarray  # E[tau], the diagonal of E[Sigma^-1]
    precision_mean: np.ndarray  # E[Sigma^-1 A]
    quad: np.ndarray  # E[A^T Sigma^-1 A]
    logdet_precision: np.ndarray  # E[ln det Sigma^-1]


def mng_expectations(p: MatrixNormalGamma) -> MNGExpectations:
    tau = p.a[..., None] / p.b
    precision_mean = tau[..., :, None] * p.M
    quad = np.einsum("...ij,...i,...ik->...jk", p.M, tau, p.M) + p.h * p.V
    logdet = np.sum(digamma(p.a)[..., None] - np.log(p.b), axis=-1)
    return MNGExpectations(tau, precision_mean, symmetrize(quad), logdet)


# --------------------------------------------------------------------------
# Stick breaking


@dataclass(frozen=True)
class StickBreakingCoefficients:
    """Per-stick regression weights; the last column multiplies the bias."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "beta", beta)

    @property
    def num_classes(self) -> int:
        return self.beta.shape[0] + 1


def pad_ones(x):
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def log_stick_breaking(psi):
    """Log class probabilities from stick activations ``psi`` (..., C-1)."""
    psi = np.asarray(psi, dtype=float)
    log_pi = _log_sigmoid(psi)
    log_rest = _log_sigmoid(-psi)
    cum = np.cumsum(log_rest, axis=-1)
    shifted = np.concatenate([np.zeros(psi.shape[:-1] + (1,)), cum], axis=-1)
    padded = np.concatenate([log_pi, np.zeros(psi.shape[:-1] + (1,))], axis=-1)
    return padded + shifted


def stick_breaking_probs(coeffs, x):
    """Class probabilities ``p_k = pi_k prod_{j<k} (1 - pi_j)``, ``pi_C = 1``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("inputs must be finite")
    beta = coeffs.beta if isinstance(coeffs, StickBreakingCoefficients) else np.asarray(coeffs)
    psi = pad_ones(x) @ beta.T
    return np.exp(log_stick_breaking(psi))


def kappa_vector(y, num_classes: int):
    """Return ``(kappa, b_shape)`` of shape (..., C-1) for 0-based labels ``y``.

    ``b_k = 1`` for sticks up to and including the label's stick and
    ``kappa_k = [k == y] - b_k / 2``.
    """
    y = np.asarray(y)
    if num_classes < 2:
        raise DomainError("need at least two classes")
    if np.any(y < 0) or np.any(y >= num_classes) or not np.all(np.equal(np.mod(y, 1), 0)):
        raise DomainError(f"labels must be integers in [0, {num_classes - 1}]")
    k = np.arange(num_classes - 1)
    y = y.astype(int)[..., None]
    b = (k <= y).astype(float)
    kappa = (k == y).astype(float) - 0.5 * b
    return kappa, b
