"""Held-out evaluation metrics and the convergence-step estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.special import logsumexp

from .distributions import DomainError

__all__ = [
    "PredictionSet",
    "ConvergenceFit",
    "accuracy",
    "lpd",
    "ece",
    "waic",
    "steps_to_converge",
]

PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        probs = np.atleast_2d(np.asarray(self.probs, dtype=float))
        labels = np.asarray(self.labels, dtype=int)
        if probs.shape[0] != labels.shape[0]:
            raise ValueError("probs and labels disagree on N")
        if probs.size and np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-8):
            raise DomainError("prediction rows must sum to one")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]


def _nonempty(p: PredictionSet):
    if len(p) == 0:
        raise DomainError("empty prediction set")


def accuracy(p: PredictionSet) -> float:
    """Fraction correct; ``argmax`` breaks ties toward the lowest class index."""
    _nonempty(p)
    return float(np.mean(np.argmax(p.probs, axis=1) == p.labels))


def lpd(p: PredictionSet) -> float:
    """Mean log predictive density of the true labels."""
    _nonempty(p)
    picked = p.probs[np.arange(len(p)), p.labels]
    return float(np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def ece(p: PredictionSet, num_bins: int = 10) -> float:
    """Top-label expected calibration error with equal-width bins on (0, 1]."""
    if num_bins < 1:
        raise DomainError("num_bins must be >= 1")
    if len(p) == 0:
        return 0.0
    conf = p.probs.max(axis=1)
    correct = (np.argmax(p.probs, axis=1) == p.labels).astype(float)
    bins = np.clip(np.ceil(conf * num_bins).astype(int) - 1, 0, num_bins - 1)
    n = len(p)
    total = 0.0
    for b in range(num_bins):
        mask = bins == b
        if mask.any():
            total += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def waic(ll) -> float:
    """Per-datapoint WAIC on the log-density scale.

    ``ll`` is (S, N) of ln p(y_n | theta_s). Returns the mean over n of
    ``ln mean_s exp(ll) - var_s(ll)`` with the unbiased variance (zero when
    S = 1).
    """
    ll = np.atleast_2d(np.asarray(ll, dtype=float))
    s = ll.shape[0]
    if s < 1:
        raise DomainError("need at least one posterior sample")
    if not np.all(np.isfinite(ll)):
        raise DomainError("log-likelihoods must be finite")
    lppd = logsumexp(ll, axis=0) - np.log(s)
    penalty = ll.var(axis=0, ddof=1) if s > 1 else np.zeros(ll.shape[1])
    return float(np.mean(lppd - penalty))


@dataclass(frozen=True)
class ConvergenceFit:
    """Exponential-decay fit to a negated objective trace.

    ``steps`` is ``ceil(tau ln 20)``, or the trace length when ``decayed`` is
    false (amplitude not positive or fit failed).
    """

    steps: int
    decayed: bool
    offset: float
    amplitude: float
    tau: float


def _residual(theta, t, y):
    c, a, log_tau = theta
    return c + a * np.exp(-t * np.exp(-log_tau)) - y


def _jacobian(theta, t, y):
    _, a, log_tau = theta
    rate = np.exp(-log_tau)
    e = np.exp(-t * rate)
    return np.column_stack([np.ones_like(t), e, a * e * t * rate])


def steps_to_converge(trace) -> ConvergenceFit:
    """Steps until the fitted decay ``c + A exp(-t / tau)`` loses 95% of ``A``."""
    y = -np.asarray(trace, dtype=float)
    n = y.shape[0]
    if n < 3:
        raise DomainError("trace needs at least three entries")
    flagged = ConvergenceFit(n, False, float("nan"), float("nan"), float("nan"))
    if not np.all(np.isfinite(y)):
        return flagged
    t = np.arange(n, dtype=float)
    span = y.max() - y.min()
    if span <= 0:
        return flagged

    # log-linear start on values above the tail level
    c0 = y[-1] - 1e-3 * span
    resid = y - c0
    keep = resid > 1e-2 * span
    if keep.sum() < 2:
        keep = resid > 0
    if keep.sum() < 2:
        return flagged
    slope, intercept = np.polyfit(t[keep], np.log(resid[keep]), 1)
    if slope >= 0:
        return flagged
    tau0 = min(-1.0 / slope, 1e6)
    theta0 = np.array([c0, np.exp(intercept), np.log(tau0)])

    # scale so that the solver sees O(1) residuals
    scale = span
    fit = least_squares(
        lambda th: _residual(th, t, y) / scale,
        theta0,
        jac=lambda th: _jacobian(th, t, y) / scale,
        method="lm",
        xtol=1e-14,
        ftol=1e-14,
        gtol=1e-14,
        max_nfev=5000,
    )
    c, a, log_tau = fit.x
    tau = float(np.exp(log_tau))
    if not fit.success or a <= 0 or not np.isfinite(tau):
        return ConvergenceFit(n, False, float(c), float(a), tau)
    steps = math.ceil(tau * math.log(20.0))
    return ConvergenceFit(int(steps), True, float(c), float(a), tau)
