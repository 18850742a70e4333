"""Batched SPD factorization helpers with a diagonal jitter ladder."""

from __future__ import annotations

from collections import Counter

import numpy as np

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class SingularPrecisionError(np.linalg.LinAlgError):
    """A precision matrix could not be factorized even after jitter."""

    def __init__(self, min_diagonal: float, index=None):
        self.min_diagonal = float(min_diagonal)
        self.index = index
        where = "" if index is None else f" at batch index {index}"
        super().__init__(
            f"precision matrix is not positive definite{where} "
            f"(min diagonal {self.min_diagonal:.3e})"
        )


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _jittered_cholesky(a: np.ndarray, counters: Counter | None):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    n = a.shape[-1]
    scale = np.mean(np.diag(a))
    if not np.isfinite(scale) or scale <= 0:
        raise SingularPrecisionError(np.min(np.diag(a)))
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        if counters is not None:
            counters["jitter"] += 1
        try:
            return np.linalg.cholesky(a + jitter * scale * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularPrecisionError(np.min(np.diag(a)))


def cholesky(a: np.ndarray, counters: Counter | None = None) -> np.ndarray:
    """Lower Cholesky factor of a (batch of) SPD matrices.

    The whole batch is tried at once; on failure each matrix is retried with
    jitter ``eps * mean(diag)``, ``eps`` escalating from 1e-10 to 1e-4.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    if a.ndim == 2:
        return _jittered_cholesky(a, counters)
    batch_shape = a.shape[:-2]
    flat = a.reshape((-1,) + a.shape[-2:])
    out = np.empty_like(flat)
    for i, m in enumerate(flat):
        try:
            out[i] = _jittered_cholesky(m, counters)
        except SingularPrecisionError as err:
            raise SingularPrecisionError(
                err.min_diagonal, np.unravel_index(i, batch_shape)
            ) from None
    return out.reshape(a.shape)


def spd_inverse(a: np.ndarray, counters: Counter | None = None):
    """Return ``(inverse, logdet)`` of a (batch of) SPD matrices."""
    chol = cholesky(a, counters)
    chol_inv = np.linalg.inv(chol)
    inv = np.swapaxes(chol_inv, -1, -2) @ chol_inv
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return symmetrize(inv), logdet


def spd_logdet(a: np.ndarray, counters: Counter | None = None) -> np.ndarray:
    chol = cholesky(a, counters)
    return 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
