"""Positive-semidefinite linear algebra helpers.

Every covariance factorization in the package goes through :func:`chol_psd`
so that jitter escalation is reported rather than applied silently.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

logger = logging.getLogger(__name__)


class FactorizationFailed(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factorized within the jitter budget."""


class NotPositiveDefinite(np.linalg.LinAlgError):
    """A matrix required to be positive definite is not."""


@dataclass(frozen=True)
class JitterPolicy:
    """Escalation schedule for diagonal jitter.

    ``initial_jitter`` is relative to the mean of the diagonal. The first
    attempt is always made without jitter; after that up to ``max_attempts``
    jittered attempts are made, multiplying the jitter by ``growth_factor``
    each time.
    """

    initial_jitter: float = 1e-6
    growth_factor: float = 10.0
    max_attempts: int = 5

    def __post_init__(self):
        if not self.initial_jitter > 0:
            raise ValueError("initial_jitter must be positive")
        if not self.growth_factor > 1:
            raise ValueError("growth_factor must exceed 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")


DEFAULT_POLICY = JitterPolicy()


def chol_psd(A, policy: Optional[JitterPolicy] = None):
    """Lower Cholesky factor of a symmetric PSD matrix with jitter escalation.

    Args:
        A: symmetric ``(n, n)`` array.
        policy: jitter schedule, defaults to :data:`DEFAULT_POLICY`.

    Returns:
        ``(L, jitter)`` with ``L @ L.T == A + jitter * I``.

    Raises:
        FactorizationFailed: if no attempt in the schedule succeeds.
    """
    policy = policy or DEFAULT_POLICY
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    try:
        return sla.cholesky(A, lower=True, check_finite=True), 0.0
    except (np.linalg.LinAlgError, ValueError):
        pass
    scale = np.mean(np.diag(A))
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    jitter = policy.initial_jitter * scale
    eye = np.eye(A.shape[0])
    for _ in range(policy.max_attempts):
        try:
            L = sla.cholesky(A + jitter * eye, lower=True, check_finite=True)
            logger.debug("cholesky needed jitter %.3g", jitter)
            return L, jitter
        except (np.linalg.LinAlgError, ValueError):
            jitter *= policy.growth_factor
    raise FactorizationFailed(
        f"matrix not PSD after {policy.max_attempts} jitter attempts "
        f"(last jitter {jitter / policy.growth_factor:.3g})")


def solve_psd(L, B):
    """Solve ``A X = B`` given the lower Cholesky factor ``L`` of ``A``."""
    L = np.asarray(L)
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != L.shape[0]:
        raise ValueError(f"shape mismatch: factor {L.shape}, rhs {B.shape}")
    return sla.cho_solve((L, True), B, check_finite=False)


def inv_psd(L):
    """Inverse of ``A`` from its lower Cholesky factor, symmetrized."""
    Ainv = solve_psd(L, np.eye(L.shape[0]))
    return 0.5 * (Ainv + Ainv.T)


def logdet_psd(L):
    """Log-determinant of ``A`` from its Cholesky factor."""
    return 2.0 * np.sum(np.log(np.diag(L)))


def is_pd(A):
    """True when ``A`` admits a jitter-free Cholesky factorization."""
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


def batch_is_pd(A):
    """Boolean mask over the leading axes of a stack of square matrices."""
    A = np.asarray(A)
    lead = A.shape[:-2]
    try:
        np.linalg.cholesky(A)
        return np.ones(lead, dtype=bool)
    except np.linalg.LinAlgError:
        pass
    flat = A.reshape((-1,) + A.shape[-2:])
    ok = np.array([is_pd(a) for a in flat], dtype=bool)
    return ok.reshape(lead)


def symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))
