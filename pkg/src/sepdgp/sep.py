"""Stochastic EP: cavities, moment matching and averaged-factor updates.

The posterior over each layer's inducing outputs is kept as
``q = prior + N * g`` in natural parameters, where ``g`` is the single
averaged data factor. The tilted-distribution moments are obtained from the
gradients of log Z with respect to the cavity mean and covariance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layer import GaussianSite, InducingBelief
from .numerics import NotPositiveDefinite, batch_is_pd, symmetrize

logger = logging.getLogger(__name__)


class CavityNotPd(NotPositiveDefinite):
    pass


@dataclass
class SepConfig:
    """SEP update settings.

    ``damping`` is the per-datapoint step ``eta``; ``None`` means ``1/N``.
    With ``per_datapoint`` unset, one update per minibatch is made from the
    averaged site estimates, with the step compounded over the number of
    contributing points. An update that would leave the posterior non-PD is
    retried with the step halved up to ``max_halvings`` times before being
    skipped.
    """

    damping: Optional[float] = None
    skip_on_failure: bool = True
    parallel_within_minibatch: bool = False
    per_datapoint: bool = False
    max_halvings: int = 5

    def __post_init__(self):
        if self.damping is not None and not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be non-negative")

    def eta(self, n_train):
        return self.damping if self.damping is not None else 1.0 / n_train


def cavity(q: GaussianSite, g: GaussianSite, prior: Optional[GaussianSite] = None):
    """Remove one copy of ``g`` from ``q`` and return cavity moments."""
    try:
        return (q - g).moments()
    except NotPositiveDefinite as exc:
        raise CavityNotPd(str(exc)) from None


def moment_match(cav: InducingBelief, dm, dV) -> InducingBelief:
    """New moments from the cavity and the gradients of log Z.

    ``dm`` (D, M) and ``dV`` (D, M, M) are the derivatives of log Z with
    respect to the cavity mean and covariance.
    """
    m0, V0 = cav.mean, cav.cov
    dm = np.asarray(dm).reshape(m0.shape)
    dV = np.asarray(dV).reshape(V0.shape)
    mean = m0 + np.einsum("dmn,dn->dm", V0, dm)
    W = np.einsum("dm,dn->dmn", dm, dm) - 2.0 * dV
    cov = symmetrize(V0 - V0 @ W @ V0)
    if not np.all(batch_is_pd(cov)):
        raise NotPositiveDefinite("moment-matched covariance is not PD")
    return InducingBelief(mean, cov)


def site_estimate(q_new: InducingBelief, cav: InducingBelief) -> GaussianSite:
    """Natural parameters of the single site implied by ``q_new``/``cav``."""
    return GaussianSite.from_moments(q_new) - GaussianSite.from_moments(cav)


def update_factor(g: GaussianSite, q_new: InducingBelief, cav: InducingBelief,
                  config: SepConfig, n_train: int) -> GaussianSite:
    """Damped move of ``g`` toward the site estimate ``q_new / cav``."""
    eta = config.eta(n_train)
    theta_hat = site_estimate(q_new, cav)
    return g.scaled(1.0 - eta) + theta_hat.scaled(eta)


def batch_site_estimates(cav: InducingBelief, dm, dV):
    """Site estimates for a batch of datapoints sharing one cavity.

    Uses ``Lambda_hat = (I - W V)^-1 W`` with ``W = dm dm' - 2 dV`` and
    ``eta1_hat = dm + Lambda_hat m_new``, which avoids inverting the
    moment-matched covariance. ``dm`` is (B, D, M) and ``dV`` (B, D, M, M).

    Returns:
        ``(eta1_hat, eta2_hat, ok)`` where ``ok`` (B,) flags datapoints
        whose moment-matched covariances are PD for every output dim.
    """
    V = cav.cov[None]                                    # (1, D, M, M)
    m = cav.mean[None]
    W = np.einsum("bdm,bdn->bdmn", dm, dm) - 2.0 * dV
    V_new = symmetrize(V - V @ W @ V)
    ok = np.all(batch_is_pd(V_new), axis=1)
    M = V.shape[-1]
    I = np.eye(M)
    lhs = I - W @ V
    eta2 = np.zeros_like(W)
    eta1 = np.zeros_like(dm)
    if np.any(ok):
        eta2[ok] = symmetrize(np.linalg.solve(lhs[ok], W[ok]))
        m_new = m + np.einsum("xdmn,bdn->bdm", V, dm)
        eta1[ok] = dm[ok] + np.einsum("bdmn,bdn->bdm", eta2[ok], m_new[ok])
    return eta1, eta2, ok


def rank1_site_estimates(cav: InducingBelief, c, gm, gv):
    """Batch site estimates when ``dm = gm c`` and ``dV = gv c c'``.

    ``c`` is (B, M) and ``gm``/``gv`` are (B, D). Returns the batch mean of
    the site natural parameters over accepted points and the (B,) mask.
    """
    V, m = cav.cov, cav.mean                              # (D,M,M), (D,M)
    Vc = np.einsum("dmn,bn->bdm", V, c)
    s = np.einsum("bm,bdm->bd", c, Vc)
    w = gm**2 - 2.0 * gv
    denom = 1.0 - w * s
    ok = np.all(denom > 0, axis=1)
    if not np.any(ok):
        return None, None, ok
    alpha = w[ok] / denom[ok]                             # (K, D)
    cm = c[ok] @ m.T + gm[ok] * s[ok]                     # c'(m + gm V c)
    beta = gm[ok] + alpha * cm
    k = int(np.sum(ok))
    eta2 = np.einsum("kd,km,kn->dmn", alpha, c[ok], c[ok], optimize=True) / k
    eta1 = (beta.T @ c[ok]) / k
    return eta1, symmetrize(eta2), ok


def compounded_damping(eta, k):
    """Step equivalent to ``k`` damped moves toward the same target."""
    return 1.0 - (1.0 - eta)**k
