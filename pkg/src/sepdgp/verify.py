"""Oracle-backed verification suites.

Each suite draws seeded random configurations, compares the analytic code
against an oracle and returns one ``CaseResult`` per comparison. The same
suites back the ``verify`` command and the acceptance tests.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import mpmath as mp
import numpy as np

from . import kernel as kern
from .kernel import KernelParams, MomentBelief
from .layer import (KZZ_JITTER, InducingBelief, SparseGpLayer, forward_point,
                    prepare, prior_belief)
from .network import (DgpModel, flatten_param_grads, forward_moments,
                      grad_log_z, log_z)
from .oracle import _rbf, fd_grad, mc_log_z, mc_psi
from .sep import moment_match

PSI_DIMS = (1, 2, 5)
PSI_INDUCING = (1, 3, 10)


@dataclass
class CaseResult:
    suite: str
    case: int
    statistic: float
    threshold: float
    passed: bool
    detail: str = ""


def _psd(rng, M, scale=0.3, floor=0.1):
    A = rng.normal(size=(M, M)) * scale
    return A @ A.T + floor * np.eye(M)


def random_belief(rng, D, M, scale=0.3):
    return InducingBelief(rng.normal(size=(D, M)),
                          np.stack([_psd(rng, M, scale) for _ in range(D)]))


def posterior_like_belief(rng, layer, scale=1.0):
    """Belief of the form prior times a Gaussian site, as SEP produces.

    The covariance is ``(K_zz^-1 + Lambda)^-1`` for a random PSD site
    precision ``Lambda`` and the mean is ``cov @ Lambda @ t`` for random
    pseudo-targets ``t``, so ``K_zz^-1 m`` stays moderate even when K_zz is
    poorly conditioned.
    """
    M, D = layer.num_inducing, layer.output_dim
    K = layer.kzz()
    means, covs = [], []
    for _ in range(D):
        B = rng.normal(size=(M, M)) * scale
        Lam = B @ B.T / M
        cov = np.linalg.solve(np.eye(M) + K @ Lam, K)
        cov = 0.5 * (cov + cov.T)
        means.append(cov @ Lam @ rng.normal(size=M))
        covs.append(cov)
    return InducingBelief(np.stack(means), np.stack(covs))


def random_layer(rng, D_in, D_out, M, ls_range=(0.8, 2.0)):
    kp = KernelParams(math.log(rng.uniform(0.5, 1.5)),
                      np.log(rng.uniform(*ls_range, size=D_in)))
    return SparseGpLayer(rng.normal(size=(M, D_in)), kp,
                         math.log(rng.uniform(0.01, 0.2)), D_out)


# -- suites ------------------------------------------------------------------

def psi_suite(seed=0, n_configs=20, n_samples=10**6, psi1_fault=0.0):
    """Analytic psi-statistics against Monte Carlo, 3-SE bands per entry.

    ``psi1_fault`` is added to the analytic psi1 (fault-injection hook).
    """
    rng = np.random.default_rng([seed, 1])
    out = []
    for c in range(n_configs):
        D = PSI_DIMS[c % len(PSI_DIMS)]
        M = PSI_INDUCING[(c // len(PSI_DIMS)) % len(PSI_INDUCING)]
        p = KernelParams(math.log(rng.uniform(0.5, 2.0)),
                         np.log(rng.uniform(0.5, 2.0, size=D)))
        Z = rng.normal(size=(M, D))
        q = MomentBelief(rng.normal(size=D) * 0.5, rng.uniform(0.05, 1.0, D))
        est = mc_psi(p, Z, q, n_samples, seed=int(rng.integers(2**32)))
        z1 = est.psi1.z_scores(kern.psi1(p, Z, q) + psi1_fault).max()
        z2 = est.psi2.z_scores(kern.psi2(p, Z, q)).max()
        exact0 = kern.psi0(p, q) == p.sf2
        stat = float(max(z1, z2))
        out.append(CaseResult("psi_mc", c, stat, 3.0,
                              bool(stat <= 3.0 and exact0),
                              f"D={D} M={M} z1={z1:.2f} z2={z2:.2f}"))
    return out


def near_identity_config(rng, spread_factor=10.0):
    """Two-layer config whose second layer is close to ``h -> h[0]``.

    The second-layer lengthscale is ``spread_factor`` times the hidden
    spread ``max(|m| + 2 sd)`` at the test input, its inducing means lie on
    the identity map and its covariance is a small multiple of the prior.
    """
    x = rng.normal(size=3)
    l1 = random_layer(rng, 3, 2, 4, ls_range=(1.0, 2.0))
    l1.log_noise = math.log(0.01)
    b1 = random_belief(rng, 2, 4, 0.2)
    mh, vh, _ = forward_point(l1, prepare(l1, b1), x[None])
    spread = float(np.max(np.abs(mh) + 2.0 * np.sqrt(vh)))
    Z2 = rng.uniform(-1.0, 1.0, size=(5, 2))
    l2 = SparseGpLayer(Z2, KernelParams(0.0, np.full(2, math.log(
        spread_factor * spread))), math.log(0.1), 1)
    prior2 = prior_belief(l2)
    b2 = InducingBelief(Z2[:, :1].T.copy(), 0.01 * prior2.cov)
    return DgpModel([l1, l2]), [b1, b2], x


def log_z_suite(seed=0, n_configs=10, n_samples=10**6):
    """Two-layer analytic log Z against Monte Carlo in the near-identity regime."""
    rng = np.random.default_rng([seed, 2])
    out = []
    for c in range(n_configs):
        model, beliefs, x = near_identity_config(rng)
        pred = forward_moments(model, beliefs, x)
        y = float(pred.mean[0] + rng.normal() * math.sqrt(pred.variance[0]))
        est = mc_log_z(model, beliefs, x, y, n_samples,
                       seed=int(rng.integers(2**32)))
        stat = float(est.z_scores(log_z(model, beliefs, x, y)))
        out.append(CaseResult("logz_mc", c, stat, 3.0, stat <= 3.0,
                              f"se={float(est.standard_error):.2e}"))
    return out


def gradient_suite(seed=0, n_configs=10, step=1e-5, rtol=1e-4, atol=1e-8,
                   small=1e-6):
    """``grad_log_z`` against central differences over every parameter."""
    rng = np.random.default_rng([seed, 3])
    out = []
    for c in range(n_configs):
        l1 = random_layer(rng, 3, 2, 4)
        l2 = random_layer(rng, 2, 1, 5)
        model = DgpModel([l1, l2])
        beliefs = [posterior_like_belief(rng, l1),
                   posterior_like_belief(rng, l2)]
        x, y = rng.normal(size=3), float(rng.normal())
        _, grads = grad_log_z(model, beliefs, x, y)
        analytic = flatten_param_grads(grads)
        theta = model.get_params()

        def f(t):
            model.set_params(t)
            return log_z(model, beliefs, x, y)

        numeric = fd_grad(f, theta, step)
        model.set_params(theta)
        err = np.abs(analytic - numeric)
        tiny = np.abs(numeric) < small
        ok_rel = err[~tiny] <= rtol * np.abs(numeric[~tiny])
        ok_abs = err[tiny] <= atol
        rel = err[~tiny] / np.abs(numeric[~tiny])
        stat = float(rel.max()) if rel.size else 0.0
        out.append(CaseResult("grad_fd", c, stat, rtol,
                              bool(ok_rel.all() and ok_abs.all()),
                              f"{int(tiny.sum())} coords compared absolutely"))
    return out


def _conjugate_posterior(m, V, a, y, s2):
    """Exact posterior of ``u ~ N(m, V)`` after observing ``y ~ N(a'u, s2)``."""
    Va = V @ a
    gain = Va / (a @ Va + s2)
    return m + gain * (y - a @ m), V - np.outer(gain, Va)


def _conjugate_grads(m, V, a, y, s2):
    """Gradients of ``log N(y; a'm, a'Va + s2)`` in ``m`` and ``V``."""
    v = a @ V @ a + s2
    r = y - a @ m
    return a * r / v, 0.5 * np.outer(a, a) * (r * r / v**2 - 1.0 / v)


def conjugate_suite(seed=0, n_random=100, tol_scalar=1e-12, tol_random=1e-10):
    """Moment matching against exact Gaussian conditioning."""
    out = []
    # cavity N(0, 1), likelihood N(1; u, 1) -> posterior N(0.5, 0.5)
    m, V, a = np.zeros(1), np.eye(1), np.ones(1)
    dm, dV = _conjugate_grads(m, V, a, 1.0, 1.0)
    new = moment_match(InducingBelief(m[None], V[None]), dm[None], dV[None])
    err = max(abs(new.mean[0, 0] - 0.5), abs(new.cov[0, 0, 0] - 0.5))
    out.append(CaseResult("conjugate", 0, float(err), tol_scalar,
                          err <= tol_scalar, "scalar example"))
    rng = np.random.default_rng([seed, 4])
    for c in range(1, n_random + 1):
        M = int(rng.integers(1, 8))
        m = rng.normal(size=M)
        V = _psd(rng, M, 0.5, 0.2)
        a = rng.normal(size=M)
        y, s2 = float(rng.normal()), float(rng.uniform(0.1, 2.0))
        dm, dV = _conjugate_grads(m, V, a, y, s2)
        new = moment_match(InducingBelief(m[None], V[None]), dm[None], dV[None])
        m_ref, V_ref = _conjugate_posterior(m, V, a, y, s2)
        err = float(max(np.abs(new.mean[0] - m_ref).max(),
                        np.abs(new.cov[0] - V_ref).max()))
        out.append(CaseResult("conjugate", c, err, tol_random,
                              err <= tol_random, f"M={M}"))
    return out


def single_layer_marginal(layer, belief, x, y, digits=50):
    """Closed-form ``log p(y)`` for one layer, evaluated at ``digits`` precision.

    In float64 the closed form itself carries rounding error near 1e-9 when
    K_zz is ill-conditioned, so the reference is computed in extended
    precision.
    """
    with mp.workdps(digits):
        sf2 = mp.exp(mp.mpf(float(layer.kernel.log_sf2)))
        ls2 = [mp.exp(2 * mp.mpf(float(v)))
               for v in np.asarray(layer.kernel.log_lengthscales).ravel()]
        Z = layer.Z.tolist()
        x = np.asarray(x, dtype=np.float64).ravel().tolist()

        def k(a, b):
            return sf2 * mp.exp(-sum((mp.mpf(ai) - mp.mpf(bi))**2 / l2
                                     for ai, bi, l2 in zip(a, b, ls2)) / 2)

        M = len(Z)
        K = mp.matrix(M, M)
        for i in range(M):
            for j in range(M):
                K[i, j] = k(Z[i], Z[j])
            K[i, i] += mp.mpf(KZZ_JITTER)
        kx = mp.matrix([k(x, z) for z in Z])
        A = mp.lu_solve(K, kx)
        m = mp.matrix(belief.mean[0].tolist())
        V = mp.matrix(belief.cov[0].tolist())
        var = (mp.exp(mp.mpf(float(layer.log_noise))) + sf2 - (A.T * kx)[0]
               + (A.T * V * A)[0])
        r = mp.mpf(float(y)) - (A.T * m)[0]
        return float(-(mp.log(2 * mp.pi * var) + r * r / var) / 2)


def collapse_suite(seed=0, n_configs=100, tol=1e-9):
    """At L=1 the propagated log Z is exact; compare with the closed form."""
    rng = np.random.default_rng([seed, 5])
    out = []
    for c in range(n_configs):
        D, M = int(rng.integers(1, 5)), int(rng.integers(1, 8))
        layer = random_layer(rng, D, 1, M)
        belief = random_belief(rng, 1, M)
        x, y = rng.normal(size=D), float(rng.normal())
        got = log_z(DgpModel([layer]), [belief], x, y)
        ref = single_layer_marginal(layer, belief, x, y)
        err = abs(got - ref)
        out.append(CaseResult("collapse", c, float(err), tol, err <= tol,
                              f"D={D} M={M}"))
    return out


SUITES = {
    "psi_mc": psi_suite,
    "logz_mc": log_z_suite,
    "grad_fd": gradient_suite,
    "conjugate": conjugate_suite,
    "collapse": collapse_suite,
}


def run_all(seed=0, quick=False, psi1_fault=0.0,
            progress: Optional[Callable[[str], None]] = None) -> List[CaseResult]:
    """Every suite; ``quick`` uses 1e4 MC samples (wider 3-SE bands)."""
    psi_n = 10**4 if quick else 10**6
    logz_n = 10**5 if quick else 10**6
    results = []
    for name in SUITES:
        if progress:
            progress(name)
        if name == "psi_mc":
            results += psi_suite(seed, n_samples=psi_n, psi1_fault=psi1_fault)
        elif name == "logz_mc":
            results += log_z_suite(seed, n_samples=logz_n)
        else:
            results += SUITES[name](seed)
    return results


def write_report(results, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["suite", "case", "statistic", "threshold", "passed",
                    "detail"])
        for r in results:
            w.writerow([r.suite, r.case, f"{r.statistic:.17g}",
                        f"{r.threshold:.17g}", int(r.passed), r.detail])
